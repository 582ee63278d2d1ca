import tempfile
from pathlib import Path
from django.conf import settings
from django.test import SimpleTestCase, override_settings
from fedvfda.config import (
    CONFIG_FILENAME,
    ExperimentConfig,
    build_config,
    parse_config,
    load_document,
    dump_config,
    write_config,
    merge,
)
from fedvfda.errors import ConfigError


class ConfigFileMixin:
    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()
        self.root = Path(self.tmpdir.name)

    def tearDown(self):
        self.tmpdir.cleanup()

    def write(self, text: str) -> Path:
        path = self.root / "experiment.yaml"
        path.write_text(text, encoding="utf-8")
        return path

    def assertConfigError(self, text: str, key_path: str):
        with self.assertRaises(ConfigError) as context:
            parse_config(self.write(text))
        self.assertEqual(context.exception.key_path, key_path)
        self.assertIn(key_path, str(context.exception))
        return context.exception


class ParseConfigTestSuite(ConfigFileMixin, SimpleTestCase):
    def test_empty_document(self):
        config = parse_config(self.write(""))
        self.assertEqual(config.federation, ExperimentConfig().federation)
        self.assertEqual(config.data.num_clients, 4)
        self.assertEqual(config.data.volume_size, 16)
        self.assertEqual(config.network.encoder_channels, (8, 16, 32))
        self.assertEqual(config.federation.eta0, 10.0)
        self.assertEqual(config.ablation.seeds, 5)
        self.assertEqual(
            config.output_directory, str(settings.FEDVFDA_OUTPUT_DIRECTORY)
        )

    def test_no_path(self):
        self.assertEqual(parse_config(), parse_config(self.write("{}")))

    def test_values(self):
        config = parse_config(
            self.write(
                "seed: 7\n"
                "data:\n"
                "  num_clients: 2\n"
                "  heterogeneity: 0\n"
                "network:\n"
                "  encoder_channels: [4, 8]\n"
                "federation:\n"
                "  lr0: 1.0e-3\n"
                "  loss_weights: [1, 0.5]\n"
                "augmentation:\n"
                "  vfda_levels: [1]\n"
            )
        )
        self.assertEqual(config.seed, 7)
        self.assertEqual(config.data.heterogeneity, 0.0)
        self.assertIsInstance(config.data.heterogeneity, float)
        self.assertEqual(config.network.encoder_channels, (4, 8))
        self.assertEqual(config.federation.lr0, 1e-3)
        self.assertEqual(config.federation.loss_weights, (1.0, 0.5))
        self.assertEqual(config.augmentation.vfda_levels, (1,))
        fed = config.fed_config()
        self.assertEqual(fed.num_clients, 2)
        self.assertEqual(fed.vfda_levels, (1,))
        network = config.network_config()
        self.assertEqual(network.num_classes, 2)
        self.assertEqual(network.encoder_channels, (4, 8))

    def test_negative_eta0(self):
        error = self.assertConfigError("federation:\n  eta0: -1\n", "federation.eta0")
        self.assertIn("eta0", str(error))

    def test_unknown_keys(self):
        self.assertConfigError("federation:\n  bogus: 1\n", "federation.bogus")
        self.assertConfigError("colour: blue\n", "colour")

    def test_type_errors(self):
        self.assertConfigError("federation:\n  rounds: ten\n", "federation.rounds")
        self.assertConfigError("seed: true\n", "seed")
        self.assertConfigError(
            "augmentation:\n  random_flip: 1\n", "augmentation.random_flip"
        )
        self.assertConfigError(
            "federation:\n  loss_weights: [1, 2, 3]\n", "federation.loss_weights"
        )
        self.assertConfigError(
            "network:\n  encoder_channels: [8, x]\n", "network.encoder_channels[1]"
        )
        self.assertConfigError("data: 3\n", "data")

    def test_exponent_without_dot(self):
        # YAML 1.1 reads 5e-4 as a string
        self.assertConfigError("federation:\n  lr0: 5e-4\n", "federation.lr0")

    def test_constraints(self):
        self.assertConfigError("data:\n  volume_size: 10\n", "data.volume_size")
        self.assertConfigError("data:\n  num_classes: 4\n", "data.num_classes")
        self.assertConfigError("data:\n  heterogeneity: 1.5\n", "data.heterogeneity")
        self.assertConfigError(
            "data:\n  volume_size: 20\nnetwork:\n  encoder_channels: [2, 3, 4, 5]\n",
            "data.volume_size",
        )
        self.assertConfigError(
            "augmentation:\n  vfda_levels: [0, 3]\n", "augmentation.vfda_levels"
        )
        self.assertConfigError(
            "augmentation:\n  vfda_levels: [0, 0]\n", "augmentation.vfda_levels"
        )
        self.assertConfigError(
            "ablation:\n  no_vfda: true\n  mixup_baseline: true\n",
            "ablation.mixup_baseline",
        )
        self.assertConfigError("network:\n  kernel_size: 2\n", "network.kernel_size")

    def test_malformed_documents(self):
        with self.assertRaises(ConfigError):
            parse_config(self.write("- 1\n- 2\n"))
        with self.assertRaises(ConfigError):
            parse_config(self.write("data: [unclosed\n"))
        with self.assertRaises(ConfigError):
            parse_config(self.root / "missing.yaml")
        self.assertEqual(load_document(self.write("# nothing\n")), {})

    def test_null_section(self):
        config = parse_config(self.write("federation:\n"))
        self.assertEqual(config.federation, ExperimentConfig().federation)


class LayeringTestSuite(ConfigFileMixin, SimpleTestCase):
    @override_settings(FEDVFDA_DEFAULTS={"federation": {"rounds": 3, "eta0": 5.0}})
    def test_settings_defaults(self):
        config = parse_config(self.write("federation:\n  rounds: 4\n"))
        self.assertEqual(config.federation.rounds, 4)
        self.assertEqual(config.federation.eta0, 5.0)

    @override_settings(FEDVFDA_DEFAULTS={"federation": {"bogus": 3}})
    def test_settings_defaults_checked(self):
        with self.assertRaises(ConfigError):
            parse_config()

    def test_overrides(self):
        overrides = {
            "seed": 11, "output_directory": "elsewhere", "ablation": {"no_emd": True}
        }
        config = parse_config(self.write("seed: 3\nablation:\n  seeds: 2\n"), overrides)
        self.assertEqual(config.seed, 11)
        self.assertEqual(config.output_directory, "elsewhere")
        self.assertTrue(config.ablation.no_emd)
        self.assertEqual(config.ablation.seeds, 2)

    def test_merge(self):
        merged = merge({"a": {"b": 1, "c": 2}, "d": 3}, {"a": {"b": 4}, "e": 5})
        self.assertEqual(merged, {"a": {"b": 4, "c": 2}, "d": 3, "e": 5})


class EchoTestSuite(ConfigFileMixin, SimpleTestCase):
    def test_reparse(self):
        config = build_config(
            {
                "seed": 4,
                "network": {"encoder_channels": [2, 3, 4]},
                "ablation": {"no_vfda": True},
            }
        )
        path = write_config(config, self.root / "out")
        self.assertEqual(path.name, CONFIG_FILENAME)
        self.assertEqual(parse_config(path), config)

    def test_all_defaults_materialized(self):
        text = dump_config(build_config())
        for key in (
            "seed:",
            "eta0:",
            "vfda_levels:",
            "mixup_alpha:",
            "no_global_variance:",
            "samples_per_client:",
        ):
            self.assertIn(key, text)
        self.assertLess(text.index("seed:"), text.index("data:"))

    def test_with_ablation(self):
        config = build_config({"ablation": {"no_emd": True, "seeds": 3}})
        variant = config.with_ablation(no_vfda=True)
        self.assertTrue(variant.ablation.no_vfda)
        self.assertFalse(variant.ablation.no_emd)
        self.assertEqual(variant.ablation.seeds, 3)
        self.assertTrue(config.ablation.no_emd)
        self.assertFalse(variant.fed_config().vfda_active)
        self.assertEqual(config.with_vfda_levels((0,)).fed_config().vfda_levels, (0,))
        self.assertEqual(config.with_seed(9).seed, 9)
