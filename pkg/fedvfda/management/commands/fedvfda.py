from logging import getLogger
from django.core.management.base import BaseCommand, CommandError
from fedvfda.config import parse_config
from fedvfda.experiment import (
    run_train,
    run_eval,
    run_ablate,
    sweep_layers,
    gen_data,
    ABLATION_VARIANTS,
)
from fedvfda.errors import FedVfdaError, ConfigError


log = getLogger("main")


EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3


def config_overrides(options: dict) -> dict:
    overrides = {}
    if options.get("seed") is not None:
        overrides["seed"] = options["seed"]
    if options.get("out"):
        overrides["output_directory"] = options["out"]
    ablation = {}
    if options.get("no_emd"):
        ablation["no_emd"] = True
    if options.get("no_global_var"):
        ablation["no_global_variance"] = True
    if options.get("no_vfda"):
        ablation["no_vfda"] = True
    if options.get("mixup"):
        ablation["mixup_baseline"] = True
    if ablation:
        overrides["ablation"] = ablation
    return overrides


def load_config(options: dict):
    try:
        return parse_config(options.get("config"), config_overrides(options))
    except ConfigError as e:
        raise CommandError(
            f"Invalid configuration: {e}", returncode=EXIT_CONFIG_ERROR
        ) from e


class Command(BaseCommand):
    help = (
        "Simulates federated segmentation training with vicinal feature-level "
        "data augmentation"
    )

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.quiet = False

    def add_arguments(self, parser):
        parser.add_argument("subcommand", nargs="?", type=str)
        parser.add_argument("--config", dest="config", type=str, default=None)
        parser.add_argument("--seed", dest="seed", type=int, default=None)
        parser.add_argument("--out", dest="out", type=str, default=None)
        parser.add_argument("--no-emd", dest="no_emd", action="store_true")
        parser.add_argument(
            "--no-global-var", dest="no_global_var", action="store_true"
        )
        parser.add_argument("--no-vfda", dest="no_vfda", action="store_true")
        parser.add_argument("--mixup", dest="mixup", action="store_true")
        parser.add_argument("--model", dest="model", type=str, default=None)
        parser.add_argument("--dataset", dest="dataset", type=str, default=None)
        parser.add_argument("--resume", dest="resume", action="store_true")
        parser.add_argument("--max-rounds", dest="max_rounds", type=int, default=None)
        parser.add_argument("--parallel", dest="parallel", type=int, default=None)
        parser.add_argument("--quiet", dest="quiet", action="store_true")

    def write(self, msg, error=False):
        if not self.quiet:
            if error:
                self.stderr.write(msg)
            else:
                self.stdout.write(msg)

    def handle(self, *args, **options):
        subcommand_map = {
            "help": self.command_help,
            "gen-data": self.command_gen_data,
            "train": self.command_train,
            "eval": self.command_eval,
            "ablate": self.command_ablate,
            "sweep-layers": self.command_sweep_layers,
        }
        subcommand_name = options.get("subcommand")
        self.quiet = options.get("quiet")
        if subcommand_name is None:
            subcommand_func = self.command_help
        else:
            subcommand_func = subcommand_map.get(subcommand_name)
        if not subcommand_func:
            raise CommandError(
                f'Unknown subcommand specified: {subcommand_name} (try "help")',
                returncode=EXIT_CONFIG_ERROR,
            )
        if options.get("parallel") is not None and options["parallel"] < 1:
            raise CommandError("--parallel must be >= 1", returncode=EXIT_CONFIG_ERROR)
        try:
            subcommand_func(*args, **options)
        except ConfigError as e:
            raise CommandError(
                f"Invalid configuration: {e}", returncode=EXIT_CONFIG_ERROR
            ) from e
        except (FedVfdaError, OSError) as e:
            log.error(f"{subcommand_name} failed: {e}")
            raise CommandError(
                f"{subcommand_name} failed: {e}", returncode=EXIT_RUNTIME_ERROR
            ) from e

    def command_help(self, *args, **options):
        self.write(self.help)
        self.write("")
        self.write("This help message:")
        self.write("    ./manage.py fedvfda help")
        self.write("")
        self.write(
            "Write synthetic client shards and a held-out shard as volume files:"
        )
        self.write("    ./manage.py fedvfda gen-data --config=<file> --out=<directory>")
        self.write("")
        self.write(
            "Run federated training, writing metrics.csv, loss_curve.csv, model.npz and config.yaml:"
        )
        self.write("    ./manage.py fedvfda train --config=<file> --out=<directory>")
        self.write("")
        self.write(
            "Evaluate a saved model on a directory of volume files, printing and writing eval_report.json:"
        )
        self.write(
            "    ./manage.py fedvfda eval --model=<model.npz> --dataset=<directory>"
        )
        self.write("")
        self.write(
            f"Train the ablation variants ({', '.join(ABLATION_VARIANTS)}) and write ablation_table.csv:"
        )
        self.write("    ./manage.py fedvfda ablate --config=<file> --out=<directory>")
        self.write("")
        self.write(
            "Train VFDA at each single encoder level and at all levels, write layer_sweep.csv:"
        )
        self.write(
            "    ./manage.py fedvfda sweep-layers --config=<file> --out=<directory>"
        )
        self.write("")
        self.write("Additional options:")
        self.write("")
        self.write("    --seed=N - override the experiment seed")
        self.write(
            "    --no-emd - upload last-batch statistics instead of momentum statistics"
        )
        self.write(
            "    --no-global-var - weight local variances by ones instead of the global variances"
        )
        self.write("    --no-vfda - train without any feature augmentation")
        self.write("    --mixup - replace VFDA with input-level MixUp")
        self.write(
            "    --resume - continue an interrupted train run from its checkpoint"
        )
        self.write(
            "    --max-rounds=N - stop train after N more rounds, resumable with --resume"
        )
        self.write(
            "    --parallel=N - number of worker threads, defaults to settings.FEDVFDA_CONCURRENCY"
        )
        self.write("    --quiet - no output")
        self.write("")
        self.write("Exit codes: 0 success, 2 configuration error, 3 runtime error")
        self.write("")

    def command_gen_data(self, *args, **options):
        config = load_config(options)
        self.write(
            f"Generating data for {config.data.num_clients} clients with seed {config.seed} ..."
        )
        directory, digest = gen_data(config)
        self.write(f"Wrote dataset to: {directory}")
        self.write(f"    Shard hash: {digest}")

    def command_train(self, *args, **options):
        config = load_config(options)
        self.write(f"Training into: {config.output_directory}")
        self.write(f"    Clients:   {config.data.num_clients}")
        self.write(f"    Rounds:    {config.federation.rounds}")
        self.write(f"    Seed:      {config.seed}")
        self.write(f"    Ablation:  {config.to_dict()['ablation']}")
        result = run_train(
            config,
            resume=options.get("resume"),
            concurrency=options.get("parallel"),
            max_rounds=options.get("max_rounds"),
        )
        self.write(
            f"Completed {len(result.history)}/{config.federation.rounds} rounds."
        )
        self.write(
            f"    Final global Dice: {result.final_dice} (mean {result.final_dice_mean:.4f})"
        )

    def command_eval(self, *args, **options):
        model = options.get("model")
        dataset = options.get("dataset")
        if not model or not dataset:
            raise CommandError(
                "eval requires --model and --dataset", returncode=EXIT_CONFIG_ERROR
            )
        config = load_config(options)
        report = run_eval(model, dataset, config.output_directory)
        self.write(report.rstrip("\n"))

    def command_ablate(self, *args, **options):
        config = load_config(options)
        self.write(
            f"Running {len(ABLATION_VARIANTS)} variants over {config.ablation.seeds} seeds ..."
        )
        path = run_ablate(config, concurrency=options.get("parallel"))
        self.write(f"Wrote ablation table to: {path}")

    def command_sweep_layers(self, *args, **options):
        config = load_config(options)
        self.write(f"Sweeping VFDA placement over {config.ablation.seeds} seeds ...")
        path = sweep_layers(config, concurrency=options.get("parallel"))
        self.write(f"Wrote layer sweep to: {path}")
