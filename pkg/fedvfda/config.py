"""
Experiment configuration. Values are layered, lowest precedence first:

    1. defaults declared on the dataclasses below
    2. settings.FEDVFDA_DEFAULTS (nested dict) and settings.FEDVFDA_OUTPUT_DIRECTORY
    3. the YAML experiment document
    4. command line overrides

Unknown keys, wrong types and constraint violations raise ConfigError naming the dotted
key path.
"""

import types
import typing
from logging import getLogger
from pathlib import Path
from dataclasses import dataclass, field, fields, asdict, replace
import yaml
from django.conf import settings
from .segnet import NetworkConfig
from .federation import FedConfig
from .errors import ConfigError


log = getLogger("main")


CONFIG_FILENAME = "config.yaml"
DEFAULT_OUTPUT_DIRECTORY = "fedvfda-output"


@dataclass
class DataConfig:
    num_clients: int = 4
    volume_size: int = 16
    num_classes: int = 2
    samples_per_client: int = 8
    eval_samples: int = 8
    heterogeneity: float = 0.8
    # read shards written by gen-data instead of generating them in memory
    directory: str | None = None

    def validate(self) -> None:
        if self.num_clients < 1:
            raise ConfigError(
                "data.num_clients", f"must be >= 1, got {self.num_clients}"
            )
        if not 8 <= self.volume_size <= 256 or self.volume_size % 4:
            raise ConfigError(
                "data.volume_size",
                f"must be a multiple of 4 in [8, 256], got {self.volume_size}",
            )
        if self.num_classes not in (2, 3):
            raise ConfigError(
                "data.num_classes", f"must be 2 or 3, got {self.num_classes}"
            )
        if self.samples_per_client < 1:
            raise ConfigError(
                "data.samples_per_client",
                f"must be >= 1, got {self.samples_per_client}",
            )
        if self.eval_samples < 1:
            raise ConfigError(
                "data.eval_samples", f"must be >= 1, got {self.eval_samples}"
            )
        if not 0.0 <= self.heterogeneity <= 1.0:
            raise ConfigError(
                "data.heterogeneity", f"must be in [0, 1], got {self.heterogeneity}"
            )


@dataclass
class NetworkSection:
    in_channels: int = 1
    encoder_channels: tuple[int, ...] = (8, 16, 32)
    kernel_size: int = 3


@dataclass
class FederationSection:
    rounds: int = 20
    local_epochs: int = 1
    batch_size: int = 2
    lr0: float = 5e-4
    lr_power: float = 0.9
    eta0: float = 10.0
    loss_weights: tuple[float, float] = (1.0, 1.0)

    def validate(self) -> None:
        if self.rounds < 1:
            raise ConfigError("federation.rounds", f"must be >= 1, got {self.rounds}")
        if self.local_epochs < 0:
            raise ConfigError(
                "federation.local_epochs", f"must be >= 0, got {self.local_epochs}"
            )
        if self.batch_size < 1:
            raise ConfigError(
                "federation.batch_size", f"must be >= 1, got {self.batch_size}"
            )
        if self.lr0 < 0:
            raise ConfigError("federation.lr0", f"must be >= 0, got {self.lr0}")
        if self.lr_power < 0:
            raise ConfigError(
                "federation.lr_power", f"must be >= 0, got {self.lr_power}"
            )
        if self.eta0 <= 0:
            raise ConfigError("federation.eta0", f"must be > 0, got {self.eta0}")
        if any(w < 0 for w in self.loss_weights):
            raise ConfigError(
                "federation.loss_weights",
                f"must be >= 0, got {list(self.loss_weights)}",
            )


@dataclass
class AugmentationConfig:
    # encoder levels carrying an active VFDA layer, null for all of them
    vfda_levels: tuple[int, ...] | None = None
    vfda_probability: float = 1.0
    mixup_alpha: float = 0.2
    random_flip: bool = True

    def validate(self, levels: int) -> None:
        if self.vfda_levels is not None:
            for level in self.vfda_levels:
                if not 0 <= level < levels:
                    raise ConfigError(
                        "augmentation.vfda_levels",
                        f"levels must be in [0, {levels}), got {level}",
                    )
            if len(set(self.vfda_levels)) != len(self.vfda_levels):
                raise ConfigError(
                    "augmentation.vfda_levels",
                    f"levels must be unique, got {list(self.vfda_levels)}",
                )
        if not 0.0 <= self.vfda_probability <= 1.0:
            raise ConfigError(
                "augmentation.vfda_probability",
                f"must be in [0, 1], got {self.vfda_probability}",
            )
        if self.mixup_alpha <= 0:
            raise ConfigError(
                "augmentation.mixup_alpha", f"must be > 0, got {self.mixup_alpha}"
            )


@dataclass
class AblationConfig:
    no_emd: bool = False
    no_global_variance: bool = False
    no_vfda: bool = False
    mixup_baseline: bool = False
    # number of seeds for ablate and sweep-layers, counted up from the experiment seed
    seeds: int = 5

    def validate(self) -> None:
        if self.no_vfda and self.mixup_baseline:
            raise ConfigError(
                "ablation.mixup_baseline", "cannot be combined with ablation.no_vfda"
            )
        if self.seeds < 1:
            raise ConfigError("ablation.seeds", f"must be >= 1, got {self.seeds}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_directory: str = DEFAULT_OUTPUT_DIRECTORY
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkSection = field(default_factory=NetworkSection)
    federation: FederationSection = field(default_factory=FederationSection)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ConfigError(
                "seed", f"must be an unsigned 64 bit integer, got {self.seed}"
            )
        if not self.output_directory:
            raise ConfigError("output_directory", "must not be empty")
        self.data.validate()
        network = self.network_config()
        network.validate()
        if self.data.volume_size % network.downsampling:
            raise ConfigError(
                "data.volume_size",
                f"must be divisible by {network.downsampling} for {network.levels} encoder levels, "
                f"got {self.data.volume_size}",
            )
        self.federation.validate()
        self.augmentation.validate(network.levels)
        self.ablation.validate()

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            in_channels=self.network.in_channels,
            num_classes=self.data.num_classes,
            encoder_channels=self.network.encoder_channels,
            kernel_size=self.network.kernel_size,
        )

    def fed_config(self) -> FedConfig:
        federation = self.federation
        augmentation = self.augmentation
        ablation = self.ablation
        return FedConfig(
            num_clients=self.data.num_clients,
            rounds=federation.rounds,
            local_epochs=federation.local_epochs,
            batch_size=federation.batch_size,
            lr0=federation.lr0,
            lr_power=federation.lr_power,
            eta0=federation.eta0,
            loss_weights=federation.loss_weights,
            vfda_levels=augmentation.vfda_levels,
            vfda_probability=augmentation.vfda_probability,
            mixup_alpha=augmentation.mixup_alpha,
            random_flip=augmentation.random_flip,
            no_emd=ablation.no_emd,
            no_global_variance=ablation.no_global_variance,
            no_vfda=ablation.no_vfda,
            mixup_baseline=ablation.mixup_baseline,
        )

    def with_ablation(self, **flags: bool) -> "ExperimentConfig":
        """Returns a copy with the given ablation flags, every other ablation flag
        cleared."""
        cleared = {
            "no_emd": False,
            "no_global_variance": False,
            "no_vfda": False,
            "mixup_baseline": False,
        }
        cleared.update(flags)
        return replace(self, ablation=replace(self.ablation, **cleared))

    def with_vfda_levels(self, levels: tuple[int, ...] | None) -> "ExperimentConfig":
        return replace(
            self, augmentation=replace(self.augmentation, vfda_levels=levels)
        )

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    return value


def _type_name(type_) -> str:
    return getattr(type_, "__name__", str(type_))


def _coerce(value, type_, key_path: str):
    """Checks a parsed YAML value against a dataclass field annotation and converts
    lists to tuples."""
    origin = typing.get_origin(type_)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(type_)
        if value is None and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _coerce(value, inner, key_path)
    if origin is tuple:
        args = typing.get_args(type_)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key_path, f"expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            item_types = [args[0]] * len(value)
        else:
            if len(value) != len(args):
                raise ConfigError(
                    key_path, f"expected a list of {len(args)} values, got {len(value)}"
                )
            item_types = args
        return tuple(
            _coerce(v, t, f"{key_path}[{i}]")
            for i, (v, t) in enumerate(zip(value, item_types))
        )
    if type_ is bool:
        if not isinstance(value, bool):
            raise ConfigError(
                key_path, f"expected a boolean, got {type(value).__name__}"
            )
        return value
    if type_ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(
                key_path, f"expected an integer, got {type(value).__name__}"
            )
        return value
    if type_ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(
                key_path, f"expected a number, got {type(value).__name__}"
            )
        return float(value)
    if type_ is str:
        if not isinstance(value, str):
            raise ConfigError(
                key_path, f"expected a string, got {type(value).__name__}"
            )
        return value
    raise ConfigError(key_path, f"unsupported field type {_type_name(type_)}")


def _build(cls: type, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(
            prefix.rstrip("."), f"expected a mapping, got {type(data).__name__}"
        )
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(
                f"{prefix}{key}", f"unknown key, expected one of {sorted(known)}"
            )
    values = {}
    for name, value in data.items():
        type_ = known[name].type
        if isinstance(type_, type) and hasattr(type_, "__dataclass_fields__"):
            values[name] = _build(
                type_, value if value is not None else {}, f"{prefix}{name}."
            )
        else:
            values[name] = _coerce(value, type_, f"{prefix}{name}")
    return cls(**values)


def merge(base: dict, overlay: dict) -> dict:
    """Recursively merges overlay into a copy of base."""
    merged = dict(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def settings_layer() -> dict:
    layer = dict(getattr(settings, "FEDVFDA_DEFAULTS", {}) or {})
    output_directory = getattr(settings, "FEDVFDA_OUTPUT_DIRECTORY", None)
    if output_directory:
        layer.setdefault("output_directory", str(output_directory))
    return layer


def build_config(
    document: dict | None = None, overrides: dict | None = None
) -> ExperimentConfig:
    """Materializes and validates a config from settings, a document and overrides."""
    layered = merge(settings_layer(), document or {})
    layered = merge(layered, overrides or {})
    config = _build(ExperimentConfig, layered)
    config.validate()
    return config


def load_document(path: Path | str) -> dict:
    if isinstance(path, str):
        path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError("", f"Failed to read config file {path}: {e}") from e
    try:
        document = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError("", f"Failed to parse config file {path}: {e}") from e
    if document is None:
        return {}
    if not isinstance(document, dict):
        raise ConfigError(
            "",
            f"Config file {path} must contain a mapping, got {type(document).__name__}",
        )
    return document


def parse_config(
    path: Path | str | None = None, overrides: dict | None = None
) -> ExperimentConfig:
    document = load_document(path) if path is not None else {}
    config = build_config(document, overrides)
    log.debug(f"Parsed config from {path or 'defaults'}: {config}")
    return config


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def write_config(config: ExperimentConfig, directory: Path | str) -> Path:
    """Echoes the materialized config to <directory>/config.yaml."""
    if isinstance(directory, str):
        directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / CONFIG_FILENAME
    path.write_text(dump_config(config), encoding="utf-8")
    log.info(f"Wrote config to: {path}")
    return path
