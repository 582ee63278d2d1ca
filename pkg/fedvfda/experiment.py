import csv
import json
import hashlib
import warnings
from logging import getLogger
from pathlib import Path
from types import TracebackType
from dataclasses import dataclass, replace
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
import numpy as np
from django.conf import settings
from .segnet import Network, predict, save_model, load_model
from .synthdata import (
    VolumeSample,
    make_partition,
    mixture_shift,
    generate_sample,
    generate_shard,
    client_directory,
    write_shard,
    read_shard,
    shard_digest,
)
from .federation import Federation, RoundLog
from .transport import load_transport
from .config import ExperimentConfig, build_config, write_config
from .streams import get_stream
from .errors import (
    FederationError,
    FedVfdaWarning,
    ModelFormatError,
    ShapeError,
    VolumeFormatError,
)


log = getLogger("main")


METRICS_FILENAME = "metrics.csv"
LOSS_CURVE_FILENAME = "loss_curve.csv"
MODEL_FILENAME = "model.npz"
CHECKPOINT_FILENAME = "checkpoint.npz"
EVAL_REPORT_FILENAME = "eval_report.json"
ABLATION_TABLE_FILENAME = "ablation_table.csv"
ABLATION_RUNS_FILENAME = "ablation_runs.csv"
LAYER_SWEEP_FILENAME = "layer_sweep.csv"
DATA_DIRECTORY = "data"
EVAL_DIRECTORY = "eval"
GLOBAL_CLIENT_ID = -1


# Table rows, in order: none / MixUp / VFDA / VFDA without EMD / VFDA without global
# statistic variances
ABLATION_VARIANTS = {
    "none": {"no_vfda": True},
    "mixup": {"mixup_baseline": True},
    "vfda": {},
    "vfda_no_emd": {"no_emd": True},
    "vfda_no_global": {"no_global_variance": True},
}


def get_concurrency() -> int:
    return int(getattr(settings, "FEDVFDA_CONCURRENCY", 1))


def dice_score(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """2|P n G| / (|P| + |G|) for the voxels labelled class_id, 1.0 when the class is
    absent from both."""
    if pred.shape != gt.shape:
        raise ShapeError(
            f"Cannot score prediction of shape {pred.shape} against ground truth of shape {gt.shape}"
        )
    p = pred == class_id
    g = gt == class_id
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def per_class_dice(
    predictions: Sequence[np.ndarray], labels: Sequence[np.ndarray], num_classes: int
) -> list[float]:
    """Mean over samples of the per-sample Dice, for each foreground class 1..K-1."""
    scores = []
    for class_id in range(1, num_classes):
        pairs = list(zip(predictions, labels))
        if not any((p == class_id).any() or (g == class_id).any() for p, g in pairs):
            message = (
                f"Class {class_id} is absent from every prediction and label, "
                "its Dice is 1.0 by convention"
            )
            log.warning(message)
            warnings.warn(message, FedVfdaWarning, stacklevel=2)
        scores.append(float(np.mean([dice_score(p, g, class_id) for p, g in pairs])))
    return scores


def make_evaluator(
    samples: list[VolumeSample], num_classes: int
) -> Callable[[Network], list[float]]:
    """Returns a callable scoring a network on held-out samples, never augmenting."""
    labels = [s.label for s in samples]

    def _evaluate(net: Network) -> list[float]:
        predictions = [predict(net, s.volume)[0] for s in samples]
        return per_class_dice(predictions, labels, num_classes)

    return _evaluate


@dataclass
class Datasets:
    shards: list[list[VolumeSample]]
    eval_samples: list[VolumeSample]
    num_classes: int

    @property
    def digest(self) -> str:
        return shard_digest(self.shards + [self.eval_samples])


def generate_datasets(config: ExperimentConfig) -> Datasets:
    """Draws client shards from the data stream, the held-out set from eval."""
    data = config.data
    rng = get_stream(config.seed, "data")
    shifts = make_partition(
        data.num_clients,
        data.heterogeneity,
        rng,
        data.volume_size,
        data.samples_per_client,
    )
    shards = [
        generate_shard(shift, data.volume_size, data.num_classes, rng)
        for shift in shifts
    ]
    eval_rng = get_stream(config.seed, "eval")
    eval_samples = [
        generate_sample(
            mixture_shift(shifts, eval_rng),
            data.volume_size,
            data.num_classes,
            eval_rng,
        )
        for _ in range(data.eval_samples)
    ]
    return Datasets(
        shards=shards, eval_samples=eval_samples, num_classes=data.num_classes
    )


def read_datasets(config: ExperimentConfig, directory: Path | str) -> Datasets:
    """Reads a dataset written by gen-data and checks it against the config."""
    if isinstance(directory, str):
        directory = Path(directory)
    data = config.data
    shards = []
    for client_id in range(data.num_clients):
        samples, num_classes = read_shard(client_directory(directory, client_id))
        if not samples:
            raise VolumeFormatError(
                f"No volume files found for client {client_id} in {directory}"
            )
        if num_classes != data.num_classes:
            raise VolumeFormatError(
                f"Client {client_id} data declares K={num_classes}, config has K={data.num_classes}"
            )
        shards.append(samples)
    eval_samples, num_classes = read_shard(directory / EVAL_DIRECTORY)
    if not eval_samples:
        raise VolumeFormatError(
            f"No held-out volume files found in {directory / EVAL_DIRECTORY}"
        )
    if num_classes != data.num_classes:
        raise VolumeFormatError(
            f"Held-out data declares K={num_classes}, config has K={data.num_classes}"
        )
    for sample in [s for shard in shards for s in shard] + eval_samples:
        if sample.size != data.volume_size:
            raise VolumeFormatError(
                f"Dataset has volumes of size {sample.size}, config has {data.volume_size}"
            )
    log.info(
        f"Read {sum(len(s) for s in shards)} training and {len(eval_samples)} held-out volumes from {directory}"
    )
    return Datasets(
        shards=shards, eval_samples=eval_samples, num_classes=data.num_classes
    )


def load_datasets(config: ExperimentConfig) -> Datasets:
    if config.data.directory:
        return read_datasets(config, config.data.directory)
    return generate_datasets(config)


def _fmt(value: float | int | None) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


class CsvWriter:
    """Writes rows to a CSV file, flushing after every row so an interrupted run leaves
    a parseable prefix."""

    def __init__(self, path: Path, header: list[str]) -> None:
        self.path = path
        self.header = header
        self._file = None
        self._writer = None

    def __enter__(self) -> "CsvWriter":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._file, lineterminator="\n")
        self.write(self.header)
        return self

    def __exit__(
        self,
        type_: type[BaseException] | None,
        value: BaseException | None,
        traceback: TracebackType | None,
    ) -> bool | None:
        self._file.close()

    def write(self, row: list) -> None:
        if len(row) != len(self.header):
            raise ValueError(
                f"Row has {len(row)} fields, header has {len(self.header)}"
            )
        self._writer.writerow(row)
        self._file.flush()


def metrics_header(num_classes: int) -> list[str]:
    return (
        ["round", "client_id", "loss_ce", "loss_dice"]
        + [f"dice_c{c}" for c in range(1, num_classes)]
        + ["dice_mean"]
    )


def _weighted_mean(values: list[float], weights: list[int]) -> float:
    total = sum(weights)
    return sum(v * w for v, w in zip(values, weights)) / total


def metrics_rows(round_log: RoundLog, num_classes: int) -> list[list[str]]:
    """One row per client, then the global row with client_id -1 carrying
    sample-weighted losses and Dice."""
    empty = [""] * num_classes
    rows = []
    for client in round_log.clients:
        ids = [_fmt(round_log.round), _fmt(client.client_id)]
        rows.append(ids + [_fmt(client.loss_ce), _fmt(client.loss_dice)] + empty)
    weights = [c.sample_count for c in round_log.clients]
    loss_ce = _weighted_mean([c.loss_ce for c in round_log.clients], weights)
    loss_dice = _weighted_mean([c.loss_dice for c in round_log.clients], weights)
    dice = [_fmt(d) for d in round_log.dice] or [""] * (num_classes - 1)
    dice_mean = _fmt(float(np.mean(round_log.dice))) if round_log.dice else ""
    rows.append(
        [_fmt(round_log.round), _fmt(GLOBAL_CLIENT_ID), _fmt(loss_ce), _fmt(loss_dice)]
        + dice
        + [dice_mean]
    )
    return rows


class LossCurve:
    """Tracks combined training loss per client and for the federation, normalized by
    the round 1 value."""

    HEADER = ["round", "client_id", "loss", "normalized_loss"]

    def __init__(self, loss_weights: tuple[float, float]) -> None:
        self.loss_weights = loss_weights
        self.reference = {}

    def rows(self, round_log: RoundLog) -> list[list[str]]:
        w_ce, w_dice = self.loss_weights
        losses = {
            c.client_id: w_ce * c.loss_ce + w_dice * c.loss_dice
            for c in round_log.clients
        }
        weights = [c.sample_count for c in round_log.clients]
        losses[GLOBAL_CLIENT_ID] = _weighted_mean(
            [losses[c.client_id] for c in round_log.clients], weights
        )
        rows = []
        for client_id, loss in losses.items():
            reference = self.reference.setdefault(client_id, loss)
            normalized = loss / reference if reference else float("nan")
            rows.append(
                [_fmt(round_log.round), _fmt(client_id), _fmt(loss), _fmt(normalized)]
            )
        return rows


@dataclass
class TrainResult:
    history: list[RoundLog]
    network: Network
    output_directory: Path
    shard_hash: str

    @property
    def final_dice(self) -> list[float]:
        return self.history[-1].dice if self.history else []

    @property
    def final_dice_mean(self) -> float:
        return float(np.mean(self.final_dice)) if self.final_dice else float("nan")


def run_train(
    config: ExperimentConfig,
    resume: bool = False,
    concurrency: int | None = None,
    max_rounds: int | None = None,
    datasets: Datasets | None = None,
    transport_scope: str | None = None,
) -> TrainResult:
    """Runs one federated training experiment, writing metrics.csv, loss_curve.csv,
    config.yaml and model.npz to the output directory. With resume the run continues
    from checkpoint.npz and the CSV files are rewritten from the checkpointed rounds
    before new rows are appended."""
    output_directory = Path(config.output_directory)
    output_directory.mkdir(parents=True, exist_ok=True)
    write_config(config, output_directory)
    if datasets is None:
        datasets = load_datasets(config)
    shard_hash = datasets.digest
    num_classes = config.data.num_classes
    checkpoint_path = output_directory / CHECKPOINT_FILENAME
    federation = Federation(
        config.fed_config(),
        config.network_config(),
        datasets.shards,
        config.seed,
        transport=load_transport(scope=transport_scope),
        evaluator=make_evaluator(datasets.eval_samples, num_classes),
        concurrency=concurrency or get_concurrency(),
    )
    if resume:
        if not checkpoint_path.is_file():
            raise FederationError(
                f"Cannot resume, no checkpoint found at: {checkpoint_path}"
            )
        federation.load_checkpoint(checkpoint_path)
    log.info(
        f"Training {config.data.num_clients} clients for {config.federation.rounds} rounds, seed {config.seed}, "
        f"output to: {output_directory}"
    )
    loss_curve = LossCurve(config.federation.loss_weights)
    with (
        CsvWriter(
            output_directory / METRICS_FILENAME, metrics_header(num_classes)
        ) as metrics,
        CsvWriter(output_directory / LOSS_CURVE_FILENAME, LossCurve.HEADER) as curve,
    ):

        def _write_round(round_log: RoundLog) -> None:
            for row in metrics_rows(round_log, num_classes):
                metrics.write(row)
            for row in loss_curve.rows(round_log):
                curve.write(row)

        for round_log in federation.history:
            _write_round(round_log)
        with federation:
            history = federation.run(
                on_round=_write_round,
                checkpoint_path=checkpoint_path,
                max_rounds=max_rounds,
            )
    save_model(output_directory / MODEL_FILENAME, federation.net)
    return TrainResult(
        history=history,
        network=federation.net,
        output_directory=output_directory,
        shard_hash=shard_hash,
    )


def evaluate_model(model_path: Path | str, dataset_path: Path | str) -> dict:
    """Eval-mode per-class Dice of a saved model on a directory of volume files."""
    if isinstance(dataset_path, str):
        dataset_path = Path(dataset_path)
    net = load_model(model_path)
    samples, num_classes = read_shard(dataset_path)
    if not samples:
        raise VolumeFormatError(f"No volume files found in {dataset_path}")
    model_classes = net.config.num_classes
    if num_classes != model_classes:
        raise ModelFormatError(
            f"Model predicts K={model_classes} classes but the dataset declares K={num_classes}"
        )
    dice = make_evaluator(samples, num_classes)(net)
    return {
        "model": str(model_path),
        "dataset": str(dataset_path),
        "num_classes": num_classes,
        "samples": len(samples),
        "dice": {f"c{c}": d for c, d in enumerate(dice, start=1)},
        "dice_mean": float(np.mean(dice)),
    }


def format_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def run_eval(
    model_path: Path | str,
    dataset_path: Path | str,
    output_directory: Path | str | None = None,
) -> str:
    """Returns the JSON report and writes it to <output_directory>/eval_report.json, the
    configured output directory unless one is given."""
    text = format_report(evaluate_model(model_path, dataset_path))
    if output_directory is None:
        output_directory = build_config().output_directory
    output_directory = Path(output_directory)
    output_directory.mkdir(parents=True, exist_ok=True)
    (output_directory / EVAL_REPORT_FILENAME).write_text(text, encoding="utf-8")
    log.info(f"Wrote eval report to: {output_directory / EVAL_REPORT_FILENAME}")
    return text


def dataset_directory(config: ExperimentConfig) -> Path:
    if config.data.directory:
        return Path(config.data.directory)
    return Path(config.output_directory) / DATA_DIRECTORY


def gen_data(config: ExperimentConfig) -> tuple[Path, str]:
    """Writes client_<id>/sample_<k>.fvx and eval/sample_<k>.fvx, returns the directory
    and the shard hash."""
    directory = dataset_directory(config)
    datasets = generate_datasets(config)
    for client_id, shard in enumerate(datasets.shards):
        write_shard(client_directory(directory, client_id), shard, datasets.num_classes)
    write_shard(directory / EVAL_DIRECTORY, datasets.eval_samples, datasets.num_classes)
    write_config(config, config.output_directory)
    log.info(
        f"Wrote {config.data.num_clients} client shards and a held-out shard to: {directory}"
    )
    return directory, datasets.digest


def _seeds(config: ExperimentConfig) -> list[int]:
    return [config.seed + offset for offset in range(config.ablation.seeds)]


def _run_grid(
    configs: dict[str, ExperimentConfig], root: Path, seeds: list[int], concurrency: int
) -> dict[tuple[str, int], TrainResult]:
    """Trains every (name, seed) pair into <root>/<name>/seed_<s>/, pairs run in
    parallel on a thread pool."""
    datasets = {}
    for seed in seeds:
        base = next(iter(configs.values())).with_seed(seed)
        datasets[seed] = load_datasets(base)
    tasks = [(name, seed) for name in configs for seed in seeds]

    def _run(task: tuple[str, int]) -> TrainResult:
        name, seed = task
        scope = f"{name}/seed_{seed}"
        config = configs[name].with_seed(seed)
        config = replace(config, output_directory=str(root / scope))
        log.info(f"Running {scope}")
        return run_train(
            config, concurrency=1, datasets=datasets[seed], transport_scope=scope
        )

    with ThreadPoolExecutor(max_workers=concurrency) as executor:
        results = list(executor.map(_run, tasks))
    return dict(zip(tasks, results))


def _summary(values: list[float]) -> tuple[float, float]:
    return float(np.mean(values)), float(np.std(values))


def _combined_hash(hashes: list[str]) -> str:
    return hashlib.sha256("".join(hashes).encode("ascii")).hexdigest()


def run_ablate(config: ExperimentConfig, concurrency: int | None = None) -> Path:
    """Trains the five ablation variants over the configured seeds on shared shards and
    writes ablation_table.csv (one row per variant) and ablation_runs.csv (one row
    per run)."""
    root = Path(config.output_directory)
    root.mkdir(parents=True, exist_ok=True)
    write_config(config, root)
    seeds = _seeds(config)
    configs = {
        name: config.with_ablation(**flags) for name, flags in ABLATION_VARIANTS.items()
    }
    results = _run_grid(
        configs, root / "ablation", seeds, concurrency or get_concurrency()
    )
    num_classes = config.data.num_classes
    table_path = root / ABLATION_TABLE_FILENAME
    header = (
        ["variant"]
        + [f"dice_seed_{s}" for s in seeds]
        + ["mean", "std", "shard_hash", "wins_vs_none"]
    )
    with CsvWriter(table_path, header) as table:
        for name in configs:
            scores = [results[(name, s)].final_dice_mean for s in seeds]
            baseline = [results[("none", s)].final_dice_mean for s in seeds]
            wins = sum(score > base for score, base in zip(scores, baseline))
            mean, std = _summary(scores)
            shard_hash = _combined_hash([results[(name, s)].shard_hash for s in seeds])
            table.write(
                [name]
                + [_fmt(v) for v in scores]
                + [_fmt(mean), _fmt(std), shard_hash, _fmt(wins)]
            )
    runs_header = (
        ["variant", "seed", "shard_hash"]
        + [f"dice_c{c}" for c in range(1, num_classes)]
        + ["dice_mean"]
    )
    with CsvWriter(root / ABLATION_RUNS_FILENAME, runs_header) as runs:
        for (name, seed), result in results.items():
            runs.write(
                [name, _fmt(seed), result.shard_hash]
                + [_fmt(d) for d in result.final_dice]
                + [_fmt(result.final_dice_mean)]
            )
    log.info(f"Wrote ablation table to: {table_path}")
    return table_path


def layer_placements(levels: int) -> dict[str, tuple[int, ...]]:
    placements = {f"level_{level}": (level,) for level in range(levels)}
    placements["all"] = tuple(range(levels))
    return placements


def sweep_layers(config: ExperimentConfig, concurrency: int | None = None) -> Path:
    """Trains VFDA at every single encoder level and at all of them: layer_sweep.csv."""
    root = Path(config.output_directory)
    root.mkdir(parents=True, exist_ok=True)
    write_config(config, root)
    seeds = _seeds(config)
    base = config.with_ablation()
    placements = layer_placements(config.network_config().levels)
    configs = {
        name: base.with_vfda_levels(levels) for name, levels in placements.items()
    }
    results = _run_grid(
        configs, root / "sweep", seeds, concurrency or get_concurrency()
    )
    sweep_path = root / LAYER_SWEEP_FILENAME
    header = ["placement"] + [f"dice_seed_{s}" for s in seeds] + ["mean", "std"]
    with CsvWriter(sweep_path, header) as sweep:
        for name in configs:
            scores = [results[(name, s)].final_dice_mean for s in seeds]
            mean, std = _summary(scores)
            sweep.write([name] + [_fmt(v) for v in scores] + [_fmt(mean), _fmt(std)])
    log.info(f"Wrote layer sweep to: {sweep_path}")
    return sweep_path
