import json
import time
from logging import getLogger
from pathlib import Path
from types import TracebackType
from dataclasses import dataclass, field, asdict
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
import numpy as np
from .autograd import DTYPE
from .vfda import PrototypeVariance, MomentumStats, mixup_batch
from .segnet import NetworkConfig, Network, Batch, build_network, to_targets, train_step
from .synthdata import VolumeSample, random_flip
from .messages import (
    ClientUpdate,
    GlobalBroadcast,
    serialize_update,
    deserialize_update,
    serialize_broadcast,
    deserialize_broadcast,
)
from .transport import TransportBackendBase, load_transport
from .streams import get_stream, get_generator_state, set_generator_state
from .errors import FedVfdaError, FederationError, ShapeError


log = getLogger("main")


CHECKPOINT_VERSION = 2


@dataclass
class FedConfig:
    num_clients: int = 4
    rounds: int = 20
    local_epochs: int = 1
    batch_size: int = 2
    lr0: float = 5e-4
    lr_power: float = 0.9
    eta0: float = 10.0
    loss_weights: tuple[float, float] = (1.0, 1.0)
    # augmentation
    vfda_levels: tuple[int, ...] | None = None
    vfda_probability: float = 1.0
    mixup_alpha: float = 0.2
    random_flip: bool = True
    # ablations
    no_emd: bool = False
    no_global_variance: bool = False
    no_vfda: bool = False
    mixup_baseline: bool = False

    @property
    def vfda_active(self) -> bool:
        return not (self.no_vfda or self.mixup_baseline)

    def validate(self) -> None:
        if self.num_clients < 1:
            raise FederationError(
                f"Number of clients must be >= 1, got {self.num_clients}"
            )
        if self.rounds < 1:
            raise FederationError(f"Number of rounds must be >= 1, got {self.rounds}")
        if self.local_epochs < 0:
            raise FederationError(f"Local epochs must be >= 0, got {self.local_epochs}")
        if self.batch_size < 1:
            raise FederationError(f"Batch size must be >= 1, got {self.batch_size}")
        if self.eta0 <= 0:
            raise FederationError(f"eta0 must be > 0, got {self.eta0}")
        if self.lr0 < 0:
            raise FederationError(f"lr0 must be >= 0, got {self.lr0}")
        if self.no_vfda and self.mixup_baseline:
            raise FederationError(
                "Only one of no_vfda and mixup_baseline may replace VFDA"
            )


@dataclass
class ClientRoundResult:
    client_id: int
    sample_count: int
    loss_ce: float
    loss_dice: float
    steps: int


@dataclass
class RoundLog:
    round: int
    clients: list[ClientRoundResult]
    # global Dice on the held-out set for classes 1..K-1
    dice: list[float] = field(default_factory=list)
    wall_time_ms: float = 0.0

    @classmethod
    def from_dict(cls, data: dict) -> "RoundLog":
        return cls(
            round=data["round"],
            clients=[ClientRoundResult(**c) for c in data["clients"]],
            dice=list(data["dice"]),
            wall_time_ms=data["wall_time_ms"],
        )


def learning_rate(lr0: float, round_: int, rounds: int, power: float = 0.9) -> float:
    """Polynomial decay applied per round, lr0 in round 1."""
    return lr0 * (1.0 - (round_ - 1) / rounds) ** power


def aggregate_weights(updates: Sequence[ClientUpdate]) -> np.ndarray:
    """FedAvg: the sample-count weighted mean of the client parameter vectors, reduced
    in ascending client id order so the result does not depend on completion order."""
    if not updates:
        raise FederationError("Cannot aggregate an empty set of client updates")
    updates = sorted(updates, key=lambda u: u.client_id)
    length = updates[0].params.shape[0]
    for update in updates:
        if update.params.shape != (length,):
            raise FederationError(
                f"Client {update.client_id} sent {update.params.shape[0]} parameters, expected {length}"
            )
        if update.sample_count < 1:
            raise FederationError(
                f"Client {update.client_id} reported sample_count {update.sample_count}"
            )
    total = sum(u.sample_count for u in updates)
    aggregated = np.zeros(length, dtype=DTYPE)
    for update in updates:
        aggregated += (update.sample_count / total) * update.params
    return aggregated


def global_stat_variance(
    mu_bars: np.ndarray, sigma_bars: np.ndarray
) -> PrototypeVariance:
    """Per-channel population variance of the clients' accumulated statistics."""
    if mu_bars.ndim != 2 or mu_bars.shape != sigma_bars.shape:
        raise ShapeError(
            f"Statistic matrices must share one N x C shape, got {mu_bars.shape} and {sigma_bars.shape}"
        )
    if mu_bars.shape[0] < 1:
        raise FederationError(
            "Cannot compute global statistic variances without clients"
        )
    return PrototypeVariance(
        var_mu=mu_bars.var(axis=0), var_sigma=sigma_bars.var(axis=0)
    )


def global_variances(updates: Sequence[ClientUpdate]) -> list[PrototypeVariance]:
    updates = sorted(updates, key=lambda u: u.client_id)
    levels = {len(u.stats) for u in updates}
    if len(levels) != 1:
        raise FederationError(
            f"Client updates disagree on the number of VFDA layers: {sorted(levels)}"
        )
    variances = []
    for level in range(levels.pop()):
        try:
            mu_bars = np.stack([u.stats[level][0] for u in updates])
            sigma_bars = np.stack([u.stats[level][1] for u in updates])
        except ValueError as e:
            raise ShapeError(
                f"Client statistics for layer {level} have mismatched channel counts: {e}"
            ) from e
        variances.append(global_stat_variance(mu_bars, sigma_bars))
    return variances


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    like = np.broadcast_to(
        np.zeros((), dtype=DTYPE), (labels.shape[0], num_classes) + labels.shape[1:]
    )
    return to_targets(labels, num_classes, like)


def checkpoint_config(config: FedConfig) -> dict:
    """The settings a resumed run shares with the checkpoint writer, as JSON values."""
    return json.loads(json.dumps(asdict(config)))


class Client:
    """One simulated institute owning its shard, model copy and random streams."""

    def __init__(
        self,
        client_id: int,
        shard: list[VolumeSample],
        network_config: NetworkConfig,
        config: FedConfig,
        seed: int,
    ) -> None:
        if not shard:
            raise FederationError(f"Client {client_id} has an empty data shard")
        self.client_id = client_id
        self.shard = shard
        self.config = config
        vfda_levels = config.vfda_levels if config.vfda_active else ()
        vfda_options = {
            "probability": config.vfda_probability,
            "eta0": config.eta0,
            "use_emd": not config.no_emd,
            "use_global_variance": not config.no_global_variance,
        }
        # parameters are replaced by every broadcast, the initial draw is never used
        self.net = build_network(
            network_config, get_stream(seed, "init"), vfda_levels, vfda_options
        )
        self.rng = get_stream(seed, "client", client_id)
        self.eps_rng = get_stream(seed, "eps", client_id)
        self.mixup_rng = get_stream(seed, "mixup", client_id)
        self.expected_round = 1

    @property
    def sample_count(self) -> int:
        return len(self.shard)

    def get_state(self) -> dict:
        return {
            "expected_round": self.expected_round,
            "rng": get_generator_state(self.rng),
            "eps_rng": get_generator_state(self.eps_rng),
            "mixup_rng": get_generator_state(self.mixup_rng),
            "momentum": [
                {"initialized": layer.state.momentum.initialized,
                 "round_of_last_update": layer.state.momentum.round_of_last_update}
                for layer in self.net.vfda_layers
            ],
        }

    def set_state(
        self, state: dict, momentum_arrays: list[tuple[np.ndarray, np.ndarray]]
    ) -> None:
        self.expected_round = state["expected_round"]
        set_generator_state(self.rng, state["rng"])
        set_generator_state(self.eps_rng, state["eps_rng"])
        set_generator_state(self.mixup_rng, state["mixup_rng"])
        for layer, meta, (mu_bar, sigma_bar) in zip(
            self.net.vfda_layers, state["momentum"], momentum_arrays
        ):
            layer.state.momentum = MomentumStats(
                mu_bar=mu_bar,
                sigma_bar=sigma_bar,
                initialized=meta["initialized"],
                round_of_last_update=meta["round_of_last_update"],
            )

    def batches(self) -> list[Batch]:
        config = self.config
        order = self.rng.permutation(self.sample_count)
        batches = []
        for start in range(0, self.sample_count, config.batch_size):
            samples = [self.shard[i] for i in order[start : start + config.batch_size]]
            if config.random_flip:
                samples = [random_flip(s, self.rng) for s in samples]
            volumes = np.concatenate([s.volume for s in samples])
            labels = np.stack([s.label for s in samples])
            if config.mixup_baseline:
                targets = _one_hot(labels, self.net.config.num_classes)
                volumes, labels, _ = mixup_batch(
                    volumes, targets, self.mixup_rng, config.mixup_alpha
                )
            batches.append(Batch(volumes=volumes, labels=labels))
        return batches

    def upload_stats(self) -> list[tuple[np.ndarray, np.ndarray]]:
        stats = []
        for layer in self.net.vfda_layers:
            if layer.state.enabled:
                stats.append(
                    (
                        layer.state.momentum.mu_bar.copy(),
                        layer.state.momentum.sigma_bar.copy(),
                    )
                )
            else:
                stats.append(
                    (
                        np.zeros(layer.channels, dtype=DTYPE),
                        np.zeros(layer.channels, dtype=DTYPE),
                    )
                )
        return stats


def client_local_round(
    client: Client, broadcast: GlobalBroadcast
) -> tuple[ClientUpdate, ClientRoundResult]:
    """Loads the broadcast model and variances, trains local_epochs passes over the
    shard and returns the update to upload along with the client's training losses."""
    if broadcast.round != client.expected_round:
        raise FederationError(
            f"Client {client.client_id} expected round {client.expected_round}, got a broadcast for {broadcast.round}"
        )
    net = client.net
    if len(broadcast.variances) != len(net.vfda_layers):
        raise ShapeError(
            f"Broadcast carries {len(broadcast.variances)} variance layers, network has {len(net.vfda_layers)}"
        )
    config = client.config
    net.unflatten(broadcast.params)
    for layer, variance in zip(net.vfda_layers, broadcast.variances):
        layer.begin_round(broadcast.round, variance)
    lr = learning_rate(config.lr0, broadcast.round, config.rounds, config.lr_power)
    ce_total = dice_total = 0.0
    steps = 0
    for epoch in range(config.local_epochs):
        for batch in client.batches():
            loss_ce, loss_dice = train_step(
                net, batch, lr, config.loss_weights, rng=client.eps_rng
            )
            ce_total += loss_ce
            dice_total += loss_dice
            steps += 1
    client.expected_round += 1
    result = ClientRoundResult(
        client_id=client.client_id,
        sample_count=client.sample_count,
        loss_ce=ce_total / steps if steps else float("nan"),
        loss_dice=dice_total / steps if steps else float("nan"),
        steps=steps,
    )
    log.debug(
        f"Client {client.client_id} round {broadcast.round}: {steps} steps at lr={lr:.3g}, "
        f"loss_ce={result.loss_ce:.6f} loss_dice={result.loss_dice:.6f}"
    )
    update = ClientUpdate(
        client_id=client.client_id,
        sample_count=client.sample_count,
        params=net.flatten(),
        stats=client.upload_stats(),
    )
    return update, result


class Federation:
    """Simulated federation: a server holding the global model and N clients, every
    message between them encoded and passed through a transport."""

    def __init__(
        self,
        config: FedConfig,
        network_config: NetworkConfig,
        datasets: Sequence[list[VolumeSample]],
        seed: int,
        transport: TransportBackendBase | None = None,
        evaluator: Callable[[Network], list[float]] | None = None,
        concurrency: int = 1,
    ) -> None:
        config.validate()
        if len(datasets) != config.num_clients:
            raise FederationError(
                f"Got {len(datasets)} data shards for {config.num_clients} clients"
            )
        if concurrency < 1:
            raise FederationError(f"Concurrency must be >= 1, got {concurrency}")
        self.config = config
        self.network_config = network_config
        self.seed = seed
        self.transport = transport if transport is not None else load_transport()
        self.evaluator = evaluator
        self.concurrency = concurrency
        self.net = build_network(network_config, get_stream(seed, "init"), ())
        self.params = self.net.flatten()
        self.variances = [
            PrototypeVariance.zeros(c) for c in network_config.encoder_channels
        ]
        self.clients = [
            Client(client_id, shard, network_config, config, seed)
            for client_id, shard in enumerate(datasets)
        ]
        self.history: list[RoundLog] = []

    def __enter__(self) -> "Federation":
        self.transport.open()
        return self

    def __exit__(
        self,
        type_: type[BaseException] | None,
        value: BaseException | None,
        traceback: TracebackType | None,
    ) -> bool | None:
        self.transport.close()

    @property
    def completed_rounds(self) -> int:
        return len(self.history)

    def _client_round(self, client: Client, round_: int) -> ClientRoundResult:
        try:
            broadcast = deserialize_broadcast(self.transport.receive_broadcast(round_))
            update, result = client_local_round(client, broadcast)
            self.transport.send_update(
                round_, client.client_id, serialize_update(update)
            )
        except (FedVfdaError, ValueError) as e:
            log.error(f"Client {client.client_id} failed in round {round_}: {e}")
            raise FederationError(
                f"Round {round_} aborted, client {client.client_id} failed: {e}"
            ) from e
        return result

    def run_round(self) -> RoundLog:
        round_ = self.completed_rounds + 1
        started = time.perf_counter()
        broadcast = GlobalBroadcast(
            round=round_, params=self.params, variances=self.variances
        )
        self.transport.send_broadcast(round_, serialize_broadcast(broadcast))
        with ThreadPoolExecutor(max_workers=self.concurrency) as executor:
            results = list(
                executor.map(lambda c: self._client_round(c, round_), self.clients)
            )
        updates = [
            deserialize_update(data) for data in self.transport.collect_updates(round_)
        ]
        received = sorted(u.client_id for u in updates)
        if received != [c.client_id for c in self.clients]:
            raise FederationError(
                f"Round {round_} collected updates from clients {received}"
            )
        self.params = aggregate_weights(updates)
        self.variances = global_variances(updates)
        self.net.unflatten(self.params)
        dice = list(self.evaluator(self.net)) if self.evaluator else []
        round_log = RoundLog(
            round=round_,
            clients=sorted(results, key=lambda r: r.client_id),
            dice=dice,
            wall_time_ms=(time.perf_counter() - started) * 1000.0,
        )
        self.history.append(round_log)
        log.info(
            f"Completed round {round_}/{self.config.rounds} in {round_log.wall_time_ms:.0f}ms, dice={dice}"
        )
        return round_log

    def run(
        self,
        on_round: Callable[[RoundLog], None] | None = None,
        checkpoint_path: Path | None = None,
        max_rounds: int | None = None,
    ) -> list[RoundLog]:
        """Runs the remaining rounds, or at most max_rounds of them. Calls on_round
        after every round, before the checkpoint for that round is written."""
        remaining = self.config.rounds - self.completed_rounds
        if max_rounds is not None:
            remaining = min(remaining, max_rounds)
        for _ in range(remaining):
            round_log = self.run_round()
            if on_round:
                on_round(round_log)
            if checkpoint_path:
                self.save_checkpoint(checkpoint_path)
        return self.history

    def save_checkpoint(self, path: Path | str) -> None:
        if isinstance(path, str):
            path = Path(path)
        arrays = {"params": self.params}
        for level, variance in enumerate(self.variances):
            arrays[f"var_mu_{level}"] = variance.var_mu
            arrays[f"var_sigma_{level}"] = variance.var_sigma
        for client in self.clients:
            for level, layer in enumerate(client.net.vfda_layers):
                prefix = f"client_{client.client_id}"
                arrays[f"{prefix}_mu_bar_{level}"] = layer.state.momentum.mu_bar
                arrays[f"{prefix}_sigma_bar_{level}"] = layer.state.momentum.sigma_bar
        meta = {
            "version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "config": checkpoint_config(self.config),
            "history": [asdict(round_log) for round_log in self.history],
            "clients": [client.get_state() for client in self.clients],
        }
        arrays["meta"] = np.array(json.dumps(meta))
        partial = path.with_suffix(".part")
        with open(partial, "wb") as f:
            np.savez(f, **arrays)
        partial.replace(path)
        log.debug(f"Saved checkpoint after round {self.completed_rounds} to: {path}")

    def load_checkpoint(self, path: Path | str) -> None:
        if isinstance(path, str):
            path = Path(path)
        try:
            with np.load(path, allow_pickle=False) as data:
                arrays = {name: np.array(data[name]) for name in data.files}
            meta = json.loads(str(arrays.pop("meta")))
        except (OSError, KeyError, ValueError) as e:
            raise FederationError(f"Failed to load checkpoint {path}: {e}") from e
        if meta.get("version") != CHECKPOINT_VERSION:
            raise FederationError(
                f"Checkpoint {path} has version {meta.get('version')}, expected {CHECKPOINT_VERSION}"
            )
        if meta["seed"] != self.seed or len(meta["clients"]) != len(self.clients):
            raise FederationError(
                f"Checkpoint {path} was written by a different experiment"
            )
        expected = checkpoint_config(self.config)
        stored = meta.get("config") or {}
        changed = sorted(key for key in expected if stored.get(key) != expected[key])
        if changed:
            raise FederationError(
                f"Checkpoint {path} was written with different settings: {', '.join(changed)}"
            )
        levels = len(self.variances)
        try:
            params = arrays["params"]
            if params.shape != self.params.shape:
                raise FederationError(
                    f"Checkpoint {path} has {params.shape[0]} parameters, expected {self.params.shape[0]}"
                )
            self.params = params
            self.variances = [
                PrototypeVariance(
                    var_mu=arrays[f"var_mu_{level}"],
                    var_sigma=arrays[f"var_sigma_{level}"],
                )
                for level in range(levels)
            ]
            for client, state in zip(self.clients, meta["clients"]):
                momentum = [
                    (arrays[f"client_{client.client_id}_mu_bar_{level}"],
                     arrays[f"client_{client.client_id}_sigma_bar_{level}"])
                    for level in range(levels)
                ]
                client.set_state(state, momentum)
        except KeyError as e:
            raise FederationError(f"Checkpoint {path} is missing array {e}") from e
        self.history = [RoundLog.from_dict(r) for r in meta["history"]]
        self.net.unflatten(self.params)
        log.info(f"Resumed from checkpoint {path} after round {self.completed_rounds}")


def run_federation(
    config: FedConfig,
    network_config: NetworkConfig,
    datasets: Sequence[list[VolumeSample]],
    seed: int,
    evaluator: Callable[[Network], list[float]] | None = None,
    transport: TransportBackendBase | None = None,
    concurrency: int = 1,
    on_round: Callable[[RoundLog], None] | None = None,
    checkpoint_path: Path | None = None,
    resume: bool = False,
    max_rounds: int | None = None,
) -> tuple[list[RoundLog], Network]:
    """Runs broadcast, local training and aggregation for every round. Returns the round
    logs, including any restored from a checkpoint, and the final global network."""
    federation = Federation(
        config,
        network_config,
        datasets,
        seed,
        transport=transport,
        evaluator=evaluator,
        concurrency=concurrency,
    )
    if resume:
        if checkpoint_path is None or not Path(checkpoint_path).is_file():
            raise FederationError(
                f"Cannot resume, no checkpoint found at: {checkpoint_path}"
            )
        federation.load_checkpoint(checkpoint_path)
    with federation:
        history = federation.run(
            on_round=on_round, checkpoint_path=checkpoint_path, max_rounds=max_rounds
        )
    return history, federation.net
