"""
Vicinal feature-level data augmentation.

Intermediate encoder features are summarised by per-sample channel statistics (mean and
standard deviation). Each statistic is treated as the centre of a Gaussian whose
variance is the product of the local (within batch) variance of that statistic and the
global (across clients) variance of momentum-accumulated statistics shared by the
server. Training features are renormalized with statistics sampled from those Gaussians.
"""

import math
from logging import getLogger
from dataclasses import dataclass, field
import numpy as np
from .autograd import GradCache, DTYPE, check_rank, check_cache
from .errors import ShapeError


log = getLogger("main")


EPS_VAR = 1e-5
ETA_MAX = 0.99
TRAIN = "train"
EVAL = "eval"
MODES = (TRAIN, EVAL)


@dataclass
class ChannelStats:
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.mu.shape[0]

    @property
    def channels(self) -> int:
        return self.mu.shape[1]


@dataclass
class PrototypeVariance:
    var_mu: np.ndarray
    var_sigma: np.ndarray

    @classmethod
    def zeros(cls, channels: int) -> "PrototypeVariance":
        return cls(np.zeros(channels, dtype=DTYPE), np.zeros(channels, dtype=DTYPE))

    @classmethod
    def ones(cls, channels: int) -> "PrototypeVariance":
        return cls(np.ones(channels, dtype=DTYPE), np.ones(channels, dtype=DTYPE))

    @property
    def channels(self) -> int:
        return self.var_mu.shape[0]


@dataclass
class MomentumStats:
    mu_bar: np.ndarray
    sigma_bar: np.ndarray
    initialized: bool = False
    round_of_last_update: int = 0

    @classmethod
    def empty(cls, channels: int) -> "MomentumStats":
        return cls(np.zeros(channels, dtype=DTYPE), np.zeros(channels, dtype=DTYPE))

    @property
    def channels(self) -> int:
        return self.mu_bar.shape[0]


@dataclass
class VfdaLayerState:
    momentum: MomentumStats
    global_variance: PrototypeVariance
    enabled: bool = True
    mode: str = TRAIN


def _broadcast(values: np.ndarray) -> np.ndarray:
    return values[:, :, None, None, None]


def _check_channels(what: str, expected: int, found: int) -> None:
    if expected != found:
        raise ShapeError(f"{what}: channel count {found} does not match {expected}")


def channel_stats(z: np.ndarray, eps_var: float = EPS_VAR) -> ChannelStats:
    """Per sample and channel spatial mean and stabilized population std."""
    check_rank("feature map", z, 5)
    if z.shape[2] * z.shape[3] * z.shape[4] < 1:
        raise ShapeError(f"Feature map shape {z.shape} has an empty spatial extent")
    mu = z.mean(axis=(2, 3, 4))
    var = ((z - _broadcast(mu)) ** 2).mean(axis=(2, 3, 4))
    return ChannelStats(mu=mu, sigma=np.sqrt(var + eps_var))


def local_stat_variance(stats: ChannelStats) -> PrototypeVariance:
    """Population variance of the channel statistics over the batch axis."""
    var_mu = ((stats.mu - stats.mu.mean(axis=0)) ** 2).mean(axis=0)
    var_sigma = ((stats.sigma - stats.sigma.mean(axis=0)) ** 2).mean(axis=0)
    return PrototypeVariance(var_mu=var_mu, var_sigma=var_sigma)


def emd_factor(round_: int, eta0: float) -> float:
    """Exponentially decaying momentum factor, clamped to keep a convex combination."""
    if round_ < 0:
        raise ValueError(f"Round must be >= 0, got {round_}")
    if eta0 <= 0:
        raise ValueError(f"eta0 must be > 0, got {eta0}")
    return min(eta0 * math.exp(-round_), ETA_MAX)


def emd_update(
    state: MomentumStats,
    stats: ChannelStats,
    round_: int,
    eta0: float,
    eta: float | None = None,
) -> MomentumStats:
    """Folds the batch-averaged statistics into the momentum statistics. The first
    update bootstraps directly from the batch. Passing eta overrides the decay schedule
    (eta=0 keeps the last batch only)."""
    _check_channels("momentum update", state.channels, stats.channels)
    batch_mu = stats.mu.mean(axis=0)
    batch_sigma = stats.sigma.mean(axis=0)
    if not state.initialized:
        return MomentumStats(
            mu_bar=batch_mu,
            sigma_bar=batch_sigma,
            initialized=True,
            round_of_last_update=round_,
        )
    if eta is None:
        eta = emd_factor(round_, eta0)
    return MomentumStats(
        mu_bar=(1.0 - eta) * batch_mu + eta * state.mu_bar,
        sigma_bar=(1.0 - eta) * batch_sigma + eta * state.sigma_bar,
        initialized=True,
        round_of_last_update=round_,
    )


def combine_variance(
    local: PrototypeVariance, global_: PrototypeVariance
) -> PrototypeVariance:
    """Weights the client's own statistic variances by the shared global variances."""
    _check_channels("variance weighting", local.channels, global_.channels)
    return PrototypeVariance(
        var_mu=local.var_mu * global_.var_mu,
        var_sigma=local.var_sigma * global_.var_sigma,
    )


def sample_statistics(
    stats: ChannelStats,
    combined: PrototypeVariance,
    rng: np.random.Generator,
    eps_var: float = EPS_VAR,
) -> tuple[np.ndarray, np.ndarray]:
    """Draws novel statistics with the reparameterization mu + eps * sqrt(var). Sampled
    standard deviations are floored at sqrt(eps_var)."""
    _check_channels("statistic sampling", stats.channels, combined.channels)
    eps_mu = rng.standard_normal(stats.mu.shape)
    eps_sigma = rng.standard_normal(stats.sigma.shape)
    mu_hat = stats.mu + eps_mu * np.sqrt(combined.var_mu)
    sigma_hat = np.maximum(
        stats.sigma + eps_sigma * np.sqrt(combined.var_sigma), math.sqrt(eps_var)
    )
    return mu_hat, sigma_hat


def vfda_forward(
    z: np.ndarray,
    mu_hat: np.ndarray,
    sigma_hat: np.ndarray,
    stats: ChannelStats,
    eps_var: float = EPS_VAR,
) -> tuple[np.ndarray, GradCache]:
    """Renormalizes each (batch, channel) slice of z from its own statistics to
    (mu_hat, sigma_hat). Slices whose targets equal their statistics pass through."""
    check_rank("feature map", z, 5)
    if mu_hat.shape != stats.mu.shape or sigma_hat.shape != stats.sigma.shape:
        raise ShapeError(
            f"Sampled statistics shapes {mu_hat.shape}, {sigma_hat.shape} do not match {stats.mu.shape}"
        )
    x_hat = (z - _broadcast(stats.mu)) / _broadcast(stats.sigma)
    passthrough = (mu_hat == stats.mu) & (sigma_hat == stats.sigma)
    z_hat = np.where(
        _broadcast(passthrough), z, _broadcast(sigma_hat) * x_hat + _broadcast(mu_hat)
    )
    cache = GradCache(
        op="vfda",
        tensors={
            "x_hat": x_hat,
            "sigma": stats.sigma,
            "sigma_hat": sigma_hat,
            "passthrough": passthrough,
            # a floored sample no longer moves with sigma(z)
            "floored": sigma_hat <= math.sqrt(eps_var),
        },
        meta={"output_shape": z_hat.shape},
    )
    return z_hat, cache


def vfda_backward(grad_z_hat: np.ndarray, cache: GradCache) -> np.ndarray:
    """Gradient of vfda_forward with respect to z. The sampled offsets (mu_hat - mu,
    sigma_hat - sigma) are constants, mu(z) and sigma(z) are differentiated through."""
    check_cache(cache, "vfda", grad_z_hat)
    g = grad_z_hat
    x_hat = cache.tensors["x_hat"]
    sigma = _broadcast(cache.tensors["sigma"])
    sigma_hat = _broadcast(cache.tensors["sigma_hat"])
    tracks_sigma = _broadcast(~cache.tensors["floored"]).astype(DTYPE)
    axes = (2, 3, 4)
    n = x_hat.shape[2] * x_hat.shape[3] * x_hat.shape[4]
    grad_x_hat = g * sigma_hat
    grad_normalization = (
        grad_x_hat
        - grad_x_hat.mean(axis=axes, keepdims=True)
        - x_hat * (grad_x_hat * x_hat).mean(axis=axes, keepdims=True)
    ) / sigma
    # d sigma / d z_i = x_hat_i / n and d mu / d z_i = 1 / n
    grad_sigma = (g * x_hat).sum(axis=axes, keepdims=True)
    grad_sigma_path = tracks_sigma * grad_sigma * x_hat / n
    grad_mu_path = g.sum(axis=axes, keepdims=True) / n
    grad_z = grad_normalization + grad_sigma_path + grad_mu_path
    return np.where(_broadcast(cache.tensors["passthrough"]), g, grad_z)


def mixup(
    x1: np.ndarray,
    y1: np.ndarray,
    x2: np.ndarray,
    y2: np.ndarray,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Convex combination of two inputs and of their one-hot (or soft) labels."""
    if x1.shape != x2.shape:
        raise ShapeError(f"Cannot mix inputs of shapes {x1.shape} and {x2.shape}")
    if y1.shape != y2.shape:
        raise ShapeError(f"Cannot mix labels of shapes {y1.shape} and {y2.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"MixUp lambda must be in [0, 1], got {lam}")
    if lam == 1.0:
        return x1.copy(), y1.copy()
    if lam == 0.0:
        return x2.copy(), y2.copy()
    return lam * x1 + (1.0 - lam) * x2, lam * y1 + (1.0 - lam) * y2


def mixup_batch(
    x: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    alpha: float = 0.2,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Mixes a batch with a shuffled copy of itself, lambda ~ Beta(alpha, alpha)."""
    lam = float(rng.beta(alpha, alpha))
    order = rng.permutation(x.shape[0])
    x_mix, y_mix = mixup(x, y, x[order], y[order], lam)
    return x_mix, y_mix, lam


@dataclass
class VfdaLayer:
    """VFDA state and behaviour for one encoder level, owned by exactly one client."""

    channels: int
    enabled: bool = True
    probability: float = 1.0
    eps_var: float = EPS_VAR
    eta0: float = 10.0
    use_emd: bool = True
    use_global_variance: bool = True
    round: int = 0
    state: VfdaLayerState = field(init=False)

    def __post_init__(self) -> None:
        self.state = VfdaLayerState(
            momentum=MomentumStats.empty(self.channels),
            global_variance=PrototypeVariance.zeros(self.channels),
            enabled=self.enabled,
        )

    def begin_round(self, round_: int, global_variance: PrototypeVariance) -> None:
        _check_channels("global variance", self.channels, global_variance.channels)
        self.round = round_
        self.state.global_variance = global_variance

    def set_mode(self, mode: str) -> None:
        if mode not in MODES:
            raise ValueError(f'Unknown mode "{mode}", expected one of {MODES}')
        self.state.mode = mode

    def global_factor(self) -> PrototypeVariance:
        if self.use_global_variance:
            return self.state.global_variance
        return PrototypeVariance.ones(self.channels)

    def forward(
        self, z: np.ndarray, rng: np.random.Generator | None
    ) -> tuple[np.ndarray, GradCache | None]:
        if self.state.mode == EVAL or not self.state.enabled:
            return z, None
        _check_channels("vfda layer input", self.channels, z.shape[1])
        stats = channel_stats(z, self.eps_var)
        self.state.momentum = emd_update(
            self.state.momentum,
            stats,
            self.round,
            self.eta0,
            eta=None if self.use_emd else 0.0,
        )
        if self.probability < 1.0 and rng.random() >= self.probability:
            return z, None
        combined = combine_variance(local_stat_variance(stats), self.global_factor())
        mu_hat, sigma_hat = sample_statistics(stats, combined, rng, self.eps_var)
        return vfda_forward(z, mu_hat, sigma_hat, stats, self.eps_var)

    def backward(self, grad: np.ndarray, cache: GradCache | None) -> np.ndarray:
        if cache is None:
            return grad
        return vfda_backward(grad, cache)
