from logging import getLogger
from pathlib import Path
from dataclasses import dataclass, field
from collections.abc import Sequence
import numpy as np
from .autograd import (
    DTYPE,
    GradCache,
    conv3d_forward,
    conv3d_backward,
    relu,
    relu_backward,
    upsample_nearest,
    upsample_nearest_backward,
    concat_channels,
    concat_channels_backward,
    sgd_step,
)
from .vfda import VfdaLayer, TRAIN, EVAL, MODES
from .errors import ConfigError, ShapeError, ModelFormatError


log = getLogger("main")


DICE_SMOOTH = 1.0


@dataclass
class NetworkConfig:
    in_channels: int = 1
    num_classes: int = 2
    encoder_channels: tuple[int, ...] = (8, 16, 32)
    kernel_size: int = 3

    def __post_init__(self) -> None:
        self.encoder_channels = tuple(self.encoder_channels)

    @property
    def levels(self) -> int:
        return len(self.encoder_channels)

    @property
    def downsampling(self) -> int:
        return 2 ** (self.levels - 1)

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ConfigError(
                "network.in_channels", f"must be >= 1, got {self.in_channels}"
            )
        if self.num_classes < 2:
            raise ConfigError(
                "network.num_classes", f"must be >= 2, got {self.num_classes}"
            )
        if not self.encoder_channels:
            raise ConfigError(
                "network.encoder_channels", "must list at least one encoder level"
            )
        if any(c < 1 for c in self.encoder_channels):
            raise ConfigError(
                "network.encoder_channels",
                f"all entries must be >= 1, got {self.encoder_channels}",
            )
        if self.kernel_size < 1 or self.kernel_size % 2 != 1:
            raise ConfigError(
                "network.kernel_size",
                f"must be a positive odd integer, got {self.kernel_size}",
            )

    def layer_shapes(self) -> list[tuple[str, int, int, int]]:
        """Returns (name, in_channels, out_channels, kernel_size) for every convolution
        in forward order."""
        k = self.kernel_size
        channels = self.encoder_channels
        layers = []
        previous = self.in_channels
        for level, width in enumerate(channels):
            if level > 0:
                layers.append((f"down{level - 1}", previous, previous, k))
            layers.append((f"enc{level}", previous, width, k))
            previous = width
        for level in reversed(range(self.levels - 1)):
            layers.append(
                (f"dec{level}", previous + channels[level], channels[level], k)
            )
            previous = channels[level]
        layers.append(("head", previous, self.num_classes, 1))
        return layers


@dataclass
class Batch:
    volumes: np.ndarray
    labels: np.ndarray


@dataclass
class Network:
    config: NetworkConfig
    params: dict[str, np.ndarray]
    vfda_layers: list[VfdaLayer] = field(default_factory=list)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([p.reshape(-1) for p in self.params.values()])

    def unflatten(self, vector: np.ndarray) -> None:
        if vector.ndim != 1 or vector.shape[0] != self.parameter_count():
            raise ShapeError(
                f"Parameter vector shape {vector.shape} does not match network parameter count "
                f"({self.parameter_count()},)"
            )
        offset = 0
        for name, param in self.params.items():
            chunk = vector[offset : offset + param.size]
            self.params[name] = chunk.reshape(param.shape).copy()
            offset += param.size

    def set_mode(self, mode: str) -> None:
        for layer in self.vfda_layers:
            layer.set_mode(mode)


def build_network(
    config: NetworkConfig,
    rng: np.random.Generator,
    vfda_levels: Sequence[int] | None = None,
    vfda_options: dict | None = None,
) -> Network:
    """Builds the encoder-decoder with He-initialized kernels, zero biases and one VFDA
    layer per encoder level. Levels missing from vfda_levels get an identity layer."""
    config.validate()
    if vfda_levels is None:
        vfda_levels = range(config.levels)
    vfda_levels = set(vfda_levels)
    if any(level < 0 or level >= config.levels for level in vfda_levels):
        raise ConfigError(
            "augmentation.vfda_levels",
            f"levels must be in [0, {config.levels}), got {sorted(vfda_levels)}",
        )
    params = {}
    for name, cin, cout, k in config.layer_shapes():
        fan_in = cin * k**3
        params[f"{name}.weight"] = rng.normal(
            0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k, k)
        )
        params[f"{name}.bias"] = np.zeros(cout, dtype=DTYPE)
    layers = [
        VfdaLayer(channels=width, enabled=level in vfda_levels, **(vfda_options or {}))
        for level, width in enumerate(config.encoder_channels)
    ]
    net = Network(config=config, params=params, vfda_layers=layers)
    log.debug(
        f"Built network with {net.parameter_count()} parameters, VFDA at levels {sorted(vfda_levels)}"
    )
    return net


def check_batch(
    net: Network, volumes: np.ndarray, labels: np.ndarray | None = None
) -> None:
    config = net.config
    if volumes.ndim != 5 or volumes.shape[1] != config.in_channels:
        raise ShapeError(
            f"Volume batch shape {volumes.shape} does not match network input channels {config.in_channels}"
        )
    if any(d % config.downsampling for d in volumes.shape[2:]):
        raise ShapeError(
            f"Volume batch shape {volumes.shape} spatial dims must be divisible by {config.downsampling}"
        )
    if labels is not None and labels.ndim == 4:
        expected = (volumes.shape[0],) + volumes.shape[2:]
        if labels.shape != expected:
            raise ShapeError(
                f"Label shape {labels.shape} does not match volume batch shape {volumes.shape}"
            )


def _conv(
    net: Network, name: str, x: np.ndarray, stride: int = 1
) -> tuple[np.ndarray, GradCache]:
    return conv3d_forward(
        x, net.params[f"{name}.weight"], net.params[f"{name}.bias"], stride=stride
    )


def forward(
    net: Network,
    volumes: np.ndarray,
    mode: str = EVAL,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, dict]:
    """Returns B x K x H x W x S logits and the caches needed by backward()."""
    if mode not in MODES:
        raise ValueError(f'Unknown mode "{mode}", expected one of {MODES}')
    check_batch(net, volumes)
    net.set_mode(mode)
    levels = net.config.levels
    caches = {"enc": [], "dec": {}, "head": None}
    skips = []
    x = volumes
    for level in range(levels):
        level_caches = {"down": None}
        if level > 0:
            x, conv_cache = _conv(net, f"down{level - 1}", x, stride=2)
            x, relu_cache = relu(x)
            level_caches["down"] = (conv_cache, relu_cache)
        x, level_caches["conv"] = _conv(net, f"enc{level}", x)
        x, level_caches["relu"] = relu(x)
        x, level_caches["vfda"] = net.vfda_layers[level].forward(x, rng)
        caches["enc"].append(level_caches)
        skips.append(x)
    for level in reversed(range(levels - 1)):
        x, up_cache = upsample_nearest(x, 2)
        x, cat_cache = concat_channels(x, skips[level])
        x, conv_cache = _conv(net, f"dec{level}", x)
        x, relu_cache = relu(x)
        caches["dec"][level] = (up_cache, cat_cache, conv_cache, relu_cache)
    logits, caches["head"] = conv3d_forward(
        x, net.params["head.weight"], net.params["head.bias"], pad=0
    )
    return logits, caches


def backward(
    net: Network, grad_logits: np.ndarray, caches: dict
) -> dict[str, np.ndarray]:
    """Returns the gradient of a scalar loss with respect to every network parameter."""
    grads = {}
    levels = net.config.levels
    g, grads["head.weight"], grads["head.bias"] = conv3d_backward(
        grad_logits, caches["head"]
    )
    skip_grads = {}
    for level in range(levels - 1):
        up_cache, cat_cache, conv_cache, relu_cache = caches["dec"][level]
        g = relu_backward(g, relu_cache)
        g, grads[f"dec{level}.weight"], grads[f"dec{level}.bias"] = conv3d_backward(
            g, conv_cache
        )
        g, skip_grads[level] = concat_channels_backward(g, cat_cache)
        g = upsample_nearest_backward(g, up_cache)
    for level in reversed(range(levels)):
        level_caches = caches["enc"][level]
        if level in skip_grads:
            g = g + skip_grads[level]
        g = net.vfda_layers[level].backward(g, level_caches["vfda"])
        g = relu_backward(g, level_caches["relu"])
        g, grads[f"enc{level}.weight"], grads[f"enc{level}.bias"] = conv3d_backward(
            g, level_caches["conv"]
        )
        if level_caches["down"] is not None:
            conv_cache, relu_cache = level_caches["down"]
            g = relu_backward(g, relu_cache)
            down = f"down{level - 1}"
            g, grads[f"{down}.weight"], grads[f"{down}.bias"] = conv3d_backward(
                g, conv_cache
            )
    return {name: grads[name] for name in net.params}


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    return probs * (grad_probs - (grad_probs * probs).sum(axis=1, keepdims=True))


def to_targets(labels: np.ndarray, num_classes: int, like: np.ndarray) -> np.ndarray:
    """Turns integer labels (B x H x W x S) into one-hot targets shaped like the logits.
    Soft targets already shaped like the logits are returned unchanged."""
    if labels.ndim == like.ndim:
        if labels.shape != like.shape:
            raise ShapeError(
                f"Soft target shape {labels.shape} does not match {like.shape}"
            )
        return labels
    expected = (like.shape[0],) + like.shape[2:]
    if labels.shape != expected:
        raise ShapeError(
            f"Label shape {labels.shape} does not match logits shape {like.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ShapeError(
            f"Labels must be in [0, {num_classes}), found range [{labels.min()}, {labels.max()}]"
        )
    classes = np.arange(num_classes).reshape(1, num_classes, 1, 1, 1)
    return (labels[:, None] == classes).astype(DTYPE)


def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean voxel-wise cross-entropy of softmax(logits) against hard or soft labels."""
    targets = to_targets(labels, logits.shape[1], logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    voxels = logits.size // logits.shape[1]
    loss = float(-(targets * log_probs).sum() / voxels)
    probs = np.exp(log_probs)
    grad = (probs * targets.sum(axis=1, keepdims=True) - targets) / voxels
    return loss, grad


def soft_dice_loss(
    probs: np.ndarray, labels: np.ndarray, smooth: float = DICE_SMOOTH
) -> tuple[float, np.ndarray]:
    """One minus the class-mean smoothed soft Dice, summed over batch and voxels."""
    targets = to_targets(labels, probs.shape[1], probs)
    axes = (0, 2, 3, 4)
    intersection = (probs * targets).sum(axis=axes)
    denominator = probs.sum(axis=axes) + targets.sum(axis=axes) + smooth
    dice = (2.0 * intersection + smooth) / denominator
    loss = float(1.0 - dice.mean())
    shape = (1, -1, 1, 1, 1)
    overlap = (2.0 * intersection + smooth).reshape(shape)
    denominator = denominator.reshape(shape)
    grad_dice = (2.0 * targets * denominator - overlap) / denominator**2
    return loss, -grad_dice / probs.shape[1]


def combined_loss(
    logits: np.ndarray, labels: np.ndarray, loss_weights: tuple[float, float] = (
        1.0, 1.0
    )
) -> tuple[float, float, np.ndarray]:
    """Returns (loss_ce, loss_dice, grad_logits) for w_ce * CE + w_dice * Dice."""
    w_ce, w_dice = loss_weights
    loss_ce, grad_ce = softmax_cross_entropy(logits, labels)
    probs = softmax(logits)
    loss_dice, grad_probs = soft_dice_loss(probs, labels)
    grad_logits = w_ce * grad_ce + w_dice * softmax_backward(probs, grad_probs)
    return loss_ce, loss_dice, grad_logits


def train_step(
    net: Network,
    batch: Batch,
    lr: float,
    loss_weights: tuple[float, float] = (1.0, 1.0),
    rng: np.random.Generator | None = None,
) -> tuple[float, float]:
    """One forward, full backward and one SGD update in train mode. Returns the
    pre-update (loss_ce, loss_dice)."""
    check_batch(net, batch.volumes, batch.labels)
    logits, caches = forward(net, batch.volumes, mode=TRAIN, rng=rng)
    loss_ce, loss_dice, grad_logits = combined_loss(logits, batch.labels, loss_weights)
    grads = backward(net, grad_logits, caches)
    names = list(net.params)
    updated = sgd_step([net.params[n] for n in names], [grads[n] for n in names], lr)
    net.params = dict(zip(names, updated))
    log.debug(
        f"Train step: loss_ce={loss_ce:.6f} loss_dice={loss_dice:.6f} lr={lr:.3g}"
    )
    return loss_ce, loss_dice


def predict(net: Network, volumes: np.ndarray) -> np.ndarray:
    """Eval-mode forward followed by a per-voxel argmax over classes."""
    logits, _ = forward(net, volumes, mode=EVAL)
    return logits.argmax(axis=1)


def save_model(path: Path | str, net: Network) -> None:
    if isinstance(path, str):
        path = Path(path)
    config = net.config
    with open(path, "wb") as f:
        np.savez(
            f,
            params=net.flatten(),
            in_channels=np.array(config.in_channels),
            num_classes=np.array(config.num_classes),
            encoder_channels=np.array(config.encoder_channels),
            kernel_size=np.array(config.kernel_size),
        )
    log.info(f"Saved model ({net.parameter_count()} parameters) to: {path}")


def load_model(path: Path | str) -> Network:
    """Loads a model written by save_model(), with fresh VFDA layers."""
    if isinstance(path, str):
        path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            config = NetworkConfig(
                in_channels=int(data["in_channels"]),
                num_classes=int(data["num_classes"]),
                encoder_channels=tuple(int(c) for c in data["encoder_channels"]),
                kernel_size=int(data["kernel_size"]),
            )
            vector = np.array(data["params"], dtype=DTYPE)
    except (OSError, KeyError, ValueError) as e:
        raise ModelFormatError(f"Failed to load model from {path}: {e}") from e
    try:
        net = build_network(config, np.random.default_rng(0))
        net.unflatten(vector)
    except (ConfigError, ShapeError) as e:
        raise ModelFormatError(f"Model file {path} is inconsistent: {e}") from e
    return net
