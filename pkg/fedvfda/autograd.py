from itertools import product
from dataclasses import dataclass, field
from collections.abc import Callable, Sequence
import numpy as np
from .errors import ShapeError, GradientCacheError


DTYPE = np.float64


@dataclass
class GradCache:
    """Values a forward op keeps for its backward pass, one cache per forward call."""

    op: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def as_tensor(value) -> np.ndarray:
    return np.ascontiguousarray(value, dtype=DTYPE)


def check_rank(name: str, array: np.ndarray, rank: int) -> None:
    if array.ndim != rank:
        raise ShapeError(f"{name} must be rank {rank}, got shape {array.shape}")


def check_cache(cache: GradCache | None, op: str, grad_out: np.ndarray) -> None:
    if cache is None:
        raise GradientCacheError(f'Missing gradient cache for "{op}" backward')
    if not isinstance(cache, GradCache) or cache.op != op:
        found = getattr(cache, "op", type(cache).__name__)
        raise GradientCacheError(
            f'Gradient cache for "{found}" passed to "{op}" backward'
        )
    expected = cache.meta["output_shape"]
    if tuple(grad_out.shape) != tuple(expected):
        raise GradientCacheError(
            f'Gradient shape {tuple(grad_out.shape)} does not match "{op}" output shape {tuple(expected)}'
        )


def conv_output_size(size: int, kernel_size: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel_size) // stride + 1


def _window(stride: int, offset: int, count: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def conv3d_forward(
    x: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
    pad: int | None = None,
) -> tuple[np.ndarray, GradCache]:
    """3D cross-correlation of a B x Cin x H x W x S input with a Cout x Cin x k x k x k
    kernel. Zero padding defaults to (k - 1) / 2, keeping spatial dims at stride 1."""
    check_rank("conv3d input", x, 5)
    check_rank("conv3d kernel", kernel, 5)
    cout, cin, k = kernel.shape[0], kernel.shape[1], kernel.shape[2]
    if kernel.shape[2:] != (k, k, k) or k % 2 != 1:
        raise ShapeError(
            f"conv3d kernel must be cubic with an odd size, got kernel shape {kernel.shape}"
        )
    if x.shape[1] != cin:
        raise ShapeError(
            f"conv3d input shape {x.shape} does not match kernel shape {kernel.shape}"
        )
    if bias.shape != (cout,):
        raise ShapeError(
            f"conv3d bias shape {bias.shape} does not match kernel shape {kernel.shape}"
        )
    if stride < 1:
        raise ShapeError(f"conv3d stride must be >= 1, got {stride}")
    if pad is None:
        pad = (k - 1) // 2
    out_dims = tuple(conv_output_size(d, k, stride, pad) for d in x.shape[2:])
    if min(out_dims) < 1:
        raise ShapeError(
            f"conv3d input shape {x.shape} is too small for kernel shape {kernel.shape}"
        )
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    # accumulate as Cout x B x ... and move the batch axis forward once at the end
    acc = np.zeros((cout, x.shape[0]) + out_dims, dtype=DTYPE)
    for i, j, l in product(range(k), repeat=3):
        patch = xp[
            :,
            :,
            _window(stride, i, out_dims[0]),
            _window(stride, j, out_dims[1]),
            _window(stride, l, out_dims[2]),
        ]
        acc += np.tensordot(kernel[:, :, i, j, l], patch, axes=([1], [1]))
    out = np.ascontiguousarray(np.moveaxis(acc, 0, 1))
    out += bias[None, :, None, None, None]
    cache = GradCache(
        op="conv3d",
        tensors={"xp": xp, "kernel": kernel},
        meta={
            "input_shape": x.shape,
            "output_shape": out.shape,
            "stride": stride,
            "pad": pad,
        },
    )
    return out, cache


def conv3d_backward(
    grad_out: np.ndarray, cache: GradCache
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_input, grad_kernel, grad_bias) for a conv3d_forward call."""
    check_cache(cache, "conv3d", grad_out)
    xp = cache.tensors["xp"]
    kernel = cache.tensors["kernel"]
    stride, pad = cache.meta["stride"], cache.meta["pad"]
    out_dims = grad_out.shape[2:]
    k = kernel.shape[2]
    grad_kernel = np.zeros_like(kernel)
    grad_xp = np.zeros_like(xp)
    for i, j, l in product(range(k), repeat=3):
        window = (
            slice(None),
            slice(None),
            _window(stride, i, out_dims[0]),
            _window(stride, j, out_dims[1]),
            _window(stride, l, out_dims[2]),
        )
        grad_kernel[:, :, i, j, l] = np.tensordot(
            grad_out, xp[window], axes=([0, 2, 3, 4], [0, 2, 3, 4])
        )
        # B x Ho x Wo x So x Cin back to B x Cin x Ho x Wo x So
        contribution = np.tensordot(grad_out, kernel[:, :, i, j, l], axes=([1], [0]))
        grad_xp[window] += np.moveaxis(contribution, -1, 1)
    grad_bias = grad_out.sum(axis=(0, 2, 3, 4))
    h, w, s = cache.meta["input_shape"][2:]
    grad_input = np.ascontiguousarray(
        grad_xp[:, :, pad : pad + h, pad : pad + w, pad : pad + s]
    )
    return grad_input, grad_kernel, grad_bias


def relu(x: np.ndarray) -> tuple[np.ndarray, GradCache]:
    mask = x > 0
    out = np.where(mask, x, 0.0)
    return out, GradCache(
        op="relu", tensors={"mask": mask}, meta={"output_shape": out.shape}
    )


def relu_backward(grad_out: np.ndarray, cache: GradCache) -> np.ndarray:
    # derivative at exactly 0 is 0
    check_cache(cache, "relu", grad_out)
    return np.where(cache.tensors["mask"], grad_out, 0.0)


def upsample_nearest(x: np.ndarray, factor: int) -> tuple[np.ndarray, GradCache]:
    """Replicates every voxel factor^3 times along the three spatial axes."""
    check_rank("upsample input", x, 5)
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    out = x
    for axis in (2, 3, 4):
        out = np.repeat(out, factor, axis=axis)
    cache = GradCache(
        op="upsample_nearest",
        meta={"factor": factor, "input_shape": x.shape, "output_shape": out.shape},
    )
    return out, cache


def upsample_nearest_backward(grad_out: np.ndarray, cache: GradCache) -> np.ndarray:
    check_cache(cache, "upsample_nearest", grad_out)
    f = cache.meta["factor"]
    b, c, h, w, s = cache.meta["input_shape"]
    grouped = grad_out.reshape(b, c, h, f, w, f, s, f)
    return grouped.sum(axis=(3, 5, 7))


def concat_channels(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, GradCache]:
    check_rank("concat input", a, 5)
    check_rank("concat input", b, 5)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"Cannot concatenate channels of shapes {a.shape} and {b.shape}"
        )
    out = np.concatenate([a, b], axis=1)
    cache = GradCache(
        op="concat_channels", meta={"split": a.shape[1], "output_shape": out.shape}
    )
    return out, cache


def concat_channels_backward(
    grad_out: np.ndarray, cache: GradCache
) -> tuple[np.ndarray, np.ndarray]:
    check_cache(cache, "concat_channels", grad_out)
    split = cache.meta["split"]
    return grad_out[:, :split].copy(), grad_out[:, split:].copy()


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central difference estimate of the gradient of a scalar functional, one element
    at a time."""
    if h <= 0:
        raise ValueError(f"Finite difference step must be > 0, got {h}")
    x = as_tensor(x).copy()
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_grad = grad.reshape(-1)
    for index in range(flat_x.size):
        original = flat_x[index]
        flat_x[index] = original + h
        f_plus = float(f(x))
        flat_x[index] = original - h
        f_minus = float(f(x))
        flat_x[index] = original
        flat_grad[index] = (f_plus - f_minus) / (2 * h)
    return grad


def sgd_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float
) -> list[np.ndarray]:
    """Plain gradient descent, p <- p - lr * g, returning new arrays."""
    if lr < 0:
        raise ValueError(f"Learning rate must be >= 0, got {lr}")
    if len(params) != len(grads):
        raise ShapeError(f"Got {len(params)} parameters but {len(grads)} gradients")
    updated = []
    for param, grad in zip(params, grads):
        if param.shape != grad.shape:
            raise ShapeError(
                f"Parameter shape {param.shape} does not match gradient shape {grad.shape}"
            )
        updated.append(param - lr * grad)
    return updated
