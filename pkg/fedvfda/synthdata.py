"""
Synthetic non-IID volumetric segmentation data.

Every client gets a ClientShift describing its intensity gain/bias, noise level and
object size range, spread linearly between declared extremes by a heterogeneity factor
h in [0, 1]:

    t_i             in [-0.5, 0.5], evenly spaced over clients (0 for one client)
    intensity_gain  = 1 + h * t_i                  (0.5 .. 1.5 at h = 1)
    intensity_bias  = 0.5 * h * t_i                (-0.25 .. 0.25)
    noise_std       = 0.1 + 0.2 * h * (t_i + 0.5)  (0.1 .. 0.3)
    radius centre   = D / 4 * (1 + h * t_i)        (range is centre -/+ D / 16)

Which client receives which spread position is a seeded permutation. Samples contain
K - 1 nested ellipsoids (class 1 outermost) on background class 0 with class base
intensities 0, 1 and 2.
"""

import struct
import hashlib
from logging import getLogger
from pathlib import Path
from dataclasses import dataclass
from collections.abc import Iterable
import numpy as np
from .autograd import DTYPE
from .errors import (
    VolumeMagicError,
    VolumeDimensionError,
    VolumeTruncatedError,
    VolumeFormatError,
)


log = getLogger("main")


CLASS_BASE_VALUES = (0.0, 1.0, 2.0)
VOLUME_MAGIC = b"FVX1"
VOLUME_HEADER = struct.Struct("<4sIB7x")
MAX_VOLUME_SIZE = 256
VOLUME_SUFFIX = ".fvx"


@dataclass(frozen=True)
class ClientShift:
    intensity_gain: float = 1.0
    intensity_bias: float = 0.0
    noise_std: float = 0.1
    object_radius_range: tuple[float, float] = (3.0, 5.0)
    samples: int = 8

    def validate(self, volume_size: int) -> None:
        if self.intensity_gain <= 0:
            raise ValueError(
                f"Client shift gain must be > 0, got {self.intensity_gain}"
            )
        if self.noise_std < 0:
            raise ValueError(
                f"Client shift noise_std must be >= 0, got {self.noise_std}"
            )
        low, high = self.object_radius_range
        if not 1.0 <= low <= high or high >= volume_size / 2:
            raise ValueError(
                f"Client shift radius range {self.object_radius_range} does not fit a volume of size {volume_size}"
            )


@dataclass
class VolumeSample:
    volume: np.ndarray
    label: np.ndarray

    @property
    def size(self) -> int:
        return self.label.shape[0]


def make_partition(
    num_clients: int,
    heterogeneity: float,
    rng: np.random.Generator,
    volume_size: int = 16,
    samples: int = 8,
) -> list[ClientShift]:
    """Returns one ClientShift per client, spread linearly with heterogeneity (identical
    at heterogeneity 0)."""
    if num_clients < 1:
        raise ValueError(f"Number of clients must be >= 1, got {num_clients}")
    if not 0.0 <= heterogeneity <= 1.0:
        raise ValueError(f"Heterogeneity must be in [0, 1], got {heterogeneity}")
    if num_clients == 1:
        positions = np.zeros(1)
    else:
        positions = np.linspace(-0.5, 0.5, num_clients)
    positions = positions[rng.permutation(num_clients)]
    shifts = []
    for t in positions:
        t = float(heterogeneity * t)
        centre = volume_size / 4 * (1.0 + t)
        spread = volume_size / 16
        shift = ClientShift(
            intensity_gain=1.0 + t,
            intensity_bias=0.5 * t,
            noise_std=0.1 + 0.2 * (t + 0.5 * heterogeneity),
            object_radius_range=(max(1.0, centre - spread), centre + spread),
            samples=samples,
        )
        shift.validate(volume_size)
        shifts.append(shift)
    return shifts


def mixture_shift(shifts: list[ClientShift], rng: np.random.Generator) -> ClientShift:
    """Picks one of the client shifts at random, used to draw held-out samples from the
    mixture of all clients."""
    return shifts[int(rng.integers(len(shifts)))]


def rasterize_ellipsoid(
    size: int, centre: tuple[int, int, int], semi_axes: tuple[float, float, float]
) -> np.ndarray:
    grid = np.ogrid[:size, :size, :size]
    distance = sum(((axis - c) / r) ** 2 for axis, c, r in zip(grid, centre, semi_axes))
    return distance <= 1.0


def generate_sample(
    shift: ClientShift, size: int, num_classes: int, rng: np.random.Generator
) -> VolumeSample:
    """Draws one labelled volume: nested ellipsoids for the foreground classes,
    intensity gain * base[label] + bias + N(0, noise_std^2)."""
    if size % 4 != 0:
        raise ValueError(f"Volume size must be divisible by 4, got {size}")
    if num_classes not in (2, 3):
        raise ValueError(f"Number of classes must be 2 or 3, got {num_classes}")
    shift.validate(size)
    low, high = shift.object_radius_range
    semi_axes = rng.uniform(low, high, size=3)
    margin = int(np.ceil(semi_axes.max()))
    centre = tuple(
        int(c) for c in rng.integers(margin, size - margin, size=3, endpoint=True)
    )
    label = np.zeros((size, size, size), dtype=np.uint8)
    # each inner class halves the semi-axes, so every requested class keeps a non-empty
    # shell
    for class_id in range(1, num_classes):
        shell_axes = tuple(semi_axes / 2 ** (class_id - 1))
        label[rasterize_ellipsoid(size, centre, shell_axes)] = class_id
    base = np.asarray(CLASS_BASE_VALUES, dtype=DTYPE)[label]
    noise = rng.normal(0.0, 1.0, size=label.shape) * shift.noise_std
    volume = shift.intensity_gain * base + shift.intensity_bias + noise
    return VolumeSample(volume=volume.reshape(1, 1, size, size, size), label=label)


def generate_shard(
    shift: ClientShift, size: int, num_classes: int, rng: np.random.Generator
) -> list[VolumeSample]:
    return [
        generate_sample(shift, size, num_classes, rng) for _ in range(shift.samples)
    ]


def random_flip(sample: VolumeSample, rng: np.random.Generator) -> VolumeSample:
    """Flips volume and label together along each spatial axis with probability 0.5."""
    flips = rng.random(3) < 0.5
    axes = tuple(int(a) for a in np.flatnonzero(flips))
    return flip_sample(sample, axes)


def flip_sample(sample: VolumeSample, axes: Iterable[int]) -> VolumeSample:
    axes = tuple(axes)
    if not axes:
        return VolumeSample(volume=sample.volume.copy(), label=sample.label.copy())
    volume = np.flip(sample.volume, axis=tuple(a + 2 for a in axes))
    label = np.flip(sample.label, axis=axes)
    return VolumeSample(
        volume=np.ascontiguousarray(volume), label=np.ascontiguousarray(label)
    )


def volume_file_size(size: int) -> int:
    voxels = size**3
    return VOLUME_HEADER.size + 8 * voxels + voxels


def write_volume(path: Path | str, sample: VolumeSample, num_classes: int) -> None:
    """Writes a sample in the FVX1 layout: 16 byte header, <f8 voxels, uint8 labels."""
    if isinstance(path, str):
        path = Path(path)
    size = sample.size
    if sample.label.shape != (size, size, size) or sample.volume.size != size**3:
        raise VolumeDimensionError(
            f"Only cubic volumes can be written, got volume {sample.volume.shape} and label {sample.label.shape}"
        )
    if not 1 <= size <= MAX_VOLUME_SIZE:
        raise VolumeDimensionError(
            f"Volume size {size} is outside [1, {MAX_VOLUME_SIZE}]"
        )
    header = VOLUME_HEADER.pack(VOLUME_MAGIC, size, num_classes)
    if not path.parent.is_dir():
        log.info(f"Creating directory: {path.parent}")
        path.parent.mkdir(parents=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(sample.volume, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(sample.label, dtype=np.uint8).tobytes())


def read_volume_with_classes(path: Path | str) -> tuple[VolumeSample, int]:
    if isinstance(path, str):
        path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise VolumeFormatError(f"Failed to read volume file {path}: {e}") from e
    if len(data) < VOLUME_HEADER.size:
        raise VolumeTruncatedError(
            f"Volume file {path} is {len(data)} bytes, shorter than the {VOLUME_HEADER.size} byte header"
        )
    magic, size, num_classes = VOLUME_HEADER.unpack_from(data)
    if magic != VOLUME_MAGIC:
        raise VolumeMagicError(
            f"Volume file {path} has magic {magic!r}, expected {VOLUME_MAGIC!r}"
        )
    if not 1 <= size <= MAX_VOLUME_SIZE:
        raise VolumeDimensionError(
            f"Volume file {path} declares size {size}, outside [1, {MAX_VOLUME_SIZE}]"
        )
    expected = volume_file_size(size)
    if len(data) < expected:
        raise VolumeTruncatedError(
            f"Volume file {path} is {len(data)} bytes, expected {expected}"
        )
    voxels = size**3
    offset = VOLUME_HEADER.size
    volume = np.frombuffer(data, dtype="<f8", count=voxels, offset=offset).astype(DTYPE)
    label = np.frombuffer(
        data, dtype=np.uint8, count=voxels, offset=offset + 8 * voxels
    ).copy()
    if label.size and label.max() >= num_classes:
        raise VolumeFormatError(
            f"Volume file {path} has label {label.max()} but declares {num_classes} classes"
        )
    sample = VolumeSample(
        volume=volume.reshape(1, 1, size, size, size),
        label=label.reshape(size, size, size),
    )
    return sample, num_classes


def read_volume(path: Path | str) -> VolumeSample:
    return read_volume_with_classes(path)[0]


def client_directory(root: Path, client_id: int) -> Path:
    return root / f"client_{client_id}"


def sample_path(directory: Path, index: int) -> Path:
    return directory / f"sample_{index}{VOLUME_SUFFIX}"


def write_shard(directory: Path, shard: list[VolumeSample], num_classes: int) -> None:
    for index, sample in enumerate(shard):
        write_volume(sample_path(directory, index), sample, num_classes)


def read_shard(directory: Path) -> tuple[list[VolumeSample], int | None]:
    """Reads sample_<k>.fvx files in index order, with their declared class count."""
    paths = sorted(
        directory.glob(f"sample_*{VOLUME_SUFFIX}"),
        key=lambda p: int(p.stem.split("_", 1)[1]),
    )
    samples = []
    classes = set()
    for path in paths:
        sample, num_classes = read_volume_with_classes(path)
        samples.append(sample)
        classes.add(num_classes)
    if len(classes) > 1:
        raise VolumeFormatError(
            f"Volume files in {directory} disagree on class count: {sorted(classes)}"
        )
    return samples, (classes.pop() if classes else None)


def shard_digest(shards: Iterable[list[VolumeSample]]) -> str:
    """sha256 over every voxel and label of the given shards, in order."""
    digest = hashlib.sha256()
    for shard in shards:
        for sample in shard:
            digest.update(np.ascontiguousarray(sample.volume, dtype="<f8").tobytes())
            digest.update(np.ascontiguousarray(sample.label, dtype=np.uint8).tobytes())
    return digest.hexdigest()
