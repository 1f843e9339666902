"""Synthetic radar-like events, dataset splits, normalization and the on-disk frame format.

Frames are ``float32`` arrays shaped ``[T, 1, H, W]`` with values in ``[0, R]``.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

DATA_RANGE = 255.0

MAGIC = b"STLF"
VERSION = 1
HEADER = struct.Struct("<4sH4I")  # magic, version, T, C, H, W


class FrameFormatError(Exception):
    """Base class for errors reading the binary frame format."""


class BadMagicError(FrameFormatError):
    pass


class BadVersionError(FrameFormatError):
    pass


class TruncatedFileError(FrameFormatError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    height: int = 32
    width: int = 32
    input_frames: int = 4
    output_frames: int = 4
    n_blobs: tuple = (1, 3)
    amplitude: tuple = (120.0, 255.0)
    radius: tuple = (3.0, 6.0)
    velocity: tuple = (-1.5, 1.5)
    growth: tuple = (-0.05, 0.05)
    perturb_velocity: float = 0.35
    perturb_amplitude: float = 0.08
    perturb_onset: int | None = None
    data_range: float = DATA_RANGE
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("degenerate frame size")
        if self.input_frames < 1 or self.output_frames < 1:
            raise ValueError("need at least one input and one output frame")
        if not 1 <= self.n_blobs[0] <= self.n_blobs[1]:
            raise ValueError("bad blob-count range")
        if self.onset > self.input_frames:
            raise ValueError("perturbation onset must be <= number of input frames")

    @property
    def onset(self) -> int:
        return self.input_frames if self.perturb_onset is None else self.perturb_onset

    @property
    def total_frames(self) -> int:
        return self.input_frames + self.output_frames


def _stream(cfg: SynthConfig, key: int, salt: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, int(key), salt])


def generate_event(cfg: SynthConfig, event_seed: int, perturb_seed: int | None = None) -> np.ndarray:
    """Advected anisotropic Gaussian blobs with random kicks after the perturbation onset.

    Blob layout and motion come from the ``event_seed`` stream; the post-onset kicks come
    from a second stream keyed by ``perturb_seed`` (defaults to ``event_seed``), so two
    calls that share ``event_seed`` agree on every frame before the onset.
    """
    base = _stream(cfg, event_seed, 0)
    kick = _stream(cfg, event_seed if perturb_seed is None else perturb_seed, 1)
    n = int(base.integers(cfg.n_blobs[0], cfg.n_blobs[1] + 1))
    H, W = cfg.height, cfg.width

    pos = np.stack([base.uniform(0.2 * H, 0.8 * H, n), base.uniform(0.2 * W, 0.8 * W, n)], 1)
    vel = base.uniform(cfg.velocity[0], cfg.velocity[1], (n, 2))
    amp = base.uniform(*cfg.amplitude, n)
    rad = base.uniform(cfg.radius[0], cfg.radius[1], (n, 2))
    theta = base.uniform(0, np.pi, n)
    growth = base.uniform(*cfg.growth, n)

    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    cos, sin = np.cos(theta), np.sin(theta)
    frames = np.zeros((cfg.total_frames, 1, H, W), dtype=np.float64)
    for f in range(cfg.total_frames):
        if f >= cfg.onset:
            vel = vel + kick.normal(0.0, cfg.perturb_velocity, (n, 2))
            amp = amp * np.exp(kick.normal(0.0, cfg.perturb_amplitude, n))
        for b in range(n):
            dy, dx = yy - pos[b, 0], xx - pos[b, 1]
            u = (cos[b] * dx + sin[b] * dy) / rad[b, 0]
            v = (-sin[b] * dx + cos[b] * dy) / rad[b, 1]
            frames[f, 0] += amp[b] * np.exp(-0.5 * (u * u + v * v))
        pos = pos + vel
        amp = amp * (1.0 + growth)
    return np.clip(frames, 0.0, cfg.data_range).astype(np.float32)


@dataclass(frozen=True)
class Split:
    train: range
    val: range
    test: range


def split(train: Sequence[int] = (0, 8000), val: Sequence[int] = (8000, 8500),
          test: Sequence[int] = (8500, 9000)) -> Split:
    """Disjoint event-seed ranges. Each argument is a half-open ``(start, stop)`` pair."""
    ranges = [range(*r) for r in (train, val, test)]
    for i in range(3):
        for j in range(i + 1, 3):
            a, b = ranges[i], ranges[j]
            if len(a) and len(b) and a.start < b.stop and b.start < a.stop:
                raise ValueError(f"seed ranges overlap: {a} and {b}")
    return Split(*ranges)


class EventSource(Protocol):
    """What a dataset adapter yields: one ``[M+N, 1, H, W]`` float sequence in ``[0, R]`` per index."""

    def __len__(self) -> int: ...

    def __getitem__(self, i: int) -> np.ndarray: ...


class SyntheticSource:
    def __init__(self, cfg: SynthConfig, seeds: range, cache: bool = True):
        self.cfg = cfg
        self.seeds = seeds
        self._cache: dict[int, np.ndarray] | None = {} if cache else None

    def __len__(self):
        return len(self.seeds)

    def __getitem__(self, i: int) -> np.ndarray:
        seed = self.seeds[i]
        if self._cache is None:
            return generate_event(self.cfg, seed)
        if seed not in self._cache:
            self._cache[seed] = generate_event(self.cfg, seed)
        return self._cache[seed]

    def __iter__(self) -> Iterator[np.ndarray]:
        for i in range(len(self)):
            yield self[i]


class DirectorySource:
    """Events stored one per file (``<zero-padded seed>.stlf``) in a directory."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.files = sorted(self.root.glob("*.stlf"))

    def __len__(self):
        return len(self.files)

    def __getitem__(self, i: int) -> np.ndarray:
        return read_frames(self.files[i])


def event_filename(seed: int) -> str:
    return f"{seed:08d}.stlf"


class Normalizer:
    """Affine map between ``[0, R]`` and ``[-1, 1]``; counts clamped out-of-range inputs."""

    def __init__(self, data_range: float = DATA_RANGE):
        self.data_range = float(data_range)
        self.clamped = 0

    def normalize(self, x):
        lo, hi = x.min(), x.max()
        if lo < 0 or hi > self.data_range:
            bad = ((x < 0) | (x > self.data_range)).sum()
            self.clamped += int(bad)
            log.warning("clamping %d out-of-range values", int(bad))
            x = x.clip(0, self.data_range)
        return x * (2.0 / self.data_range) - 1.0

    def denormalize(self, y):
        return (y + 1.0) * (self.data_range / 2.0)


def normalize(x, data_range: float = DATA_RANGE):
    return Normalizer(data_range).normalize(x)


def denormalize(y, data_range: float = DATA_RANGE):
    return Normalizer(data_range).denormalize(y)


def write_frames(path: str | os.PathLike, frames: np.ndarray) -> None:
    arr = np.asarray(frames)
    if arr.ndim != 4:
        raise ValueError(f"expected [T, C, H, W], got shape {arr.shape}")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, *arr.shape))
        fh.write(payload.tobytes())


def read_frames(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a frame file")
    if len(raw) < HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, version, *shape = HEADER.unpack_from(raw)
    if version != VERSION:
        raise BadVersionError(f"{path}: unsupported version {version}")
    expected = int(np.prod(shape)) * 4
    if len(raw) - HEADER.size < expected:
        raise TruncatedFileError(f"{path}: payload has {len(raw) - HEADER.size} of {expected} bytes")
    out = np.frombuffer(raw, dtype="<f4", count=int(np.prod(shape)), offset=HEADER.size)
    return out.reshape(shape).astype(np.float32)


def to_pgm(frame: np.ndarray, data_range: float = DATA_RANGE) -> bytes:
    """Binary (P5) 8-bit grayscale with pixel = round(255 * x / R)."""
    img = np.asarray(frame, dtype=np.float64).squeeze()
    if img.ndim != 2:
        raise ValueError("PGM export takes a single 2-D frame")
    px = np.clip(np.round(255.0 * img / data_range), 0, 255).astype(np.uint8)
    h, w = px.shape
    return f"P5\n{w} {h}\n255\n".encode() + px.tobytes()


def write_pgm(path: str | os.PathLike, frame: np.ndarray, data_range: float = DATA_RANGE) -> None:
    Path(path).write_bytes(to_pgm(frame, data_range))
