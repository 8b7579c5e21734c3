"""Data generators with temporally drifting spurious correlations.

Every generator draws from independent random streams derived from one
master seed (x noise, label flips, stroke noise, spurious flips), so
changing one mechanism leaves the others' draws untouched.
"""
from __future__ import annotations

import gzip
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LABEL_NOISE = 0.25

# stream offsets under the master seed
_X, _LABEL, _U, _SPURIOUS = 0, 1, 2, 3

SEQUENCE_SCHEMA = "drm-sequence"
SEQUENCE_VERSION = 1


def _stream(seed: int, offset: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), offset])


@dataclass
class LabeledSequence:
    inputs: np.ndarray  # (T, ...) in generation order
    labels: np.ndarray  # (T,) int
    domain_trace: np.ndarray  # (T,) flip probability used for each example
    spurious: np.ndarray | None = None  # spurious attribute (sign of x2 / color id)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.domain_trace = np.asarray(self.domain_trace, dtype=np.float64)
        n = len(self.inputs)
        if len(self.labels) != n or len(self.domain_trace) != n:
            raise ValueError("inputs, labels and domain_trace must have equal length")

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx) -> "LabeledSequence":
        sp = None if self.spurious is None else self.spurious[idx]
        return LabeledSequence(self.inputs[idx], self.labels[idx], self.domain_trace[idx], sp)


@dataclass
class ShiftSchedule:
    """Per-example probability of flipping the spurious attribute."""

    kind: str = "linear"
    p_start: float = 0.0
    p_end: float = 0.0
    segments: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("linear", "piecewise"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        probs = [self.p_start, self.p_end] + [p for _, p in self.segments]
        if any(not 0 <= p <= 1 for p in probs):
            raise ValueError("flip probabilities must lie in [0, 1]")

    @classmethod
    def linear(cls, p_start: float, p_end: float) -> "ShiftSchedule":
        return cls("linear", p_start, p_end)

    @classmethod
    def constant(cls, p: float) -> "ShiftSchedule":
        return cls("linear", p, p)

    @classmethod
    def piecewise(cls, segments) -> "ShiftSchedule":
        segments = [(int(n), float(p)) for n, p in segments]
        return cls("piecewise", segments[0][1], segments[-1][1], segments)

    @classmethod
    def halves(cls, T: int, p_first: float, p_second: float) -> "ShiftSchedule":
        """``p_first`` for t <= ceil(T/2), ``p_second`` afterwards."""
        first = math.ceil(T / 2)
        return cls.piecewise([(first, p_first), (T - first, p_second)])

    def probs(self, T: int) -> np.ndarray:
        if self.kind == "linear":
            if T == 1:
                return np.array([self.p_start])
            t = np.arange(T)
            return self.p_start + (self.p_end - self.p_start) * t / (T - 1)
        total = sum(n for n, _ in self.segments)
        if total != T:
            raise ValueError(f"segment lengths sum to {total}, expected {T}")
        return np.concatenate([np.full(n, p) for n, p in self.segments])


TOY2D_TRAIN = ShiftSchedule.linear(0.0, 0.3)
TOY2D_TEST = ShiftSchedule.constant(0.9)
MNIST_TEST_FLIP = 0.9


def gen_toy2d(T: int, schedule: ShiftSchedule = TOY2D_TRAIN, seed: int = 0) -> LabeledSequence:
    """2-D concept-shift data: x1 carries the (noisy) label, x2 a drifting spurious copy."""
    if T < 2:
        raise ValueError("toy2d needs T >= 2")
    p = schedule.probs(T)
    x1 = _stream(seed, _X).normal(0.0, 2.0, T)
    y_pre = (x1 >= 0).astype(np.int64)
    y = np.where(_stream(seed, _LABEL).random(T) < LABEL_NOISE, 1 - y_pre, y_pre)
    y_sign = 2.0 * y - 1.0
    x2 = y_sign * (1.0 + _stream(seed, _U).random(T))
    flip = _stream(seed, _SPURIOUS).random(T) < p
    x2 = np.where(flip, -x2, x2)
    return LabeledSequence(np.column_stack([x1, x2]), y, p, np.sign(x2).astype(np.int64))


# ---------------------------------------------------------------- MNIST / IDX

_IDX_DTYPES = {0x08: ">u1"}


def read_idx(path, scale: bool | None = None) -> np.ndarray:
    """Parse an IDX file (optionally gzipped).

    Unsigned-byte image files (3-D) are scaled to [0, 1] unless ``scale`` is
    False; label files come back as integers.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated header at offset 0")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code not in _IDX_DTYPES or ndim == 0:
        raise ValueError(f"{path}: bad magic number 0x{raw[:4].hex()} at offset 0")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated dimension table at offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise ValueError(f"{path}: truncated payload at offset {len(raw)}, "
                         f"expected {count} bytes after offset {header}")
    data = np.frombuffer(raw, dtype=_IDX_DTYPES[dtype_code], count=count, offset=header)
    data = data.reshape(dims)
    if scale is None:
        scale = ndim >= 3
    return data / 255.0 if scale else data.astype(np.int64)


def write_idx(path, array) -> None:
    """Write an unsigned-byte IDX file; float input in [0, 1] is scaled back to 0..255."""
    a = np.asarray(array)
    if a.dtype.kind == "f":
        a = np.rint(a * 255.0)
    a = a.astype(">u1")
    header = struct.pack(">HBB", 0, 0x08, a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.tobytes())


def load_mnist(directory, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Images (N, 28, 28) in [0, 1] and digits (N,) from the standard IDX file names."""
    prefix = "train" if split == "train" else "t10k"
    directory = Path(directory)
    found = {}
    for kind, stem in (("images", f"{prefix}-images-idx3-ubyte"), ("labels", f"{prefix}-labels-idx1-ubyte")):
        for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
            if (directory / name).exists():
                found[kind] = directory / name
                break
        else:
            raise FileNotFoundError(f"no {stem} in {directory}")
    return read_idx(found["images"]), read_idx(found["labels"])


# segments of a seven-segment display in a unit box (x right, y down)
_CORNERS = {"tl": (0, 0), "tr": (1, 0), "ml": (0, .5), "mr": (1, .5), "bl": (0, 1), "br": (1, 1)}
_SEGMENTS = {"a": ("tl", "tr"), "b": ("tr", "mr"), "c": ("mr", "br"), "d": ("bl", "br"),
             "e": ("ml", "bl"), "f": ("tl", "ml"), "g": ("ml", "mr")}
_DIGIT_SEGMENTS = ["abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abfgcd"]


def _render_glyph(digit: int, rng: np.random.Generator, size: int = 28) -> np.ndarray:
    width, height = rng.uniform(8, 12), rng.uniform(14, 19)
    cx, cy = size / 2 + rng.uniform(-2, 2), size / 2 + rng.uniform(-2, 2)
    slant = rng.uniform(-0.25, 0.25)
    thick = rng.uniform(0.9, 1.8)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    pix = np.stack([xx.ravel(), yy.ravel()], axis=1)
    dist = np.full(len(pix), np.inf)
    for seg in _DIGIT_SEGMENTS[digit]:
        ends = []
        for corner in _SEGMENTS[seg]:
            u, v = _CORNERS[corner]
            u, v = u + rng.normal(0, 0.05), v + rng.normal(0, 0.03)
            y = cy + (v - 0.5) * height
            x = cx + (u - 0.5) * width - slant * (v - 0.5) * height
            ends.append((x, y))
        a, b = np.array(ends)
        ab = b - a
        s = np.clip(((pix - a) @ ab) / max(ab @ ab, 1e-9), 0.0, 1.0)
        dist = np.minimum(dist, np.linalg.norm(pix - (a + s[:, None] * ab), axis=1))
    img = np.clip(1.0 + thick - dist, 0.0, 1.0) * rng.uniform(0.8, 1.0)
    return img.reshape(size, size)


def gen_synthetic_digits(T: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Procedural digit-like glyphs as a stand-in MNIST source.

    Returns (images (T, 28, 28) in [0, 1], digits (T,)). This is a fallback
    for environments without the MNIST files; accuracies obtained on it are
    not comparable to real MNIST numbers.
    """
    rng = _stream(seed, 7)
    digits = rng.integers(0, 10, T)
    images = np.stack([_render_glyph(int(d), rng) for d in digits]) if T else np.zeros((0, 28, 28))
    return images, digits


def downsample2x(images: np.ndarray) -> np.ndarray:
    """Halve the last two axes by 2x2 averaging (bilinear interpolation at scale 1/2)."""
    h, w = images.shape[-2] // 2 * 2, images.shape[-1] // 2 * 2
    x = images[..., :h, :w]
    return x.reshape(*x.shape[:-2], h // 2, 2, w // 2, 2).mean(axis=(-3, -1))


def gen_colored_mnist(source, T: int, schedule: ShiftSchedule, seed: int = 0,
                      downsample: bool = True) -> LabeledSequence:
    """Colour the first ``T`` digits of ``source`` red (c=1) or green (c=0).

    The colour id copies the noisy label and is flipped with the scheduled
    probability; images keep the source order.
    """
    images, digits = source
    if len(images) < T:
        raise ValueError(f"source exhausted: {len(images)} images available, {T} requested")
    images, digits = np.asarray(images[:T], dtype=np.float64), np.asarray(digits[:T])
    p = schedule.probs(T)
    y_pre = (digits >= 5).astype(np.int64)
    y = np.where(_stream(seed, _LABEL).random(T) < LABEL_NOISE, 1 - y_pre, y_pre)
    flip = _stream(seed, _SPURIOUS).random(T) < p
    color = np.where(flip, 1 - y, y)
    if downsample:
        images = downsample2x(images)
    out = np.zeros((T, 3) + images.shape[1:])
    out[:, 0] = images * (color == 1)[:, None, None]
    out[:, 1] = images * (color == 0)[:, None, None]
    return LabeledSequence(out, y, p, color)


# ---------------------------------------------------------------- sequence files

def write_sequence(path, seq: LabeledSequence) -> None:
    """One JSON header line, then ``label,domain,x0,x1,...`` records (shortest round-trip floats)."""
    flat = seq.inputs.reshape(len(seq), -1)
    header = {"schema": SEQUENCE_SCHEMA, "version": SEQUENCE_VERSION,
              "shape": list(seq.inputs.shape[1:]), "columns": ["label", "domain"]
              + [f"x{i}" for i in range(flat.shape[1])]}
    lines = [json.dumps(header, sort_keys=True)]
    for y, d, row in zip(seq.labels, seq.domain_trace, flat):
        lines.append(",".join([str(int(y)), repr(float(d))] + [repr(float(v)) for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_sequence(path) -> LabeledSequence:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty sequence file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}:1: header is not JSON ({e.msg})") from None
    if header.get("schema") != SEQUENCE_SCHEMA or header.get("version") != SEQUENCE_VERSION:
        raise ValueError(f"{path}:1: not a {SEQUENCE_SCHEMA} v{SEQUENCE_VERSION} file")
    ncol = len(header["columns"])
    labels, domains, rows = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != ncol:
            raise ValueError(f"{path}:{lineno}: expected {ncol} fields, got {len(parts)}")
        try:
            labels.append(int(parts[0]))
            domains.append(float(parts[1]))
            rows.append([float(v) for v in parts[2:]])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: malformed record") from None
    if not rows:
        raise ValueError(f"{path}: no records")
    inputs = np.array(rows).reshape([len(rows)] + header["shape"])
    return LabeledSequence(inputs, np.array(labels), np.array(domains))
