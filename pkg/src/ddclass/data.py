"""Binary tensor containers, labeled datasets, splitting and synthetic data.

DTEN container layout (all integers little-endian)::

    offset 0   4 bytes   magic b"DTEN"
    offset 4   1 byte    version (1)
    offset 5   1 byte    dtype code (1 = float32, 2 = uint32)
    offset 6   1 byte    rank r (>= 1)
    offset 7   4*r bytes extents, uint32 each (>= 1)
    then       payload, row-major, prod(extents) * 4 bytes

DPRM parameter checkpoints are b"DPRM" followed by records of
(uint32 name length, UTF-8 name, DTEN container) until end of file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .decomposition import parse_grid, plan_grid
from .errors import ContractError, FormatError, ShapeError

MAGIC = b"DTEN"
PARAM_MAGIC = b"DPRM"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<u4")}
CODES = {np.dtype(np.float32): 1, np.dtype(np.uint32): 2}


def encode_container(array) -> bytes:
    array = np.asarray(array)
    code = CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise ContractError(f"DTEN stores float32 or uint32 only, got {array.dtype}")
    if array.ndim < 1 or array.ndim > 255 or any(n < 1 for n in array.shape):
        raise ContractError(f"cannot store shape {array.shape}")
    header = MAGIC + bytes([VERSION, code, array.ndim])
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=DTYPES[code]).tobytes()


def decode_container(buf, offset: int = 0):
    """Parse one container starting at `offset`; returns ``(array, end offset)``."""
    buf = memoryview(buf)
    end = len(buf)
    if end - offset < 7:
        raise FormatError("truncated container header", end)
    if bytes(buf[offset:offset + 4]) != MAGIC:
        raise FormatError("bad magic, expected b'DTEN'", offset)
    if buf[offset + 4] != VERSION:
        raise FormatError(f"unsupported version {buf[offset + 4]}", offset + 4)
    code = buf[offset + 5]
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset + 5)
    rank = buf[offset + 6]
    if rank < 1:
        raise FormatError("rank must be >= 1", offset + 6)
    pos = offset + 7
    if end - pos < 4 * rank:
        raise FormatError(f"truncated extents (rank {rank})", end)
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    for i, n in enumerate(shape):
        if n < 1:
            raise FormatError("zero extent", pos + 4 * i)
    pos += 4 * rank
    dtype = DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if end - pos < nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes, have {end - pos}", end)
    array = np.frombuffer(buf[pos:pos + nbytes], dtype=dtype).reshape(shape)
    return array.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def save_container(path, array) -> None:
    Path(path).write_bytes(encode_container(array))


def load_container(path) -> np.ndarray:
    data = Path(path).read_bytes()
    array, end = decode_container(data)
    if end != len(data):
        raise FormatError("trailing bytes after container", end)
    return array


def read_header(path) -> dict:
    """Header fields of a DTEN file without materializing the payload check."""
    data = Path(path).read_bytes()
    array, _ = decode_container(data)
    return {
        "magic": MAGIC.decode(),
        "version": VERSION,
        "dtype": {1: "float32", 2: "uint32"}[CODES[array.dtype]],
        "rank": array.ndim,
        "extents": list(array.shape),
        "payload_bytes": array.nbytes,
    }


def encode_params(params: dict) -> bytes:
    parts = [PARAM_MAGIC]
    for name, value in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(encode_container(value))
    return b"".join(parts)


def decode_params(buf) -> dict:
    buf = memoryview(buf)
    if bytes(buf[:4]) != PARAM_MAGIC:
        raise FormatError("bad magic, expected b'DPRM'", 0)
    out = {}
    pos = 4
    while pos < len(buf):
        if len(buf) - pos < 4:
            raise FormatError("truncated record name length", len(buf))
        (size,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if len(buf) - pos < size:
            raise FormatError("truncated record name", len(buf))
        try:
            name = bytes(buf[pos:pos + size]).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("record name is not valid UTF-8", pos) from None
        pos += size
        out[name], pos = decode_container(buf, pos)
    return out


def save_params(path, params: dict) -> None:
    Path(path).write_bytes(encode_params(params))


def load_params(path) -> dict:
    return decode_params(Path(path).read_bytes())


@dataclass
class LabeledDataset:
    images: np.ndarray       # (n, C, spatial...), float32
    labels: np.ndarray       # (n,), uint32
    num_classes: int
    split: str = "all"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        if self.images.ndim < 3:
            raise ShapeError(f"images must be (n, C, spatial...), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ShapeError(f"{self.labels.shape} labels for {self.images.shape[0]} images")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise ContractError(f"labels must be < K = {self.num_classes}")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx, split: str | None = None) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes,
                              split or self.split, dict(self.meta))


def save_dataset(prefix, ds: LabeledDataset) -> None:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    save_container(f"{prefix}.images.dten", ds.images)
    save_container(f"{prefix}.labels.dten", ds.labels)
    side = {"num_classes": ds.num_classes, "split": ds.split, "meta": ds.meta}
    Path(f"{prefix}.json").write_text(json.dumps(side, indent=2, sort_keys=True))


def load_dataset(prefix) -> LabeledDataset:
    images = load_container(f"{prefix}.images.dten")
    labels = load_container(f"{prefix}.labels.dten")
    side_path = Path(f"{prefix}.json")
    if side_path.exists():
        side = json.loads(side_path.read_text())
    else:
        side = {"num_classes": int(labels.max()) + 1 if labels.size else 1}
    return LabeledDataset(images, labels, int(side["num_classes"]), side.get("split", "all"),
                          side.get("meta", {}))


def split_train_val(ds: LabeledDataset, ratio: float = 0.8, seed: int = 0):
    """Stratified shuffled split.

    The training share ``round(ratio * n)`` is distributed over classes by
    largest remainder, so each class gets ``floor`` or ``ceil`` of
    ``ratio * n_j``.
    """
    if not 0.0 < ratio < 1.0:
        raise ContractError(f"split ratio must lie in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    labels = ds.labels.astype(np.int64)
    counts = np.bincount(labels, minlength=ds.num_classes)
    exact = ratio * counts
    take = np.floor(exact).astype(np.int64)
    extra = int(round(ratio * len(ds))) - int(take.sum())
    frac = exact - take
    order = sorted(range(ds.num_classes), key=lambda j: (-frac[j], j))
    for j in order[:max(extra, 0)]:
        if take[j] < counts[j]:
            take[j] += 1
    train, val = [], []
    for j in range(ds.num_classes):
        if counts[j] == 0:
            continue
        if take[j] == 0:
            raise ContractError(f"split would leave class {j} without training samples")
        idx = rng.permutation(np.flatnonzero(labels == j))
        train.append(idx[:take[j]])
        val.append(idx[take[j]:])
    train_idx = np.sort(np.concatenate(train)) if train else np.zeros(0, np.int64)
    val_idx = np.sort(np.concatenate(val)) if val else np.zeros(0, np.int64)
    return ds.subset(train_idx, "train"), ds.subset(val_idx, "val")


# --- synthetic generators ----------------------------------------------------

def _balanced_labels(rng, count, k):
    return rng.permutation(np.arange(count) % k)


def _bumps(rng, shape, n_bumps, width):
    """Smooth random pattern: a few signed Gaussian bumps, scaled to max |.| = 1."""
    grids = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in shape), indexing="ij")
    out = np.zeros(shape)
    for _ in range(n_bumps):
        center = [rng.uniform(0, s - 1) for s in shape]
        sign = rng.choice([-1.0, 1.0])
        r2 = sum((g - c) ** 2 for g, c in zip(grids, center))
        out += sign * np.exp(-r2 / (2.0 * width ** 2))
    return out / max(np.abs(out).max(), 1e-12)


def _smooth_field(rng, shape, n_waves=4):
    """Low-frequency random field with values roughly in [-1, 1]."""
    grids = np.meshgrid(*(np.linspace(0, 1, s) for s in shape), indexing="ij")
    out = np.zeros(shape)
    for _ in range(n_waves):
        freq = rng.uniform(0.5, 2.0, size=len(shape))
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(2 * np.pi * sum(f * g for f, g in zip(freq, grids)) + phase)
    return out / n_waves


def _gaussian_classes(rng, count, shape, k, channels, separation=0.3, noise=0.05):
    full = (channels,) + shape
    signs = rng.choice([-1.0, 1.0], size=(k,) + full)
    means = 0.5 + 0.5 * separation * signs
    labels = _balanced_labels(rng, count, k)
    images = means[labels] + noise * rng.standard_normal((count,) + full)
    return images, labels


def _tile_separable(rng, count, shape, k, channels, grid=None, amplitude=0.2, noise=0.15,
                    global_noise=0.15, jitter=1, signal_tile=None, bumps=3):
    grid = parse_grid(grid) if isinstance(grid, str) else tuple(grid or (2,) * len(shape))
    plan = plan_grid(shape, grid)
    templates = []
    where = []
    for j in range(k):
        t = plan.tiles[(j % plan.n) if signal_tile is None else int(signal_tile)]
        width = max(1.0, min(t.extents) / 6.0)
        templates.append(_bumps(rng, t.extents, bumps, width))
        where.append(t)
    labels = _balanced_labels(rng, count, k)
    images = np.full((count, channels) + shape, 0.5)
    images += noise * rng.standard_normal(images.shape)
    for i, j in enumerate(labels):
        images[i] += global_noise * _smooth_field(rng, shape)
        shift = tuple(rng.integers(-jitter, jitter + 1, size=len(shape))) if jitter else (0,) * len(shape)
        patch = np.roll(templates[j], shift, axis=tuple(range(len(shape))))
        images[(i, slice(None)) + where[j].slices] += amplitude * patch
    return images, labels


def _striped_vs_checker(rng, count, shape, k, channels, noise=0.1, contrast=0.4):
    if k != 2:
        raise ContractError("striped-vs-checker is a two-class task (K=2)")
    labels = _balanced_labels(rng, count, 2)
    grids = np.meshgrid(*(np.arange(s) for s in shape), indexing="ij")
    images = np.empty((count, channels) + shape)
    for i, j in enumerate(labels):
        period = int(rng.integers(2, 5))
        phase = int(rng.integers(0, period))
        if j == 0:
            axis = int(rng.integers(0, len(shape)))
            pattern = ((grids[axis] + phase) // period) % 2
        else:
            pattern = (sum((g + phase) // period for g in grids)) % 2
        images[i] = 0.5 + contrast * (pattern - 0.5)
    images += noise * rng.standard_normal(images.shape)
    return images, labels


def _volumetric_blob(rng, count, shape, k, channels, amplitude=0.4, noise=0.1, jitter=1):
    if len(shape) != 3:
        raise ContractError(f"volumetric-blob needs a 3D shape, got {shape}")
    grids = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in shape), indexing="ij")
    centers = [[rng.uniform(0.2 * s, 0.8 * s) for s in shape] for _ in range(k)]
    radius = max(1.0, min(shape) / 5.0)
    labels = _balanced_labels(rng, count, k)
    images = np.full((count, channels) + shape, 0.5)
    images += noise * rng.standard_normal(images.shape)
    for i, j in enumerate(labels):
        c = [cc + rng.uniform(-jitter, jitter) for cc in centers[j]]
        r2 = sum((g - cc) ** 2 for g, cc in zip(grids, c))
        images[i] += amplitude * np.exp(-r2 / (2 * radius ** 2))
    return images, labels


GENERATORS = {
    "gaussian-classes": _gaussian_classes,
    "tile-separable": _tile_separable,
    "striped-vs-checker": _striped_vs_checker,
    "volumetric-blob": _volumetric_blob,
}


def gen_synthetic(kind: str, count: int, shape, num_classes: int, seed: int = 0,
                  channels: int = 1, **params) -> LabeledDataset:
    """Deterministic synthetic dataset with values clipped to [0, 1].

    The generator kind, arguments and seed are recorded in ``meta``.
    """
    try:
        gen = GENERATORS[kind]
    except KeyError:
        raise ContractError(f"unknown synthetic kind {kind!r}; choose from {sorted(GENERATORS)}") from None
    shape = tuple(int(s) for s in shape)
    if count < 1 or num_classes < 1:
        raise ContractError("count and K must be >= 1")
    rng = np.random.default_rng(seed)
    images, labels = gen(rng, count, shape, num_classes, channels, **params)
    meta = {"kind": kind, "count": count, "shape": list(shape), "num_classes": num_classes,
            "seed": seed, "channels": channels, "params": {k: v for k, v in params.items()}}
    return LabeledDataset(np.clip(images, 0.0, 1.0), labels, num_classes, "all", meta)
