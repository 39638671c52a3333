"""Pixel datasets: assembly from band grids, synthetic generation, PCA, file I/O.

A dataset is a float32 tensor ``X`` of shape ``(i, t, b)`` (samples, time
steps, bands) plus integer labels and an ordered list of class names.
Assembled from real band grids, the five bands per date are
B2, B3, B4, B8 and NDVI.
"""
from __future__ import annotations

import csv
import io
import math
import re
import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import CorruptionError, DataError, EmptyDatasetError, FormatError, ParameterError
from .tensor import RngState, svd_covariance

BAND_NAMES = ("B2", "B3", "B4", "B8")

# Labelled-pixel counts of the 15-class reference survey (92,116 pixels).
REFERENCE_CLASS_COUNTS = {
    "Tomatoes": 3020,
    "Artificials": 9343,
    "Trees": 7384,
    "Rye": 4382,
    "Wheat": 12826,
    "Soya": 5836,
    "Apple": 849,
    "Pear": 495,
    "Temp Grass": 1744,
    "Water": 2451,
    "Lucerne": 17942,
    "Durum Wheat": 1188,
    "Vineyard": 6110,
    "Barley": 2549,
    "Maize": 15997,
}


@dataclass
class PixelDataset:
    X: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    provenance: str = ""

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.X.ndim != 3:
            raise DataError(f"X must be (i, t, b), got {self.X.shape}")
        if self.labels.shape != (self.X.shape[0],):
            raise DataError("one label per sample required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError("label outside the class catalog")

    def __len__(self):
        return self.X.shape[0]

    @property
    def t(self) -> int:
        return self.X.shape[1]

    @property
    def b(self) -> int:
        return self.X.shape[2]

    @property
    def K(self) -> int:
        return len(self.class_names)

    def subset(self, idx) -> "PixelDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return PixelDataset(self.X[idx], self.labels[idx], list(self.class_names), self.provenance)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.K)

    def equals(self, other: "PixelDataset") -> bool:
        """Bit-exact comparison of contents."""
        return (
            self.X.shape == other.X.shape
            and self.X.tobytes() == other.X.tobytes()
            and np.array_equal(self.labels, other.labels)
            and self.class_names == other.class_names
        )


# ---------------------------------------------------------------------------
# band grids
# ---------------------------------------------------------------------------


def ndvi(b8, b4):
    """(NIR - red) / (NIR + red) per cell; cells where both are 0 give 0."""
    b8 = np.asarray(b8, dtype=np.float64)
    b4 = np.asarray(b4, dtype=np.float64)
    if b8.shape != b4.shape:
        raise DataError(f"band shapes differ: {b8.shape} vs {b4.shape}")
    num = b8 - b4
    den = b8 + b4
    out = np.zeros_like(den)
    np.divide(num, den, out=out, where=den != 0)
    return np.clip(out, -1.0, 1.0)


@dataclass
class BandStack:
    """The four 10 m bands of one acquisition date."""

    date: object
    bands: dict[str, np.ndarray]

    def __post_init__(self):
        missing = [b for b in BAND_NAMES if b not in self.bands]
        if missing:
            raise DataError(f"band stack lacks {missing}")
        shapes = {np.shape(self.bands[b]) for b in BAND_NAMES}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise DataError("all bands must be 2-D grids of one shape")

    @property
    def shape(self):
        return np.shape(self.bands["B2"])


@dataclass
class LabelMask:
    """Class id per cell, -1 for unlabelled cells."""

    grid: np.ndarray
    class_names: list[str] = field(default_factory=list)


def assemble_dataset(stacks: list[BandStack], mask: LabelMask, provenance: str = "") -> PixelDataset:
    """One ``(t, 5)`` sample per labelled cell, scanning the grid row-major.

    Row ``j`` of a sample is date ``j``; columns are B2, B3, B4, B8, NDVI.
    """
    if not stacks:
        raise DataError("need at least one acquisition date")
    grid = np.asarray(mask.grid)
    for s in stacks:
        if s.shape != grid.shape:
            raise DataError(f"band grid {s.shape} does not match mask {grid.shape}")
    dates = [s.date for s in stacks]
    if any(not a < b for a, b in zip(dates, dates[1:])):
        raise DataError("acquisition dates must be strictly increasing")
    rows, cols = np.nonzero(grid >= 0)
    if rows.size == 0:
        raise EmptyDatasetError("mask has no labelled cells")
    K = len(mask.class_names) if mask.class_names else int(grid.max()) + 1
    names = list(mask.class_names) if mask.class_names else [str(k) for k in range(K)]
    X = np.empty((rows.size, len(stacks), 5), dtype=np.float32)
    for j, s in enumerate(stacks):
        for k, band in enumerate(BAND_NAMES):
            X[:, j, k] = np.asarray(s.bands[band])[rows, cols]
        X[:, j, 4] = ndvi(s.bands["B8"], s.bands["B4"])[rows, cols]
    return PixelDataset(X, grid[rows, cols], names, provenance)


def stacks_from_arrays(arrays, dates=None) -> list[BandStack]:
    """Build band stacks from ``{"B2": (t, h, w), ...}`` arrays (e.g. an ``.npz``)."""
    t = np.shape(arrays["B2"])[0]
    dates = list(range(t)) if dates is None else list(dates)
    return [BandStack(dates[j], {b: np.asarray(arrays[b])[j] for b in BAND_NAMES}) for j in range(t)]


# ---------------------------------------------------------------------------
# synthetic phenology
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    """Recipe for a synthetic dataset.

    Each class owns one seasonal curve per band,
    ``amp * sin(2*pi*(j + phase) / t) + offset``, with the triple drawn once
    per (class, band) from ``seed``.  Samples add Gaussian noise of std
    ``noise``.  ``shift_jitter`` additionally moves each sample's season by
    a uniform offset in ``[-shift_jitter, shift_jitter]`` time steps, which
    mimics varying sowing dates.  Offsets are drawn from
    ``[-offset_spread, offset_spread]``; a small spread makes classes differ
    by seasonal shape rather than by mean level.
    """

    counts: list[int]
    t: int = 9
    b: int = 5
    noise: float = 0.15
    shift_jitter: float = 0.0
    offset_spread: float = 1.0
    seed: int = 42
    class_names: list[str] | None = None

    def __post_init__(self):
        if not self.counts or any(int(c) <= 0 for c in self.counts):
            raise ParameterError("every class needs a positive sample count")
        if self.noise < 0 or self.shift_jitter < 0 or self.offset_spread < 0:
            raise ParameterError("noise, shift_jitter and offset_spread must be nonnegative")
        if self.t < 1 or self.b < 1:
            raise ParameterError("t and b must be positive")
        if self.class_names is not None and len(self.class_names) != len(self.counts):
            raise ParameterError("one name per class required")

    @property
    def K(self) -> int:
        return len(self.counts)

    @classmethod
    def uniform(cls, K: int, per_class: int, **kw) -> "SynthSpec":
        return cls(counts=[per_class] * K, **kw)

    @classmethod
    def reference_proportions(cls, total: int = 92116, **kw) -> "SynthSpec":
        """Per-class counts in the reference-survey proportions."""
        names = list(REFERENCE_CLASS_COUNTS)
        counts = largest_remainder(list(REFERENCE_CLASS_COUNTS.values()), Fraction(total, 92116))
        return cls(counts=counts, class_names=names, **kw)


def largest_remainder(counts, fraction, total=None) -> list[int]:
    """Integer allocation of ``fraction * counts[k]`` with an exact grand total.

    Each class gets the floor of its quota; the remaining units (so that
    the grand total equals ``round(fraction * sum(counts))``, halves rounded
    up) go to the largest fractional remainders, ties to the larger class
    and then the lower index.
    """
    fraction = Fraction(fraction) if not isinstance(fraction, float) else Fraction(str(fraction))
    quotas = [fraction * int(c) for c in counts]
    alloc = [math.floor(q) for q in quotas]
    if total is None:
        total = math.floor(fraction * sum(int(c) for c in counts) + Fraction(1, 2))
    order = sorted(range(len(counts)), key=lambda k: (-(quotas[k] - alloc[k]), -int(counts[k]), k))
    for k in order[: total - sum(alloc)]:
        alloc[k] += 1
    return alloc


def synth_templates(spec: SynthSpec) -> np.ndarray:
    """Class parameters ``(K, b, 3)`` holding (amp, phase, offset)."""
    gen = RngState(spec.seed).generator
    amp = gen.uniform(0.5, 1.5, size=(spec.K, spec.b))
    phase = gen.uniform(0.0, spec.t, size=(spec.K, spec.b))
    offset = gen.uniform(-spec.offset_spread, spec.offset_spread, size=(spec.K, spec.b))
    return np.stack([amp, phase, offset], axis=-1)


def _curves(params, t, shift):
    """Evaluate curves at steps 0..t-1.  ``params`` (..., b, 3), ``shift`` (...,)."""
    j = np.arange(t, dtype=np.float64)
    amp, phase, offset = params[..., 0], params[..., 1], params[..., 2]
    arg = (j[:, None] + phase[..., None, :] + np.asarray(shift)[..., None, None]) * (2 * np.pi / t)
    return amp[..., None, :] * np.sin(arg) + offset[..., None, :]


def synth_generate(spec: SynthSpec) -> PixelDataset:
    """Seeded synthetic dataset; samples are grouped by class."""
    params = synth_templates(spec)
    gen = RngState(spec.seed).spawn().generator
    xs, ys = [], []
    for k, n in enumerate(spec.counts):
        n = int(n)
        shift = gen.uniform(-spec.shift_jitter, spec.shift_jitter, size=n) if spec.shift_jitter else np.zeros(n)
        base = _curves(np.broadcast_to(params[k], (n, spec.b, 3)), spec.t, shift)
        noise = gen.standard_normal(base.shape) * spec.noise if spec.noise else 0.0
        xs.append(base + noise)
        ys.append(np.full(n, k))
    names = spec.class_names or [f"class_{k:02d}" for k in range(spec.K)]
    prov = (f"synthetic K={spec.K} noise={spec.noise} shift_jitter={spec.shift_jitter} "
            f"offset_spread={spec.offset_spread} seed={spec.seed}")
    return PixelDataset(np.concatenate(xs), np.concatenate(ys), list(names), prov)


def synth_class_templates(spec: SynthSpec) -> np.ndarray:
    """Noise-free class curves, shape ``(K, t, b)``."""
    return _curves(synth_templates(spec), spec.t, np.zeros(spec.K)).astype(np.float32)


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass
class PcaResult:
    projected: np.ndarray  # (i, n_components)
    ratios: np.ndarray  # explained-variance ratio of every component, descending
    components: np.ndarray  # (t*b, n_components)

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.ratios)


def standardize_features(F: np.ndarray) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    mu = F.mean(axis=0)
    sd = F.std(axis=0)
    sd[sd == 0] = 1.0
    return (F - mu) / sd


def pca_project(dataset, n_components: int = 3, standardize: bool = True) -> PcaResult:
    """Project flattened ``t*b`` feature vectors onto the leading principal axes."""
    X = dataset.X if isinstance(dataset, PixelDataset) else np.asarray(dataset)
    F = X.reshape(X.shape[0], -1).astype(np.float64)
    d = F.shape[1]
    if not 1 <= n_components <= d:
        raise ParameterError(f"n_components must be in [1, {d}], got {n_components}")
    if standardize:
        F = standardize_features(F)
    components, variances = svd_covariance(F)
    total = variances.sum()
    ratios = variances / total if total > 0 else np.zeros_like(variances)
    W = components[:, :n_components]
    projected = (F - F.mean(axis=0)) @ W
    return PcaResult(projected, ratios, W)


def pca_csv(result: PcaResult, labels) -> tuple[str, str]:
    """``(points_csv, ratios_csv)`` texts for external plotting."""
    pts = io.StringIO()
    w = csv.writer(pts, lineterminator="\n")
    n = result.projected.shape[1]
    w.writerow([*(f"c{k + 1}" for k in range(n)), "label"])
    for row, lab in zip(result.projected, labels):
        w.writerow([*(repr(float(v)) for v in row), int(lab)])
    rat = io.StringIO()
    w = csv.writer(rat, lineterminator="\n")
    w.writerow(["component", "ratio", "cumulative"])
    for k, (r, c) in enumerate(zip(result.ratios, result.cumulative)):
        w.writerow([k + 1, repr(float(r)), repr(float(c))])
    return pts.getvalue(), rat.getvalue()


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"PXRC"
DATASET_VERSION = 1


def dataset_bytes(ds: PixelDataset) -> bytes:
    i, t, b = ds.X.shape
    if ds.K >= 2**16:
        raise DataError("too many classes for the u16 label format")
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<HIIIH", DATASET_VERSION, i, t, b, ds.K))
    for name in ds.class_names:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
    buf.write(ds.X.astype("<f4").tobytes())
    buf.write(ds.labels.astype("<u2").tobytes())
    return buf.getvalue()


def write_dataset(ds: PixelDataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


def dataset_from_bytes(data: bytes) -> PixelDataset:
    if len(data) < 4 or data[:4] != DATASET_MAGIC:
        raise FormatError("not a PXRC dataset file")
    head = struct.calcsize("<HIIIH")
    if len(data) < 4 + head:
        raise CorruptionError("dataset header truncated")
    version, i, t, b, K = struct.unpack_from("<HIIIH", data, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    pos = 4 + head
    names = []
    for _ in range(K):
        if pos + 2 > len(data):
            raise CorruptionError("class table truncated")
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + n > len(data):
            raise CorruptionError("class table truncated")
        names.append(data[pos:pos + n].decode("utf-8"))
        pos += n
    need = pos + 4 * i * t * b + 2 * i
    if len(data) < need:
        raise CorruptionError(f"dataset truncated: {len(data)} of {need} bytes")
    if len(data) > need:
        raise CorruptionError("trailing bytes after dataset")
    X = np.frombuffer(data, dtype="<f4", count=i * t * b, offset=pos).reshape(i, t, b)
    labels = np.frombuffer(data, dtype="<u2", count=i, offset=pos + 4 * i * t * b)
    return PixelDataset(X.astype(np.float32), labels.astype(np.int64), names)


def read_dataset(path) -> PixelDataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


_COL = re.compile(r"^t(\d+)b(\d+)$")


def write_csv_dataset(ds: PixelDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*(f"t{j}b{k}" for j in range(ds.t) for k in range(ds.b)), "label"])
        flat = ds.X.reshape(len(ds), -1)
        for row, lab in zip(flat, ds.labels):
            w.writerow([*(repr(float(v)) for v in row), ds.class_names[lab]])


def read_csv_dataset(path, t: int | None = None, class_names=None) -> PixelDataset:
    """Import a CSV with ``t*b`` feature columns and a final ``label`` column.

    Feature columns named ``t{j}b{k}`` fix ``t`` and ``b``; otherwise pass
    ``t``.  Labels may be class names or integer ids.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2:
        raise EmptyDatasetError("CSV has no data rows")
    header = rows[0]
    if header[-1] != "label":
        raise FormatError("last CSV column must be 'label'")
    nfeat = len(header) - 1
    m = [_COL.match(h) for h in header[:-1]]
    if all(m):
        t = max(int(x.group(1)) for x in m) + 1
    if t is None or nfeat % t:
        raise FormatError("cannot infer (t, b) from the CSV header; pass t")
    b = nfeat // t
    feats = np.array([[float(v) for v in r[:-1]] for r in rows[1:]], dtype=np.float32)
    raw = [r[-1] for r in rows[1:]]
    if class_names is None:
        if all(v.lstrip("-").isdigit() for v in raw):
            ids = np.array([int(v) for v in raw])
            class_names = [str(k) for k in range(int(ids.max()) + 1)]
        else:
            class_names = sorted(set(raw))
            ids = np.array([class_names.index(v) for v in raw])
    else:
        lookup = {n: k for k, n in enumerate(class_names)}
        ids = np.array([lookup[v] if v in lookup else int(v) for v in raw])
    return PixelDataset(feats.reshape(-1, t, b), ids, list(class_names), f"csv:{path}")
