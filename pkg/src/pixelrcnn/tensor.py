"""Dense tensor primitives.

Tensors are plain :class:`numpy.ndarray` objects in C (row-major) order.
Training runs in float32; gradient checks switch to float64.  This module
adds the handful of checked primitives the rest of the package relies on:
a shape-checked ``matmul``, the covariance spectrum used by PCA, and seeded
parameter initialisers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError, ParameterError, ShapeError

DEFAULT_DTYPE = np.float32

__all__ = [
    "DEFAULT_DTYPE",
    "RngState",
    "matmul",
    "reshape",
    "svd_covariance",
    "seeded_init",
    "glorot_limit",
]


@dataclass
class RngState:
    """Seeded random stream.

    Backed by numpy's PCG64 bit generator, whose output for a given seed is
    identical on every platform numpy supports.  Consumers draw from
    ``generator`` in a fixed call order, so one seed pins every random
    decision of a run.
    """

    seed: int
    algorithm: str = "PCG64"
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not 0 <= int(self.seed) < 2**64:
            raise ParameterError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.algorithm != "PCG64":
            raise ParameterError(f"unsupported PRNG {self.algorithm!r}")
        self.generator = np.random.Generator(np.random.PCG64(int(self.seed)))

    def spawn(self) -> "RngState":
        """Derive an independent child stream, deterministically."""
        child_seed = int(self.generator.integers(0, 2**63 - 1))
        return RngState(child_seed)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a ``(m, k)`` and a ``(k, n)`` array."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def reshape(x: np.ndarray, shape) -> np.ndarray:
    """Reinterpret ``x`` under a new shape without copying or reordering."""
    x = np.asarray(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot view {x.shape} as {shape}")
    if not x.flags.c_contiguous:
        raise ShapeError("reshape requires a C-contiguous array")
    out = x.view()
    out.shape = shape
    return out


def svd_covariance(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Principal axes and variances of the rows of ``x``.

    The data are mean-centred here and decomposed with an SVD, so the
    sample covariance is never formed.  Returns ``(components, variances)``
    where column ``j`` of ``components`` is the j-th principal axis and
    ``variances`` are the matching covariance eigenvalues (``n - 1``
    normalisation), sorted in descending order.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected an (n, d) matrix, got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise InsufficientDataError(f"need at least 2 samples, got {n}")
    centered = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=True)
    variances = np.zeros(d)
    variances[: s.size] = s**2 / (n - 1)
    components = vt.T.copy()
    # Sign convention: largest-magnitude loading of each axis is positive.
    pivots = np.argmax(np.abs(components), axis=0)
    signs = np.sign(components[pivots, np.arange(d)])
    signs[signs == 0] = 1.0
    components *= signs
    return components, variances


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def seeded_init(rng: RngState, kind, shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Draw an initial parameter tensor.

    ``kind`` is either ``("uniform", lo, hi)`` or ``"orthogonal"``.
    """
    shape = tuple(int(s) for s in shape)
    gen = rng.generator
    if kind == "orthogonal" or (isinstance(kind, tuple) and kind[0] == "orthogonal"):
        if len(shape) != 2:
            raise ShapeError(f"orthogonal init needs a 2-D shape, got {shape}")
        rows, cols = shape
        a = gen.standard_normal((max(rows, cols), min(rows, cols)))
        q, r = np.linalg.qr(a)
        q *= np.sign(np.diag(r))
        if rows < cols:
            q = q.T
        return np.ascontiguousarray(q[:rows, :cols], dtype=dtype)
    if isinstance(kind, tuple) and kind[0] == "uniform":
        _, lo, hi = kind
        if not lo < hi:
            raise ParameterError(f"uniform init needs lo < hi, got ({lo}, {hi})")
        out = gen.uniform(lo, hi, size=shape).astype(dtype)
        # float32 rounding can land exactly on hi
        np.minimum(out, np.nextafter(dtype(hi), dtype(lo)), out=out)
        return out
    raise ParameterError(f"unknown init kind {kind!r}")
