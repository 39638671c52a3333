"""Network layers of the recurrent-convolutional pixel classifier and the model that chains them.

Pipeline for one pixel ``X`` of shape ``(t, b)``::

    peephole LSTM      (t, b)        -> (t, u)
    dropout            (t, u)        -> (t, u)         train mode only
    time-distributed   (t, u)        -> (t, d_out)     shared affine map
    reshape            (t, d_out)    -> (t, d_out, 1)
    conv1 + ReLU       -> (t-f1+1, d_out-f1+1, n1)
    conv2 + ReLU       -> (.. -f2+1, .. -f2+1, n2)
    flatten + softmax  -> (K,)

Every public function takes either a single sample or a leading batch axis.
Gradients are exact, hand-derived, and checked against finite differences
in the test-suite.
"""
from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import (
    CorruptionError,
    FormatError,
    NumericError,
    ParameterError,
    ShapeError,
    UsageError,
)
from .tensor import DEFAULT_DTYPE, RngState, glorot_limit, seeded_init

GATES = ("i", "f", "g", "o")


# ---------------------------------------------------------------------------
# basic recurrent cell
# ---------------------------------------------------------------------------


@dataclass
class BasicRnnCell:
    W_x: np.ndarray  # (b, u)
    W_y: np.ndarray  # (u, u)
    bias: np.ndarray  # (u,)

    def __post_init__(self):
        b, u = np.shape(self.W_x)
        if u < 1 or np.shape(self.W_y) != (u, u) or np.shape(self.bias) != (u,):
            raise ShapeError("inconsistent basic RNN cell shapes")


def basic_rnn_step(cell: BasicRnnCell, x_t, y_prev):
    """One step of the plain tanh recurrence."""
    x_t = np.asarray(x_t)
    y_prev = np.asarray(y_prev)
    if x_t.shape[-1] != cell.W_x.shape[0] or y_prev.shape[-1] != cell.W_y.shape[0]:
        raise ShapeError(f"input {x_t.shape} / state {y_prev.shape} do not fit the cell")
    return np.tanh(x_t @ cell.W_x + y_prev @ cell.W_y + cell.bias)


# ---------------------------------------------------------------------------
# peephole LSTM
# ---------------------------------------------------------------------------


@dataclass
class PeepholeLstmCell:
    """LSTM cell with optional diagonal peephole connections.

    ``W_x`` (b, 4u) and ``W_h`` (u, 4u) hold the four gate blocks in the
    order i, f, g, o; ``W_c`` (3, u) holds the peephole diagonals for the
    i, f and o gates, or is ``None`` when peepholes are disabled.
    """

    W_x: np.ndarray
    W_h: np.ndarray
    bias: np.ndarray
    W_c: np.ndarray | None = None

    def __post_init__(self):
        u = self.W_h.shape[0]
        if u < 1 or self.W_h.shape != (u, 4 * u):
            raise ShapeError(f"recurrent weights must be (u, 4u), got {self.W_h.shape}")
        if self.W_x.ndim != 2 or self.W_x.shape[1] != 4 * u:
            raise ShapeError(f"input weights must be (b, {4 * u}), got {self.W_x.shape}")
        if self.bias.shape != (4 * u,):
            raise ShapeError(f"bias must be ({4 * u},), got {self.bias.shape}")
        if self.W_c is not None and self.W_c.shape != (3, u):
            raise ShapeError(f"peephole weights must be (3, {u}), got {self.W_c.shape}")

    @property
    def units(self) -> int:
        return self.W_h.shape[0]

    @property
    def peepholes_enabled(self) -> bool:
        return self.W_c is not None

    def gate(self, name):
        """Input weights, recurrent weights and bias of one gate."""
        k = GATES.index(name)
        u = self.units
        sl = slice(k * u, (k + 1) * u)
        return self.W_x[:, sl], self.W_h[:, sl], self.bias[sl]

    def _peep(self):
        if self.W_c is None:
            return np.zeros((3, self.units), dtype=self.W_h.dtype)
        return self.W_c


def lstm_step(cell: PeepholeLstmCell, x_t, h_prev, c_prev):
    """Advance the cell one time step; returns ``(y_t, h_t, c_t)`` with y == h.

    Gate order: input and forget gates read the previous cell state, the
    candidate is formed, the cell state is updated, and only then does the
    output gate read the *new* cell state.
    """
    x_t, h_prev, c_prev = (np.asarray(a) for a in (x_t, h_prev, c_prev))
    u = cell.units
    if x_t.shape[-1] != cell.W_x.shape[0] or h_prev.shape[-1] != u or c_prev.shape[-1] != u:
        raise ShapeError("lstm_step: input or state does not match the cell")
    peep = cell._peep()
    (Wxi, Whi, bi), (Wxf, Whf, bf), (Wxg, Whg, bg), (Wxo, Who, bo) = (
        cell.gate(g) for g in GATES
    )
    i = expit(c_prev * peep[0] + h_prev @ Whi + x_t @ Wxi + bi)
    f = expit(c_prev * peep[1] + h_prev @ Whf + x_t @ Wxf + bf)
    g = np.tanh(h_prev @ Whg + x_t @ Wxg + bg)
    c_t = f * c_prev + i * g
    o = expit(c_t * peep[2] + h_prev @ Who + x_t @ Wxo + bo)
    h_t = o * np.tanh(c_t)
    return h_t, h_t, c_t


def lstm_sequence_forward(cell: PeepholeLstmCell, X):
    """Run the cell over a ``(t, b)`` sequence from zero state; returns ``(t, u)``."""
    X = np.asarray(X)
    if X.ndim != 2:
        raise ShapeError(f"expected a (t, b) sequence, got {X.shape}")
    if X.shape[0] == 0:
        raise ShapeError("empty sequence")
    h = np.zeros(cell.units, dtype=X.dtype)
    c = np.zeros(cell.units, dtype=X.dtype)
    rows = []
    for x_t in X:
        y, h, c = lstm_step(cell, x_t, h, c)
        rows.append(y)
    return np.stack(rows)


# ---------------------------------------------------------------------------
# time-distributed dense, convolution, softmax head
# ---------------------------------------------------------------------------


@dataclass
class TimeDistributedDenseLayer:
    W: np.ndarray  # (u, d_out)
    B: np.ndarray  # (d_out,)


def time_distributed_dense(layer: TimeDistributedDenseLayer, Y_lstm):
    """Apply one affine map to every time step: ``Y @ W + B`` row by row."""
    Y_lstm = np.asarray(Y_lstm)
    if Y_lstm.shape[-1] != layer.W.shape[0]:
        raise ShapeError(f"TDD expects {layer.W.shape[0]} features, got {Y_lstm.shape[-1]}")
    return Y_lstm @ layer.W + layer.B


@dataclass
class Conv2dLayer:
    """Valid, stride-1 cross-correlation; filters laid out (f, f, c_in, n)."""

    W: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        if self.W.ndim != 4 or self.W.shape[0] != self.W.shape[1]:
            raise ShapeError(f"filters must be (f, f, c_in, n), got {self.W.shape}")
        if self.B.shape != (self.W.shape[3],):
            raise ShapeError("one bias per filter required")

    @property
    def size(self) -> int:
        return self.W.shape[0]


def _conv_check(layer: Conv2dLayer, x):
    f = layer.size
    if x.shape[-1] != layer.W.shape[2]:
        raise ShapeError(f"conv expects {layer.W.shape[2]} channels, got {x.shape[-1]}")
    if x.shape[-3] < f or x.shape[-2] < f:
        raise ShapeError(f"input {x.shape[-3:]} smaller than {f}x{f} filter")


def conv2d_relu_forward(layer: Conv2dLayer, Y):
    """``max(0, W * Y + B)`` for a ``(h, w, c_in)`` map or an ``(N, h, w, c_in)`` batch."""
    Y = np.asarray(Y)
    _conv_check(layer, Y)
    single = Y.ndim == 3
    x = np.ascontiguousarray(Y[None] if single else Y, dtype=layer.W.dtype)
    out = np.maximum(kernels.conv2d_forward(x, layer.W, layer.B), 0)
    return out[0] if single else out


@dataclass
class DenseSoftmaxHead:
    W: np.ndarray  # (d_in, K)
    B: np.ndarray  # (K,)


def softmax(scores):
    scores = np.asarray(scores)
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite class score")
    z = np.exp(scores - scores.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def dense_softmax(head: DenseSoftmaxHead, y_flat):
    y_flat = np.asarray(y_flat)
    if y_flat.shape[-1] != head.W.shape[0]:
        raise ShapeError(f"head expects {head.W.shape[0]} features, got {y_flat.shape[-1]}")
    return softmax(y_flat @ head.W + head.B)


def dropout_apply(x, p, mode, rng: RngState | None = None):
    """Inverted dropout.

    Returns ``(out, mask)`` with ``mask`` the 0/1 keep indicator; kept
    entries are scaled by ``1 / (1 - p)`` so the expectation is unchanged.
    """
    if not 0 <= p < 1:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    x = np.asarray(x)
    if mode == "eval" or p == 0:
        return x, np.ones_like(x)
    if mode != "train":
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise UsageError("train-mode dropout needs an RngState")
    mask = (rng.generator.random(x.shape) >= p).astype(x.dtype)
    return x * mask * x.dtype.type(1.0 / (1.0 - p)), mask


# ---------------------------------------------------------------------------
# the full model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    t: int = 9
    b: int = 5
    u: int = 32
    d_out: int = 9
    n1: int = 16
    f1: int = 3
    n2: int = 32
    f2: int = 7
    K: int = 15
    peepholes: bool = False
    tdd_relu: bool = False
    dropout_p: float = 0.2

    def __post_init__(self):
        for name in ("t", "b", "u", "d_out", "n1", "f1", "n2", "f2", "K"):
            if int(getattr(self, name)) < 1:
                raise ShapeError(f"{name} must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ParameterError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.t < self.f1 or self.d_out < self.f1:
            raise ShapeError(f"{self.t}x{self.d_out} canvas smaller than f1={self.f1}")
        h1, w1 = self.conv1_shape[:2]
        if h1 < self.f2 or w1 < self.f2:
            raise ShapeError(f"conv1 output {h1}x{w1} smaller than f2={self.f2}")

    @property
    def conv1_shape(self):
        return (self.t - self.f1 + 1, self.d_out - self.f1 + 1, self.n1)

    @property
    def conv2_shape(self):
        h1, w1, _ = self.conv1_shape
        return (h1 - self.f2 + 1, w1 - self.f2 + 1, self.n2)

    @property
    def flat_dim(self) -> int:
        return int(np.prod(self.conv2_shape))

    def shape_chain(self):
        """Per-sample tensor shapes from input to class probabilities."""
        return [
            ("input", (self.t, self.b)),
            ("lstm", (self.t, self.u)),
            ("tdd", (self.t, self.d_out)),
            ("reshape", (self.t, self.d_out, 1)),
            ("conv1", self.conv1_shape),
            ("conv2", self.conv2_shape),
            ("flatten", (self.flat_dim,)),
            ("softmax", (self.K,)),
        ]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


REFERENCE_CONFIG = ModelConfig()


@dataclass
class ForwardCache:
    X: np.ndarray
    mode: str
    version: int
    model_id: int
    gates: np.ndarray
    C: np.ndarray
    H: np.ndarray
    y_lstm: np.ndarray
    mask: np.ndarray | None
    y_drop: np.ndarray
    tdd_pre: np.ndarray
    y_timeD: np.ndarray
    conv1_in: np.ndarray
    conv1_pre: np.ndarray
    conv1_out: np.ndarray
    conv2_pre: np.ndarray
    conv2_out: np.ndarray
    flat: np.ndarray
    scores: np.ndarray
    probs: np.ndarray
    single: bool = False

    def shapes(self):
        """Per-sample shapes of the intermediates, in pipeline order."""
        s = slice(1, None)
        return [
            ("lstm", self.y_lstm.shape[s]),
            ("tdd", self.y_timeD.shape[s]),
            ("reshape", self.conv1_in.shape[s]),
            ("conv1", self.conv1_out.shape[s]),
            ("conv2", self.conv2_out.shape[s]),
            ("flatten", self.flat.shape[s]),
            ("softmax", self.probs.shape[s]),
        ]


@dataclass
class PixelRcnnModel:
    config: ModelConfig
    lstm: PeepholeLstmCell
    tdd: TimeDistributedDenseLayer
    conv1: Conv2dLayer
    conv2: Conv2dLayer
    head: DenseSoftmaxHead
    version: int = field(default=0, compare=False)

    @classmethod
    def init(cls, config: ModelConfig = REFERENCE_CONFIG, seed: int = 0, dtype=DEFAULT_DTYPE):
        """Seeded initialisation.

        Dense, TDD and conv weights: uniform Glorot.  Recurrent weights:
        one orthogonal ``u x u`` block per gate.  Biases zero except the
        forget gate (1.0).  Peephole diagonals start at zero.
        """
        cfg = config
        rng = RngState(seed)
        u, b = cfg.u, cfg.b
        lim = glorot_limit(b, u)
        W_x = np.concatenate(
            [seeded_init(rng, ("uniform", -lim, lim), (b, u), dtype) for _ in GATES], axis=1
        )
        W_h = np.concatenate([seeded_init(rng, "orthogonal", (u, u), dtype) for _ in GATES], axis=1)
        bias = np.zeros(4 * u, dtype=dtype)
        bias[u:2 * u] = 1.0
        W_c = np.zeros((3, u), dtype=dtype) if cfg.peepholes else None
        lim = glorot_limit(u, cfg.d_out)
        tdd = TimeDistributedDenseLayer(
            seeded_init(rng, ("uniform", -lim, lim), (u, cfg.d_out), dtype),
            np.zeros(cfg.d_out, dtype=dtype),
        )
        lim = glorot_limit(cfg.f1 * cfg.f1 * 1, cfg.f1 * cfg.f1 * cfg.n1)
        conv1 = Conv2dLayer(
            seeded_init(rng, ("uniform", -lim, lim), (cfg.f1, cfg.f1, 1, cfg.n1), dtype),
            np.zeros(cfg.n1, dtype=dtype),
        )
        lim = glorot_limit(cfg.f2 * cfg.f2 * cfg.n1, cfg.f2 * cfg.f2 * cfg.n2)
        conv2 = Conv2dLayer(
            seeded_init(rng, ("uniform", -lim, lim), (cfg.f2, cfg.f2, cfg.n1, cfg.n2), dtype),
            np.zeros(cfg.n2, dtype=dtype),
        )
        lim = glorot_limit(cfg.flat_dim, cfg.K)
        head = DenseSoftmaxHead(
            seeded_init(rng, ("uniform", -lim, lim), (cfg.flat_dim, cfg.K), dtype),
            np.zeros(cfg.K, dtype=dtype),
        )
        return cls(cfg, PeepholeLstmCell(W_x, W_h, bias, W_c), tdd, conv1, conv2, head)

    @property
    def dtype(self):
        return self.lstm.W_h.dtype

    def params(self) -> dict[str, np.ndarray]:
        """Trainable tensors by name.  The arrays are the live parameters."""
        p = {"lstm.W_x": self.lstm.W_x, "lstm.W_h": self.lstm.W_h, "lstm.b": self.lstm.bias}
        if self.lstm.W_c is not None:
            p["lstm.W_c"] = self.lstm.W_c
        p.update(
            {
                "tdd.W": self.tdd.W,
                "tdd.B": self.tdd.B,
                "conv1.W": self.conv1.W,
                "conv1.B": self.conv1.B,
                "conv2.W": self.conv2.W,
                "conv2.B": self.conv2.B,
                "head.W": self.head.W,
                "head.B": self.head.B,
            }
        )
        return p

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        """Copy ``values`` into the live parameters (shapes must match)."""
        live = self.params()
        if set(values) != set(live):
            raise ShapeError(f"parameter names differ: {sorted(set(values) ^ set(live))}")
        for name, arr in values.items():
            if np.shape(arr) != live[name].shape:
                raise ShapeError(f"{name}: expected {live[name].shape}, got {np.shape(arr)}")
            live[name][...] = arr
        self.touch()

    def touch(self) -> None:
        """Mark parameters as modified; invalidates outstanding caches."""
        self.version += 1

    def astype(self, dtype) -> "PixelRcnnModel":
        conv = lambda a: None if a is None else np.ascontiguousarray(a, dtype=dtype)  # noqa: E731
        return PixelRcnnModel(
            self.config,
            PeepholeLstmCell(conv(self.lstm.W_x), conv(self.lstm.W_h), conv(self.lstm.bias), conv(self.lstm.W_c)),
            TimeDistributedDenseLayer(conv(self.tdd.W), conv(self.tdd.B)),
            Conv2dLayer(conv(self.conv1.W), conv(self.conv1.B)),
            Conv2dLayer(conv(self.conv2.W), conv(self.conv2.B)),
            DenseSoftmaxHead(conv(self.head.W), conv(self.head.B)),
        )

    def copy(self) -> "PixelRcnnModel":
        return self.astype(self.dtype)


def param_count(model_or_config) -> int:
    """Number of trainable scalars."""
    if isinstance(model_or_config, PixelRcnnModel):
        return int(sum(p.size for p in model_or_config.params().values()))
    cfg = model_or_config
    n = 4 * cfg.u * (cfg.b + cfg.u + 1)
    if cfg.peepholes:
        n += 3 * cfg.u
    n += cfg.u * cfg.d_out + cfg.d_out
    n += cfg.n1 * (cfg.f1 * cfg.f1 * 1 + 1)
    n += cfg.n2 * (cfg.f2 * cfg.f2 * cfg.n1 + 1)
    n += cfg.flat_dim * cfg.K + cfg.K
    return n


def model_forward(model: PixelRcnnModel, X, mode="eval", rng: RngState | None = None):
    """Class probabilities for one ``(t, b)`` sample or an ``(N, t, b)`` batch.

    Returns ``(probs, cache)``; pass the cache to :func:`model_backward`.
    """
    cfg = model.config
    X = np.asarray(X)
    single = X.ndim == 2
    if single:
        X = X[None]
    if X.ndim != 3 or X.shape[1:] != (cfg.t, cfg.b):
        raise ShapeError(f"expected input (N, {cfg.t}, {cfg.b}), got {X.shape}")
    if X.shape[0] == 0:
        raise ShapeError("empty batch")
    X = np.ascontiguousarray(X, dtype=model.dtype)
    N = X.shape[0]

    gates, C, H = kernels.lstm_forward(
        X, model.lstm.W_x, model.lstm.W_h, model.lstm.bias, model.lstm._peep(), model.lstm.peepholes_enabled
    )
    y_lstm = np.ascontiguousarray(H[1:].transpose(1, 0, 2))
    if mode == "train" and cfg.dropout_p > 0:
        y_drop, mask = dropout_apply(y_lstm, cfg.dropout_p, "train", rng)
    elif mode in ("train", "eval"):
        y_drop, mask = y_lstm, None
    else:
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    tdd_pre = time_distributed_dense(model.tdd, y_drop)
    y_timeD = np.maximum(tdd_pre, 0) if cfg.tdd_relu else tdd_pre
    conv1_in = np.ascontiguousarray(y_timeD).reshape(N, cfg.t, cfg.d_out, 1)
    conv1_pre = kernels.conv2d_forward(conv1_in, model.conv1.W, model.conv1.B)
    conv1_out = np.maximum(conv1_pre, 0)
    conv2_pre = kernels.conv2d_forward(conv1_out, model.conv2.W, model.conv2.B)
    conv2_out = np.maximum(conv2_pre, 0)
    flat = conv2_out.reshape(N, -1)
    scores = flat @ model.head.W + model.head.B
    probs = softmax(scores)
    cache = ForwardCache(
        X=X, mode=mode, version=model.version, model_id=id(model),
        gates=gates, C=C, H=H, y_lstm=y_lstm, mask=mask, y_drop=y_drop,
        tdd_pre=tdd_pre, y_timeD=y_timeD, conv1_in=conv1_in, conv1_pre=conv1_pre,
        conv1_out=conv1_out, conv2_pre=conv2_pre, conv2_out=conv2_out, flat=flat,
        scores=scores, probs=probs, single=single,
    )
    return (probs[0] if single else probs), cache


def model_backward(model: PixelRcnnModel, cache: ForwardCache, y_true) -> dict[str, np.ndarray]:
    """Gradient of the mean cross-entropy over the cached batch.

    Returns a dict with the same keys and shapes as ``model.params()``.
    """
    if cache is None:
        raise UsageError("model_backward needs the cache of a forward pass")
    if cache.model_id != id(model) or cache.version != model.version:
        raise UsageError("stale cache: parameters changed since the forward pass")
    cfg = model.config
    y_true = np.atleast_1d(np.asarray(y_true, dtype=np.int64))
    N = cache.X.shape[0]
    if y_true.shape != (N,):
        raise ShapeError(f"need {N} labels, got {y_true.shape}")
    if np.any((y_true < 0) | (y_true >= cfg.K)):
        raise ParameterError("label out of range")
    dtype = model.dtype

    ds = cache.probs.copy()
    ds[np.arange(N), y_true] -= 1
    ds /= N
    ds = ds.astype(dtype, copy=False)
    g = {"head.W": cache.flat.T @ ds, "head.B": ds.sum(axis=0)}

    d = (ds @ model.head.W.T).reshape(cache.conv2_out.shape)
    d = np.ascontiguousarray(d * (cache.conv2_pre > 0))
    d, g["conv2.W"], g["conv2.B"] = kernels.conv2d_backward(d, cache.conv1_out, model.conv2.W)
    d = np.ascontiguousarray(d * (cache.conv1_pre > 0))
    d, g["conv1.W"], g["conv1.B"] = kernels.conv2d_backward(d, cache.conv1_in, model.conv1.W)
    d = d.reshape(N, cfg.t, cfg.d_out)
    if cfg.tdd_relu:
        d = d * (cache.tdd_pre > 0)
    g["tdd.W"] = np.einsum("ntu,ntd->ud", cache.y_drop, d)
    g["tdd.B"] = d.sum(axis=(0, 1))
    d = d @ model.tdd.W.T
    if cache.mask is not None:
        d = d * cache.mask * dtype.type(1.0 / (1.0 - cfg.dropout_p))
    d = np.ascontiguousarray(d, dtype=dtype)
    _, g["lstm.W_x"], g["lstm.W_h"], g["lstm.b"], dwc = kernels.lstm_backward(
        d, cache.X, model.lstm.W_x, model.lstm.W_h, model.lstm._peep(), model.lstm.peepholes_enabled,
        cache.gates, cache.C, cache.H,
    )
    if model.lstm.peepholes_enabled:
        g["lstm.W_c"] = dwc
    return {name: np.asarray(g[name], dtype=dtype) for name in model.params()}


def predict(model: PixelRcnnModel, X, batch_size: int = 1024):
    """Argmax class ids for an ``(N, t, b)`` array, evaluated in chunks."""
    X = np.asarray(X)
    out = np.empty(X.shape[0], dtype=np.int64)
    for start in range(0, X.shape[0], batch_size):
        probs, _ = model_forward(model, X[start:start + batch_size], "eval")
        out[start:start + batch_size] = probs.argmax(axis=-1)
    return out


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"PRCN"
CHECKPOINT_VERSION = 1
_CONFIG_INTS = ("t", "b", "u", "d_out", "n1", "f1", "n2", "f2", "K", "peepholes", "tdd_relu", "dropout_ppm")


def _config_ints(cfg: ModelConfig):
    vals = [getattr(cfg, k) for k in _CONFIG_INTS[:-1]]
    vals.append(int(round(cfg.dropout_p * 1_000_000)))
    return [int(v) for v in vals]


def checkpoint_bytes(model: PixelRcnnModel) -> bytes:
    """Serialise config and parameters (little-endian float32)."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    ints = _config_ints(model.config)
    buf.write(struct.pack("<H", len(ints)))
    buf.write(struct.pack(f"<{len(ints)}i", *ints))
    params = model.params()
    buf.write(struct.pack("<H", len(params)))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: PixelRcnnModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptionError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> PixelRcnnModel:
    with open(path, "rb") as fh:
        data = fh.read()
    return checkpoint_from_bytes(data)


def checkpoint_from_bytes(data: bytes) -> PixelRcnnModel:
    r = _Reader(data)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("not a PRCN checkpoint")
    (version,) = r.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (n_ints,) = r.unpack("<H")
    if n_ints != len(_CONFIG_INTS):
        raise FormatError(f"expected {len(_CONFIG_INTS)} config fields, got {n_ints}")
    raw = dict(zip(_CONFIG_INTS, r.unpack(f"<{n_ints}i")))
    ppm = raw.pop("dropout_ppm")
    raw["peepholes"] = bool(raw["peepholes"])
    raw["tdd_relu"] = bool(raw["tdd_relu"])
    cfg = ModelConfig(**raw, dropout_p=ppm / 1_000_000)
    model = PixelRcnnModel.init(cfg, seed=0, dtype=np.float32)
    live = model.params()
    (n_tensors,) = r.unpack("<H")
    if n_tensors != len(live):
        raise FormatError(f"expected {len(live)} tensors, got {n_tensors}")
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        if name not in live or tuple(shape) != live[name].shape:
            raise FormatError(f"tensor {name!r} {shape} does not fit the stored config")
        n = int(np.prod(shape))
        live[name][...] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
    if r.pos != len(data):
        raise CorruptionError("trailing bytes after checkpoint")
    return model


def with_config(model: PixelRcnnModel, **changes) -> PixelRcnnModel:
    """Copy of ``model`` with non-structural config fields changed (e.g. dropout_p)."""
    out = model.copy()
    out.config = replace(model.config, **changes)
    if param_count(out.config) != param_count(model.config):
        raise ShapeError("structural config change")
    return out
