"""Loss, AMSGrad, learning-rate schedules, preprocessing and the training loop."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import PixelDataset, largest_remainder
from .errors import DataError, NumericError, ParameterError
from .layers import PixelRcnnModel, model_backward, model_forward, param_count, predict
from .metrics import cohen_kappa, confusion_from_labels, overall_accuracy
from .tensor import RngState

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


def cross_entropy(probs, labels) -> float:
    """Mean negative log-probability of the true class."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, K = probs.shape
    if labels.shape != (n,):
        raise DataError(f"{labels.shape[0]} labels for {n} rows")
    if np.any((labels < 0) | (labels >= K)):
        raise DataError(f"label outside [0, {K})")
    p = np.maximum(probs[np.arange(n), labels], LOG_CLAMP)
    return float(-np.mean(np.log(p)))


# ---------------------------------------------------------------------------
# AMSGrad
# ---------------------------------------------------------------------------


@dataclass
class AmsGradState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    v_hat: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AmsGradState":
        z = lambda: {k: np.zeros_like(p) for k, p in params.items()}  # noqa: E731
        return cls(z(), z(), z())


def amsgrad_step(state: AmsGradState, params, grads, lr: float, beta1=0.86, beta2=0.98, eps=1e-9):
    """One AMSGrad update, applied to ``params`` in place.

    No bias correction: ``theta -= lr * m / sqrt(v_hat + eps)`` with
    ``v_hat`` the running element-wise maximum of ``v``.  If any gradient
    is non-finite the step is refused and nothing is modified.
    """
    if not lr > 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if np.shape(g) != np.shape(params[name]):
            raise ParameterError(f"{name}: gradient shape {np.shape(g)} != {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step aborted")
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m, v, vh = state.m[name], state.v[name], state.v_hat[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        np.maximum(vh, v, out=vh)
        p -= (lr * m / np.sqrt(vh + eps)).astype(p.dtype, copy=False)
    state.step += 1
    return params, state


# ---------------------------------------------------------------------------
# learning-rate schedules
# ---------------------------------------------------------------------------


@dataclass
class CosineSchedule:
    eta_max: float | None = None
    eta_min: float | None = None
    period: int | None = None
    cyclic: bool = True


def cosine_lr(schedule: CosineSchedule, step: int) -> float:
    """Half-cosine from ``eta_max`` down to ``eta_min`` over ``period`` steps."""
    hi, lo, T = schedule.eta_max, schedule.eta_min, schedule.period
    if hi is None or lo is None or T is None:
        raise ParameterError("schedule is not fully specified")
    if T <= 0:
        raise ParameterError("cosine period must be positive")
    if step < 0:
        raise ParameterError("step must be nonnegative")
    if not schedule.cyclic and step >= T:
        return float(lo)
    phase = (step % T) / T
    lr = lo + 0.5 * (hi - lo) * (1 + math.cos(math.pi * phase))
    return float(min(max(lr, lo), hi))


@dataclass
class LrRangeResult:
    lrs: list[float]
    losses: list[float]
    smoothed: list[float]
    suggestion: float | None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lr", "loss", "smoothed_loss"])
        for row in zip(self.lrs, self.losses, self.smoothed):
            w.writerow([repr(float(x)) for x in row])
        return buf.getvalue()


def lr_range_search(params, loss_and_grad, lo, hi, iters, beta1=0.86, beta2=0.98, eps=1e-9,
                    smoothing=0.98) -> LrRangeResult:
    """Linearly ramp the learning rate and record the loss at every step.

    ``loss_and_grad(k)`` returns ``(loss, grads)`` for step ``k`` at the
    current parameters.  Parameters are restored afterwards.  The suggestion
    is the learning rate where the smoothed loss falls fastest, ignoring
    the last 10 % of the ramp.
    """
    if not lo <= hi or lo <= 0:
        raise ParameterError(f"need 0 < lo <= hi, got ({lo}, {hi})")
    if iters < 2:
        raise ParameterError("iters must be >= 2")
    saved = {k: p.copy() for k, p in params.items()}
    state = AmsGradState.zeros_like(params)
    lrs, losses, smoothed = [], [], []
    avg = 0.0
    try:
        for k in range(iters):
            lr = lo + (hi - lo) * k / (iters - 1)
            loss, grads = loss_and_grad(k)
            if not math.isfinite(loss):
                log.info("lr range test diverged at lr=%g", lr)
                break
            avg = smoothing * avg + (1 - smoothing) * loss
            lrs.append(float(lr))
            losses.append(float(loss))
            smoothed.append(avg / (1 - smoothing ** (k + 1)))
            try:
                amsgrad_step(state, params, grads, lr, beta1, beta2, eps)
            except NumericError:
                break
    finally:
        for k, p in params.items():
            p[...] = saved[k]
    suggestion = None
    usable = int(math.floor(0.9 * len(smoothed)))
    if usable >= 2:
        diffs = np.diff(smoothed[:usable])
        suggestion = lrs[int(np.argmin(diffs)) + 1]
    return LrRangeResult(lrs, losses, smoothed, suggestion)


def lr_range_test(model: PixelRcnnModel, dataset: PixelDataset, lo=1e-5, hi=1.0, iters=100,
                  batch_size=128, seed=0, beta1=0.86, beta2=0.98, eps=1e-9) -> LrRangeResult:
    """LR range test of ``model`` on mini-batches of ``dataset``; model is left unchanged."""
    rng = RngState(seed)
    order_rng, drop_rng = rng.spawn(), rng.spawn()
    n = len(dataset)
    perm = order_rng.generator.permutation(n)

    def loss_and_grad(k):
        start = (k * batch_size) % n
        idx = np.take(perm, range(start, start + min(batch_size, n)), mode="wrap")
        probs, cache = model_forward(model, dataset.X[idx], "train", drop_rng)
        loss = cross_entropy(probs, dataset.labels[idx])
        return loss, model_backward(model, cache, dataset.labels[idx])

    params = model.params()
    try:
        return lr_range_search(params, _touching(model, loss_and_grad), lo, hi, iters, beta1, beta2, eps)
    finally:
        model.touch()


def _touching(model, fn):
    def wrapped(k):
        model.touch()
        return fn(k)

    return wrapped


# ---------------------------------------------------------------------------
# split and scaling
# ---------------------------------------------------------------------------


def stratified_split_indices(labels, train_fraction, seed):
    """Per-class largest-remainder allocation, seeded selection within classes."""
    if not 0 < float(train_fraction) < 1:
        raise ParameterError(f"train_fraction must be in (0, 1), got {train_fraction}")
    labels = np.asarray(labels, dtype=np.int64)
    K = int(labels.max()) + 1 if labels.size else 0
    counts = np.bincount(labels, minlength=K)
    if labels.size == 0 or np.any(counts == 0):
        raise DataError("every class needs at least one sample")
    alloc = largest_remainder(counts.tolist(), train_fraction)
    gen = RngState(seed).generator
    train, test = [], []
    for k in range(K):
        members = np.flatnonzero(labels == k)
        members = members[gen.permutation(members.size)]
        train.append(members[: alloc[k]])
        test.append(members[alloc[k]:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def stratified_split(dataset: PixelDataset, train_fraction=0.6, seed=0):
    if np.any(dataset.class_counts() == 0):
        raise DataError("every class in the catalog needs at least one sample")
    tr, te = stratified_split_indices(dataset.labels, train_fraction, seed)
    return dataset.subset(tr), dataset.subset(te)


@dataclass
class ScalerParams:
    mean: np.ndarray  # (t, b)
    std: np.ndarray  # (t, b)

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean.tolist(), "std": self.std.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "ScalerParams":
        d = json.loads(text)
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def scaler_fit(train) -> ScalerParams:
    """Per-(time, band) mean and population std; constant features get std 1."""
    X = train.X if isinstance(train, PixelDataset) else np.asarray(train)
    X = X.astype(np.float64)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    # std can underflow to 0 for tiny but unequal values; treat those as constant too
    const = (X.min(axis=0) == X.max(axis=0)) | (std == 0)
    mean[const] = np.where((X.min(axis=0) == X.max(axis=0)), X[0], mean)[const]
    std[const] = 1.0
    return ScalerParams(mean, std)


def scaler_apply(params: ScalerParams, data, dtype=np.float64):
    X = data.X if isinstance(data, PixelDataset) else np.asarray(data)
    if X.shape[1:] != params.mean.shape:
        raise DataError(f"scaler fitted on {params.mean.shape} features, data has {X.shape[1:]}")
    out = ((X.astype(np.float64) - params.mean) / params.std).astype(dtype)
    if isinstance(data, PixelDataset):
        return PixelDataset(out, data.labels, list(data.class_names), data.provenance)
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 128
    beta1: float = 0.86
    beta2: float = 0.98
    eps: float = 1e-9
    seed: int = 0
    schedule: CosineSchedule = field(default_factory=CosineSchedule)
    lr_find_lo: float = 1e-5
    lr_find_hi: float = 1.0
    lr_find_iters: int = 100

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = CosineSchedule(**self.schedule)
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.eps > 0):
            raise ParameterError("need 0 < beta1, beta2 < 1 and eps > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "schedule" in d and isinstance(d["schedule"], dict):
            sk = {f.name for f in fields(CosineSchedule)}
            bad = set(d["schedule"]) - sk
            if bad:
                raise ParameterError(f"unknown schedule keys: {sorted(bad)}")
            d["schedule"] = CosineSchedule(**d["schedule"])
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_oa: float
    test_oa: float | None


@dataclass
class TrainingReport:
    epochs: list[EpochRecord]
    schedule: CosineSchedule
    param_count: int
    final: dict = field(default_factory=dict)
    diverged: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "train_OA", "test_OA"])
        for r in self.epochs:
            w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.train_oa),
                        "" if r.test_oa is None else repr(r.test_oa)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {
                "epochs": len(self.epochs),
                "param_count": self.param_count,
                "schedule": asdict(self.schedule),
                "diverged": self.diverged,
                "final": self.final,
            },
            indent=2,
            sort_keys=True,
        )


class TrainingDiverged(NumericError):
    def __init__(self, message, report: TrainingReport):
        super().__init__(message)
        self.report = report


def resolve_schedule(model, train, cfg: TrainConfig, steps_per_epoch: int) -> CosineSchedule:
    """Fill unset schedule fields: eta_max from an LR range test, eta_min = eta_max / 100,
    period = 10 epochs."""
    s = cfg.schedule
    eta_max = s.eta_max
    if eta_max is None:
        res = lr_range_test(model, train, cfg.lr_find_lo, cfg.lr_find_hi, cfg.lr_find_iters,
                            cfg.batch_size, cfg.seed, cfg.beta1, cfg.beta2, cfg.eps)
        eta_max = res.suggestion if res.suggestion is not None else cfg.lr_find_lo
        log.info("lr range test suggests eta_max=%g", eta_max)
    eta_min = s.eta_min if s.eta_min is not None else eta_max / 100
    period = s.period if s.period is not None else steps_per_epoch * 10
    return CosineSchedule(float(eta_max), float(eta_min), int(period), s.cyclic)


def _accuracy(model, ds: PixelDataset) -> float:
    return float(np.mean(predict(model, ds.X) == ds.labels))


def fit(model: PixelRcnnModel, train: PixelDataset, cfg: TrainConfig, test: PixelDataset | None = None,
        progress=None) -> TrainingReport:
    """Mini-batch AMSGrad training with a cosine-annealed learning rate.

    ``train``/``test`` are expected to be scaled already.  Each epoch uses
    one seeded permutation; the last partial batch is kept.  Raises
    :class:`TrainingDiverged` (carrying the partial report) if the loss
    becomes non-finite.
    """
    n = len(train)
    if n == 0:
        raise DataError("empty training set")
    if train.X.shape[1:] != (model.config.t, model.config.b):
        raise DataError(f"training data {train.X.shape[1:]} does not fit the model")
    steps_per_epoch = -(-n // cfg.batch_size)
    schedule = resolve_schedule(model, train, cfg, steps_per_epoch)
    rng = RngState(cfg.seed)
    shuffle_rng, drop_rng = rng.spawn(), rng.spawn()
    params = model.params()
    state = AmsGradState.zeros_like(params)
    report = TrainingReport([], schedule, param_count(model))
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.generator.permutation(n)
        total_loss = 0.0
        lr = schedule.eta_max
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            y = train.labels[idx]
            try:
                probs, cache = model_forward(model, train.X[idx], "train", drop_rng)
            except NumericError as exc:
                report.diverged = True
                raise TrainingDiverged(f"{exc} at epoch {epoch}, step {step}", report) from exc
            loss = cross_entropy(probs, y)
            if not math.isfinite(loss):
                report.diverged = True
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}", report)
            grads = model_backward(model, cache, y)
            lr = cosine_lr(schedule, step)
            try:
                amsgrad_step(state, params, grads, lr, cfg.beta1, cfg.beta2, cfg.eps)
            except NumericError as exc:
                report.diverged = True
                raise TrainingDiverged(str(exc), report) from exc
            model.touch()
            total_loss += loss * len(idx)
            step += 1
        try:
            rec = EpochRecord(epoch, lr, total_loss / n, _accuracy(model, train),
                              _accuracy(model, test) if test is not None else None)
        except NumericError as exc:
            report.diverged = True
            raise TrainingDiverged(f"{exc} after epoch {epoch}", report) from exc
        report.epochs.append(rec)
        if progress is not None:
            progress(rec)
    report.final = evaluation_summary(model, train, test)
    return report


def evaluation_summary(model, train: PixelDataset, test: PixelDataset | None) -> dict:
    out = {"train_OA": _accuracy(model, train)}
    if test is not None:
        cm = confusion_from_labels(test.labels, predict(model, test.X), model.config.K, test.class_names)
        out["test_OA"] = overall_accuracy(cm)
        out["test_kappa"] = cohen_kappa(cm)
    return out


# ---------------------------------------------------------------------------
# logistic-regression baseline
# ---------------------------------------------------------------------------


@dataclass
class LogisticBaseline:
    W: np.ndarray  # (t*b, K)
    B: np.ndarray  # (K,)

    def params(self):
        return {"W": self.W, "B": self.B}

    def probs(self, X):
        from .layers import softmax

        F = np.asarray(X, dtype=self.W.dtype).reshape(len(X), -1)
        return softmax(F @ self.W + self.B)

    def predict(self, X):
        return self.probs(X).argmax(axis=-1)


def logistic_baseline_fit(train: PixelDataset, test: PixelDataset | None, cfg: TrainConfig):
    """Multinomial logistic regression on flattened features, trained with AMSGrad.

    Returns ``(baseline, OA)`` with OA on ``test`` (or ``train`` when no test
    split is given).
    """
    d = train.t * train.b
    K = train.K
    model = LogisticBaseline(np.zeros((d, K), dtype=np.float64), np.zeros(K, dtype=np.float64))
    F = train.X.reshape(len(train), -1).astype(np.float64)
    onehot = np.eye(K)[train.labels]
    n = len(train)

    def loss_grad(idx):
        p = model.probs(F[idx])
        ds = (p - onehot[idx]) / len(idx)
        return cross_entropy(p, train.labels[idx]), {"W": F[idx].T @ ds, "B": ds.sum(axis=0)}

    steps_per_epoch = -(-n // cfg.batch_size)
    rng = RngState(cfg.seed)
    shuffle_rng = rng.spawn()
    s = cfg.schedule
    eta_max = s.eta_max
    if eta_max is None:
        perm0 = rng.spawn().generator.permutation(n)
        res = lr_range_search(
            model.params(),
            lambda k: loss_grad(np.take(perm0, range(k * cfg.batch_size, (k + 1) * cfg.batch_size), mode="wrap")),
            cfg.lr_find_lo, cfg.lr_find_hi, cfg.lr_find_iters, cfg.beta1, cfg.beta2, cfg.eps,
        )
        eta_max = res.suggestion or cfg.lr_find_lo
    schedule = CosineSchedule(eta_max, s.eta_min if s.eta_min is not None else eta_max / 100,
                              s.period if s.period is not None else steps_per_epoch * 10, s.cyclic)
    state = AmsGradState.zeros_like(model.params())
    step = 0
    for _ in range(cfg.epochs):
        perm = shuffle_rng.generator.permutation(n)
        for start in range(0, n, cfg.batch_size):
            loss, grads = loss_grad(perm[start:start + cfg.batch_size])
            if not math.isfinite(loss):
                raise NumericError("baseline loss diverged")
            amsgrad_step(state, model.params(), grads, cosine_lr(schedule, step), cfg.beta1, cfg.beta2, cfg.eps)
            step += 1
    ref = test if test is not None else train
    oa = float(np.mean(model.predict(ref.X) == ref.labels))
    return model, oa
