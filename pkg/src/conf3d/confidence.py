"""3D confidence: training targets, stochastic pairing, scorer and diagnostics.

Two target definitions are supported for a per-detection box loss ``l``:

* absolute: ``exp(-l / beta)``, a direct regression of the loss;
* relative: the fraction of other objects whose loss is at least ``l``.

The relative target is never computed over the whole training set during
training. Instead every mini-batch element is paired with a random distinct
element of the same class and the binary outcome ``l_i <= l_partner`` is
used as the target; its expectation over the partner draw is the relative
target.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import Box3D

log = logging.getLogger(__name__)

PRED_EPS = 1e-7
SCORER_FORMAT = "conf3d-scorer"
SCORER_VERSION = 1


class ConfigError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ConfidenceTargetConfig:
    mode: str = "relative"
    beta: float = 1.0
    loss_weight: float = 1.0

    def __post_init__(self):
        if self.mode not in ("absolute", "relative"):
            raise ConfigError(f"mode must be 'absolute' or 'relative', got {self.mode!r}")
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if not self.loss_weight >= 0:
            raise ConfigError(f"loss_weight must be non-negative, got {self.loss_weight}")


@dataclass(frozen=True)
class TrainRecord:
    features: tuple[float, ...]
    loss: float
    class_id: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.loss) and self.loss >= 0):
            raise ValueError(f"record loss must be finite and non-negative, got {self.loss}")


# -- box loss ---------------------------------------------------------------


@dataclass(frozen=True)
class BoxLossWeights:
    center: float = 1.0
    shape: float = 1.0
    yaw: float = 1.0
    smooth_l1_beta: float = 1.0


def _smooth_l1(x: float, beta: float) -> float:
    x = abs(x)
    return 0.5 * x * x / beta if x < beta else x - 0.5 * beta


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def box_loss(pred: Box3D, gt: Box3D, weights: BoxLossWeights = BoxLossWeights()) -> float:
    """Disentangled smooth-L1 loss: center, shape and yaw terms summed."""
    b = weights.smooth_l1_beta
    center = sum(_smooth_l1(p - g, b) for p, g in zip(pred.center, gt.center))
    shape = sum(_smooth_l1(p - g, b) for p, g in zip(pred.shape, gt.shape))
    yaw = _smooth_l1(wrap_angle(pred.yaw - gt.yaw), b)
    return weights.center * center + weights.shape * shape + weights.yaw * yaw


# -- targets ----------------------------------------------------------------


def absolute_target(loss, beta: float):
    if not beta > 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    return np.exp(-np.asarray(loss, dtype=float) / beta) if np.ndim(loss) else math.exp(-loss / beta)


def relative_target_exact(losses: Sequence[float], i: int) -> float:
    """Share of the other objects whose loss is >= the loss of object ``i``."""
    n = len(losses)
    if n < 2:
        raise ValueError("relative target needs at least two losses")
    li = losses[i]
    worse = sum(1 for j in range(n) if j != i and losses[j] >= li)
    return worse / (n - 1)


def relative_targets(losses: Sequence[float]) -> np.ndarray:
    """``relative_target_exact`` for every index at once (sorting based)."""
    arr = np.asarray(losses, dtype=float)
    n = len(arr)
    if n < 2:
        raise ValueError("relative target needs at least two losses")
    below = np.searchsorted(np.sort(arr), arr, side="left")
    return (n - below - 1) / (n - 1)


def _pair_targets(losses: np.ndarray, class_ids: np.ndarray, rng: np.random.Generator):
    idx_out, partner_out = [], []
    skipped = 0
    for c in np.unique(class_ids):
        members = np.flatnonzero(class_ids == c)
        m = len(members)
        if m < 2:
            skipped += m
            continue
        draw = rng.integers(0, m - 1, size=m)
        draw += draw >= np.arange(m)
        idx_out.append(members)
        partner_out.append(members[draw])
    if not idx_out:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0), skipped
    i = np.concatenate(idx_out)
    p = np.concatenate(partner_out)
    order = np.argsort(i, kind="stable")
    i, p = i[order], p[order]
    return i, p, (losses[i] <= losses[p]).astype(float), skipped


def sample_pair_targets(batch: Sequence[TrainRecord], rng: np.random.Generator):
    """Pair each record with a random distinct same-class record.

    Returns ``(pairs, n_skipped)`` where ``pairs`` is a list of
    ``(i, partner, target)`` with ``target = 1 if loss_i <= loss_partner``
    and ``n_skipped`` counts records that are alone in their class.
    """
    losses = np.array([r.loss for r in batch], dtype=float)
    classes = np.array([r.class_id for r in batch], dtype=np.int64)
    i, p, t, skipped = _pair_targets(losses, classes, rng)
    return [(int(a), int(b), float(c)) for a, b, c in zip(i, p, t)], skipped


def bce_loss(pred, target):
    """Binary cross-entropy and its derivative with respect to ``pred``.

    Predictions are clamped to ``[1e-7, 1 - 1e-7]`` first.
    """
    p = np.clip(np.asarray(pred, dtype=float), PRED_EPS, 1 - PRED_EPS)
    t = np.asarray(target, dtype=float)
    value = -t * np.log(p) - (1 - t) * np.log1p(-p)
    grad = (p - t) / (p * (1 - p))
    if value.ndim == 0:
        return float(value), float(grad)
    return value, grad


def combine_scores(score2d: float, score3d: float, rule: str = "product") -> float:
    for name, v in (("score2d", score2d), ("score3d", score3d)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    if rule == "product":
        return score2d * score3d
    if rule == "mean":
        return 0.5 * (score2d + score3d)
    raise ValueError(f"unknown combination rule {rule!r}")


# -- scorer -----------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class Scorer:
    """Fully-connected confidence head: ReLU hidden layers, logistic output.

    ``weights[k]`` has shape ``(fan_in, fan_out)``. With more than one head
    the output layer has one unit per entry of ``class_ids``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    class_ids: list[int] = field(default_factory=lambda: [0])
    input_mean: Optional[np.ndarray] = None
    input_std: Optional[np.ndarray] = None
    history: list[float] = field(default_factory=list)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_heads(self) -> int:
        return self.weights[-1].shape[1]

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @classmethod
    def init(cls, n_in: int, hidden: Sequence[int] = (512, 512), class_ids: Sequence[int] = (0,),
             rng: Optional[np.random.Generator] = None) -> "Scorer":
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = [n_in, *hidden, len(class_ids)]
        weights, biases = [], []
        for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = k == len(widths) - 2
            scale = math.sqrt(1.0 / a) if last else math.sqrt(2.0 / a)
            weights.append(rng.normal(0.0, scale, size=(a, b)))
            biases.append(np.zeros(b))
        return cls(weights=weights, biases=biases, class_ids=list(class_ids))

    @classmethod
    def constant(cls, n_in: int, value_logit: float, class_ids: Sequence[int] = (0,)) -> "Scorer":
        """A scorer whose output ignores the features (sigmoid of ``value_logit``)."""
        return cls(
            weights=[np.zeros((n_in, len(class_ids)))],
            biases=[np.full(len(class_ids), float(value_logit))],
            class_ids=list(class_ids),
        )

    def head_index(self, class_ids) -> np.ndarray:
        class_ids = np.atleast_1d(np.asarray(class_ids, dtype=np.int64))
        if self.n_heads == 1:
            return np.zeros(len(class_ids), dtype=np.int64)
        lookup = {c: k for k, c in enumerate(self.class_ids)}
        try:
            return np.array([lookup[int(c)] for c in class_ids], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"scorer has no head for class id {exc.args[0]}") from None

    def _normalize(self, x: np.ndarray) -> np.ndarray:
        if self.input_mean is None:
            return x
        return (x - self.input_mean) / self.input_std

    def _forward(self, x: np.ndarray):
        acts = [self._normalize(np.asarray(x, dtype=float))]
        pre = []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w + b
            pre.append(z)
            if k < len(self.weights) - 1:
                acts.append(np.maximum(z, 0.0))
        return acts, pre

    def logits(self, x, class_ids=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        _, pre = self._forward(x)
        heads = self.head_index(np.zeros(len(x)) if class_ids is None else class_ids)
        return pre[-1][np.arange(len(x)), heads]

    def predict(self, x, class_ids=None) -> np.ndarray:
        return _sigmoid(self.logits(x, class_ids))

    def loss_and_grads(self, x, class_ids, targets, loss_weight: float = 1.0):
        """Mean BCE over the rows and gradients for every weight and bias."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.asarray(targets, dtype=float)
        m = len(x)
        heads = self.head_index(class_ids)
        acts, pre = self._forward(x)
        rows = np.arange(m)
        z = pre[-1][rows, heads]
        c = _sigmoid(z)
        values, _ = bce_loss(c, t)
        loss = loss_weight * float(np.mean(values))
        inside = (c > PRED_EPS) & (c < 1 - PRED_EPS)
        dz = np.zeros_like(pre[-1])
        dz[rows, heads] = loss_weight * np.where(inside, c - t, 0.0) / m
        gw = [None] * len(self.weights)
        gb = [None] * len(self.biases)
        for k in range(len(self.weights) - 1, -1, -1):
            gw[k] = acts[k].T @ dz
            gb[k] = dz.sum(axis=0)
            if k > 0:
                dz = (dz @ self.weights[k].T) * (pre[k - 1] > 0)
        return loss, gw, gb

    def to_dict(self) -> dict:
        def arr(a):
            return {"shape": list(a.shape), "data": [float(v) for v in np.ravel(a, order="C")]}

        return {
            "format": SCORER_FORMAT,
            "version": SCORER_VERSION,
            "widths": self.widths,
            "activation": {"hidden": "relu", "output": "sigmoid"},
            "class_ids": [int(c) for c in self.class_ids],
            "weights": [arr(w) for w in self.weights],
            "biases": [arr(b) for b in self.biases],
            "input_mean": None if self.input_mean is None else arr(self.input_mean),
            "input_std": None if self.input_std is None else arr(self.input_std),
            "history": [float(h) for h in self.history],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "Scorer":
        if d.get("format") != SCORER_FORMAT:
            raise ValueError("not a conf3d scorer file")
        if d.get("version") != SCORER_VERSION:
            raise ValueError(f"unsupported scorer version {d.get('version')}")

        def arr(a):
            return None if a is None else np.array(a["data"], dtype=float).reshape(a["shape"])

        scorer = cls(
            weights=[arr(w) for w in d["weights"]],
            biases=[arr(b) for b in d["biases"]],
            class_ids=list(d["class_ids"]),
            input_mean=arr(d.get("input_mean")),
            input_std=arr(d.get("input_std")),
            history=list(d.get("history", [])),
        )
        if scorer.widths != list(d["widths"]):
            raise ValueError(f"widths {d['widths']} disagree with weight shapes {scorer.widths}")
        return scorer

    @classmethod
    def from_json(cls, text: str) -> "Scorer":
        return cls.from_dict(json.loads(text))


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class TrainOptions:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 64
    milestones: tuple[int, ...] = (20, 40)
    gamma: float = 0.1
    hidden: tuple[int, ...] = (512, 512)
    per_class_heads: bool = True
    seed: int = 0


def _stack(records: Sequence[TrainRecord]):
    if len(records) < 2:
        raise ValueError("training needs at least two records")
    dims = {len(r.features) for r in records}
    if len(dims) != 1:
        raise ValueError(f"feature lengths differ across records: {sorted(dims)}")
    x = np.array([r.features for r in records], dtype=float)
    if not np.isfinite(x).all():
        raise ValueError("record features must be finite")
    losses = np.array([r.loss for r in records], dtype=float)
    cls = np.array([r.class_id for r in records], dtype=np.int64)
    return x, losses, cls


def train_scorer(records: Sequence[TrainRecord], config: ConfidenceTargetConfig = ConfidenceTargetConfig(),
                 opts: TrainOptions = TrainOptions()) -> Scorer:
    """Fit a scorer with BCE against absolute or pair-sampled relative targets.

    Fully deterministic for a given ``opts.seed``. The learning rate is
    multiplied by ``opts.gamma`` at each epoch listed in ``opts.milestones``.
    """
    x, losses, cls = _stack(records)
    rng = np.random.default_rng(opts.seed)
    class_ids = sorted(set(cls.tolist())) if opts.per_class_heads else [0]
    scorer = Scorer.init(x.shape[1], opts.hidden, class_ids, rng)
    scorer.input_mean = x.mean(axis=0)
    std = x.std(axis=0)
    scorer.input_std = np.where(std > 1e-12, std, 1.0)
    cls_for_heads = cls if opts.per_class_heads else np.zeros_like(cls)
    abs_targets = absolute_target(losses, config.beta) if config.mode == "absolute" else None

    params = [*scorer.weights, *scorer.biases]
    opt = Adam(params, lr=opts.lr)
    n = len(x)
    for epoch in range(opts.epochs):
        opt.lr = opts.lr * opts.gamma ** sum(1 for m in opts.milestones if epoch >= m)
        perm = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, opts.batch_size):
            b = perm[start:start + opts.batch_size]
            if config.mode == "relative":
                rows, _, targets, _ = _pair_targets(losses[b], cls[b], rng)
                if len(rows) == 0:
                    continue
                b = b[rows]
            else:
                targets = abs_targets[b]
            loss, gw, gb = scorer.loss_and_grads(x[b], cls_for_heads[b], targets, config.loss_weight)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite confidence loss at epoch {epoch}; lower the learning rate "
                    f"(currently {opt.lr:g}) or check the record losses/features for extreme values"
                )
            opt.step([*gw, *gb])
            if not all(np.isfinite(p).all() for p in params):
                raise TrainingDivergedError(
                    f"parameters overflowed at epoch {epoch}; lower the learning rate (currently {opt.lr:g})"
                )
            total += loss * len(b)
            count += len(b)
        scorer.history.append(total / count if count else 0.0)
        log.debug("epoch %d lr %.2e loss %.6f", epoch, opt.lr, scorer.history[-1])
    return scorer


# -- calibration ------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationBin:
    bin_center: float
    mean_pred: float
    mean_realized: float
    count: int


def calibration_bins(preds, realized, n_bins: int = 10) -> list[CalibrationBin]:
    """Bin records by realized target on [0, 1]; empty bins are omitted."""
    p = np.asarray(preds, dtype=float)
    r = np.asarray(realized, dtype=float)
    if p.shape != r.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {r.shape}")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if p.size == 0:
        return []
    idx = np.clip(np.floor(r * n_bins).astype(np.int64), 0, n_bins - 1)
    bins = []
    for k in range(n_bins):
        mask = idx == k
        cnt = int(mask.sum())
        if cnt:
            bins.append(CalibrationBin((k + 0.5) / n_bins, float(p[mask].mean()), float(r[mask].mean()), cnt))
    return bins


def calibration_csv(bins: Sequence[CalibrationBin]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_center", "mean_pred", "mean_realized", "count"])
    for b in bins:
        w.writerow([f"{b.bin_center:.6f}", f"{b.mean_pred:.6f}", f"{b.mean_realized:.6f}", b.count])
    return buf.getvalue()


# -- record CSV -------------------------------------------------------------


def write_records_csv(records: Sequence[TrainRecord]) -> str:
    dim = len(records[0].features) if records else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class_id", "loss", *(f"feat_{k}" for k in range(dim))])
    for r in records:
        w.writerow([r.class_id, repr(float(r.loss)), *(repr(float(v)) for v in r.features)])
    return buf.getvalue()


def read_records_csv(text: str) -> list[TrainRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return []
    header, body = rows[0], rows[1:]
    if header[:2] != ["class_id", "loss"]:
        raise ValueError("record CSV must start with class_id,loss")
    out = []
    for lineno, row in enumerate(body, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ValueError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        out.append(TrainRecord(tuple(float(v) for v in row[2:]), float(row[1]), int(row[0])))
    return out
