"""Training, evaluation, prediction and gradient checking."""

import csv
import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses
from . import metrics
from .network import (
    Dropout,
    ModelConfig,
    ParameterStore,
    embed,
    frame_branch,
    load_checkpoint,
    pad_features,
    region_forward,
    save_checkpoint,
)
from .upsample import normalize_lengths, upsample

logger = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


class CompatibilityError(ValueError):
    """Checkpoint and data disagree on feature or class dimensions."""


@dataclass
class Outputs:
    A: ad.Tensor
    L: ad.Tensor
    lengths: object
    Y: ad.Tensor
    S: ad.Tensor
    T: int
    T_pad: int


def forward(params, X, training=False, rng=None, length_mode="straight_through"):
    """Full model: features (T, D) -> region outputs and frame posteriors Y, S (T, C)."""
    cfg = params.config
    X = np.asarray(X, dtype=cfg.dtype)
    T = X.shape[0]
    if T < 1:
        raise ValueError("empty feature sequence")
    Xp = pad_features(X, cfg.downsample)
    T_pad = Xp.shape[0]
    Z = embed(ad.Tensor(Xp), params, training, rng)
    A, L = region_forward(Z, params, training, rng)
    if not (np.all(np.isfinite(A.data)) and np.all(np.isfinite(L.data))):
        raise NumericError("non-finite region outputs; training has likely diverged")
    lengths = normalize_lengths(L, T_pad)
    Y = upsample(A, lengths, T_pad, J=cfg.J, mode=length_mode)
    S = frame_branch(Z, params, T_pad)
    if T_pad != T:
        Y = ad.take(Y, np.arange(T), axis=0)
        S = ad.take(S, np.arange(T), axis=0)
    return Outputs(A, L, lengths, Y, S, T, T_pad)


def predict_labels(params, X):
    with ad.no_grad():
        out = forward(params, X, training=False)
    return np.argmax(out.Y.data, axis=1), out


# run configuration ---------------------------------------------------------

@dataclass
class RunConfig:
    model: ModelConfig
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    lr: float = 0.01
    weight_decay: float = 0.005
    momentum: float = 0.0
    lr_schedule: str = "constant"
    grad_clip: float = 0.0
    epochs: int = 50
    seed: int = 0
    eval_every: int = 0
    length_mode: str = "straight_through"
    corpus: str = ""
    out: str = ""

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr > 0, weight_decay >= 0 and momentum in [0, 1)")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0 (0 disables clipping)")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.weights.enabled():
            raise ValueError("all loss terms are disabled")

    def lr_at(self, epoch):
        if self.lr_schedule == "cosine" and self.epochs > 0:
            return 0.5 * self.lr * (1 + math.cos(math.pi * epoch / self.epochs))
        return self.lr

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["model"] = ModelConfig(**d["model"])
        d["weights"] = losses.LossWeights(**d["weights"])
        return cls(**d)


class SGD:
    """Plain SGD with decoupled weight decay and optional heavy-ball momentum.

    Parameters whose ``grad`` is None took no part in the loss and are skipped.
    With ``grad_clip > 0`` all gradients are rescaled together so that their
    joint L2 norm is at most ``grad_clip``.
    """

    def __init__(self, params, lr, weight_decay=0.0, momentum=0.0, grad_clip=0.0):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.buffers = {}

    def grad_norm(self):
        return math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                             for _, p in self.params.items() if p.grad is not None))

    def step(self):
        scale = 1.0
        if self.grad_clip:
            norm = self.grad_norm()
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                # not reached by any enabled loss term: leave untouched, decay included
                continue
            if scale != 1.0:
                g = g * np.asarray(scale, dtype=g.dtype)
            if self.momentum:
                buf = self.buffers.get(name)
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.buffers[name] = buf
                g = buf
            p.data -= self.lr * g + self.lr * self.weight_decay * p.data


# training ------------------------------------------------------------------

LOG_COLUMNS = ["epoch"] + list(losses.TERMS) + ["total", "train_mof"]


def check_compatible(params, videos, n_classes=None):
    cfg = params.config
    for rec in videos:
        if rec.features.shape[1] != cfg.D:
            raise CompatibilityError(f"video {rec.id} has D={rec.features.shape[1]}, model expects {cfg.D}")
        ids = list(rec.action_set) + ([] if rec.labels is None else np.unique(rec.labels).tolist())
        if ids and (min(ids) < 0 or max(ids) >= cfg.C):
            raise CompatibilityError(f"video {rec.id} uses class ids outside 0..{cfg.C - 1}")


def train_step(params, rec, weights, rng, length_mode):
    out = forward(params, rec.features, training=True, rng=rng, length_mode=length_mode)
    total, values = losses.loss_terms(out.A, out.L, out.Y, out.S, rec.action_set, weights,
                                  delta=params.config.delta)
    if not math.isfinite(values["total"]):
        return values, out
    params.zero_grad()
    total.backward()
    return values, out


def train(config, videos, params=None, out_dir=None, callback=None):
    """Train on ``videos`` (one video per SGD step); returns (params, log rows).

    With ``out_dir`` the TrainLog (train_log.csv), the long-form loss-term
    log (loss_terms.csv), wall-clock timings (timing.csv) and checkpoints are
    written there.
    """
    videos = list(videos)
    if params is None:
        params = ParameterStore.init(config.model, seed=config.seed)
    check_compatible(params, videos)
    dropout_rng = Dropout(seed=config.seed + 1)
    order_rng = np.random.default_rng(config.seed + 2)
    opt = SGD(params, config.lr, config.weight_decay, config.momentum, config.grad_clip)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, header in (("train_log.csv", LOG_COLUMNS), ("loss_terms.csv", ["epoch", "term", "value"]),
                             ("timing.csv", ["epoch", "seconds"])):
            with open(out_dir / name, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(header)
        _write_checkpoint(out_dir, params, config, 0, dropout_rng)

    log = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        opt.lr = config.lr_at(epoch - 1)
        sums = {t: 0.0 for t in losses.TERMS + ("total",)}
        hits = frames = 0
        for i in order_rng.permutation(len(videos)):
            rec = videos[i]
            try:
                values, out = train_step(params, rec, config.weights, dropout_rng.rng, config.length_mode)
            except NumericError as e:
                raise NumericError(f"{e} (epoch {epoch}, video {rec.id}); last finite checkpoint kept") from None
            if not math.isfinite(values["total"]):
                raise NumericError(f"non-finite loss at epoch {epoch}, video {rec.id}; "
                                   "last finite checkpoint kept")
            opt.step()
            for k in sums:
                sums[k] += values[k]
            if rec.labels is not None:
                hits += int(np.sum(np.argmax(out.Y.data, axis=1) == rec.labels))
                frames += len(rec.labels)
        row = {"epoch": epoch, **{k: v / len(videos) for k, v in sums.items()},
               "train_mof": hits / frames if frames else float("nan")}
        log.append(row)
        elapsed = time.perf_counter() - t0
        if out_dir:
            _append_log(out_dir, row, elapsed)
            if (config.eval_every and epoch % config.eval_every == 0) or epoch == config.epochs:
                _write_checkpoint(out_dir, params, config, epoch, dropout_rng)
        if callback is not None:
            callback(epoch, row, params)
    return params, log


def _append_log(out_dir, row, elapsed):
    with open(out_dir / "train_log.csv", "a", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow([row["epoch"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])
    with open(out_dir / "loss_terms.csv", "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for t in losses.TERMS + ("total",):
            w.writerow([row["epoch"], t, repr(float(row[t]))])
    with open(out_dir / "timing.csv", "a", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow([row["epoch"], f"{elapsed:.3f}"])


def _write_checkpoint(out_dir, params, config, epoch, dropout_rng):
    tmp = out_dir / "checkpoint.npz.tmp"
    save_checkpoint(tmp, params, extra={"run": config.to_dict(), "epoch": epoch,
                                        "dropout_rng": dropout_rng.state()})
    os.replace(tmp, out_dir / "checkpoint.npz")


# evaluation and prediction -------------------------------------------------

def evaluate(params, videos, background=0):
    """Eval-mode argmax predictions on every video and the metric report."""
    videos = list(videos)
    check_compatible(params, videos)
    preds, gts, ids = [], [], []
    for rec in videos:
        if rec.labels is None:
            raise ValueError(f"video {rec.id} has no frame labels to evaluate against")
        pred, _ = predict_labels(params, rec.features)
        preds.append(pred)
        gts.append(rec.labels)
        ids.append(rec.id)
    report, rows = metrics.evaluate_predictions(preds, gts, ids, background=background)
    return report, rows, preds


def predict(params, X, out_dir=None, dump_y=True):
    """Frame labels plus region table (k, lint, argmax class, max prob)."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != params.config.D:
        raise CompatibilityError(f"features of shape {X.shape} do not match model D={params.config.D}")
    labels, out = predict_labels(params, X)
    A = out.A.data
    regions = [(k, int(n), int(np.argmax(A[k])), float(A[k].max())) for k, n in enumerate(out.lengths.lint)]
    if out_dir:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "labels.txt").write_text("".join(f"{int(v)}\n" for v in labels))
        with open(out_dir / "regions.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "lint", "class", "prob"])
            for k, n, c, p in regions:
                w.writerow([k, n, c, repr(p)])
        if dump_y:
            with open(out_dir / "frame_probs.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["t"] + [f"c{c}" for c in range(A.shape[1])])
                for t, row in enumerate(out.Y.data):
                    w.writerow([t] + [repr(float(v)) for v in row])
    return labels, regions, out


# gradient checking ---------------------------------------------------------

@dataclass
class GradcheckResult:
    errors: dict
    nonzero: dict
    threshold: float
    kinks: dict = field(default_factory=dict)

    @property
    def failures(self):
        return sorted(n for n, e in self.errors.items() if not e < self.threshold)

    @property
    def passed(self):
        return not self.failures

    def report(self):
        lines = [f"{'tensor':40s} {'max rel err':>12s}  nonzero  kinks"]
        for n, e in self.errors.items():
            flag = "" if e < self.threshold else "  FAIL"
            lines.append(f"{n:40s} {e:12.3e}  {self.nonzero[n]!s:>7}  {self.kinks.get(n, 0):5d}{flag}")
        lines.append("PASS" if self.passed else f"FAIL: {', '.join(self.failures)}")
        return "\n".join(lines)


def tiny_instance(T=64, D=6, C=5, M=3, seed=0):
    """A random video with an M-action set for gradient checks."""
    from .data import VideoRecord
    rng = np.random.default_rng(seed)
    action_set = tuple(sorted(rng.choice(C, size=M, replace=False).tolist()))
    X = rng.normal(size=(T, D))
    return VideoRecord("tiny", X, action_set)


def gradcheck(params, rec, weights, h=1e-4, threshold=1e-3, max_entries=16, seed=0,
              length_mode="smooth", kink_tol=None):
    """Central finite differences against reverse-mode gradients of the total loss.

    Every tensor is checked on up to ``max_entries`` random entries plus one
    random direction. The per-tensor error is the largest absolute deviation
    divided by the largest derivative magnitude of that tensor.

    ReLU, max-pool and max make the loss piecewise smooth. When the two
    one-sided differences disagree by more than ``kink_tol`` (relative), the
    step straddles a kink and the analytic value is compared against the
    closer one-sided slope instead; such entries are counted in ``kinks``.
    ``kink_tol`` defaults to ``threshold``: below it the central difference is
    within threshold/2 of either side anyway.
    """
    kink_tol = threshold if kink_tol is None else kink_tol
    if params.config.dtype != "float64":
        params = params.astype(np.float64)
    X = np.asarray(rec.features, dtype=np.float64)

    def loss_value():
        with ad.no_grad():
            out = forward(params, X, training=False, length_mode=length_mode)
            total, _ = losses.loss_terms(out.A, out.L, out.Y, out.S, rec.action_set, weights,
                                     delta=params.config.delta)
        return float(total.data)

    out = forward(params, X, training=False, length_mode=length_mode)
    total, _ = losses.loss_terms(out.A, out.L, out.Y, out.S, rec.action_set, weights, delta=params.config.delta)
    params.zero_grad()
    total.backward()
    analytic = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}

    base_value = loss_value()

    def numeric(ana_value, set_plus, set_minus, restore):
        """Central difference, or the matching one-sided slope across a kink."""
        set_plus()
        fp = loss_value()
        set_minus()
        fm = loss_value()
        restore()
        right, left = (fp - base_value) / h, (base_value - fm) / h
        central = (fp - fm) / (2 * h)
        if abs(right - left) > kink_tol * max(abs(right), abs(left), 1e-8):
            # non-differentiable within the step: the analytic value must be one of the one-sided slopes
            return min((left, right), key=lambda v: abs(v - ana_value)), True
        return central, False

    rng = np.random.default_rng(seed)
    errors, nonzero, kinks = {}, {}, {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        g = analytic[name].reshape(-1)
        picks = np.arange(flat.size) if flat.size <= max_entries else rng.choice(flat.size, max_entries, replace=False)
        num, ana, n_kinks = [], [], 0
        for i in picks:
            orig = flat[i]

            def set_at(v, i=i):
                flat[i] = v
            value, kink = numeric(g[i], lambda: set_at(orig + h), lambda: set_at(orig - h), lambda: set_at(orig))
            num.append(value)
            ana.append(g[i])
            n_kinks += kink
        v = rng.normal(size=flat.shape)
        v /= np.linalg.norm(v)
        base = flat.copy()

        def set_all(x):
            flat[:] = x
        dg = float(g @ v)
        value, kink = numeric(dg, lambda: set_all(base + h * v), lambda: set_all(base - h * v),
                              lambda: set_all(base))
        num.append(value)
        ana.append(dg)
        n_kinks += kink
        num, ana = np.array(num), np.array(ana)
        scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
        errors[name] = float(np.abs(num - ana).max() / scale)
        nonzero[name] = bool(np.any(g != 0))
        kinks[name] = int(n_kinks)
    return GradcheckResult(errors, nonzero, threshold, kinks)
