"""Training with analytic gradients through the selective scan.

Gradients are derived by hand (backpropagation through time): the forward
pass keeps every intermediate, the reverse sweep over the recurrence runs in
``kernels.layer_backward`` and the remaining per-token algebra is vectorised.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericalFailure
from .model import ModelParams, forward_batch, kernels, sigmoid
from .taskgen import RecallInstance

log = logging.getLogger(__name__)

ANSWER_ONLY = "answer"
ALL_CONTEXT = "all"

LOG_COLUMNS = ("step", "train_loss", "eval_set", "position", "accuracy", "correct", "total")


@dataclass
class TrainConfig:
    lr: float = 3e-3
    optimizer: str = "adam"  # "adam" or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    steps: int = 1000
    clip: float = 1.0  # global gradient-norm clip; <= 0 disables
    loss_positions: str = ANSWER_ONLY
    eval_interval: int = 500
    seed: int = 0
    target_accuracy: float | None = None  # stop early once train accuracy reaches this

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.loss_positions not in (ANSWER_ONLY, ALL_CONTEXT):
            raise ConfigError(f"unknown loss_positions {self.loss_positions!r}")
        if self.target_accuracy is not None and not 0 < self.target_accuracy <= 1:
            raise ConfigError("target_accuracy must lie in (0, 1]")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# --------------------------------------------------------------------------
# batches and loss


@dataclass
class Batch:
    tokens: np.ndarray  # (B, T)
    targets: np.ndarray  # (B, T) next-token ids; last position holds the gold object
    mask: np.ndarray  # (B, T) float weights


def make_batch(instances, loss_positions=ANSWER_ONLY):
    instances = list(instances)
    if not instances:
        raise ConfigError("empty batch")
    lengths = {len(i) for i in instances}
    if len(lengths) != 1:
        raise ConfigError(f"batch mixes sequence lengths {sorted(lengths)}")
    tokens = np.stack([i.tokens for i in instances])
    targets = np.empty_like(tokens)
    targets[:, :-1] = tokens[:, 1:]
    targets[:, -1] = [i.gold_object for i in instances]
    mask = np.zeros(tokens.shape)
    if loss_positions == ALL_CONTEXT:
        mask[:] = 1.0
    else:
        mask[:, -1] = 1.0
    return Batch(tokens, targets, mask)


def log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _ce(logits, batch):
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, batch.targets[..., None], axis=-1)[..., 0]
    total = batch.mask.sum()
    if total == 0:
        return 0.0, logp
    return float(-(picked * batch.mask).sum() / total), logp


def loss(params: ModelParams, instance: RecallInstance, loss_positions=ANSWER_ONLY):
    """Cross-entropy of the gold object after the query (plus next-token
    terms over the sequence when ``loss_positions == "all"``)."""
    batch = make_batch([instance], loss_positions)
    logits, _ = forward_batch(params, batch.tokens)
    return _ce(logits, batch)[0]


def batch_loss(params, batch: Batch):
    logits, _ = forward_batch(params, batch.tokens)
    return _ce(logits, batch)[0]


# --------------------------------------------------------------------------
# backward


def backward(params: ModelParams, batch: Batch, check_finite=True):
    """Mean loss over the unmasked positions and its exact gradient.

    Returns ``(loss, grads, logits)``; ``grads`` is a ``ModelParams`` of
    gradients with the same shapes as ``params``.
    """
    logits, cache = forward_batch(params, batch.tokens)
    value, logp = _ce(logits, batch)
    grads = params.zeros_like()
    total = batch.mask.sum()
    if total == 0:
        return value, grads, logits

    # d loss / d logits = (softmax - onehot) * mask / total
    g_logits = np.exp(logp)
    np.put_along_axis(
        g_logits, batch.targets[..., None], np.take_along_axis(g_logits, batch.targets[..., None], -1) - 1.0, -1
    )
    g_logits *= (batch.mask / total)[..., None]

    d = params.config.d_model
    flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731
    grads.unembedding[:] = flat(cache.final).T @ flat(g_logits)
    g_x = g_logits @ params.unembedding.T

    for li in range(len(params.layers) - 1, -1, -1):
        lp, lc, gl = params.layers[li], cache.layers[li], grads.layers[li]
        A = lp.A
        g_y = g_x  # resid_out = resid + y
        g_u = g_y * lp.d_skip
        gl.d_skip[:] = (g_y * lc.u).sum(axis=(0, 1))

        g_delta, g_A, g_bp, g_cp, g_inj_u, _ = kernels.layer_backward(
            lc.delta, A, lc.bp, lc.cp, lc.u, lc.a_bar, lc.h, lc.h0, g_y
        )
        g_u += g_inj_u
        gl.a_log[:] = g_A * A

        g_z = g_delta * sigmoid(lc.z)
        gl.b_delta[:] = g_z.sum(axis=(0, 1))
        gl.w_delta_up[:] = flat(lc.r).T @ flat(g_z)
        g_r = g_z @ lp.w_delta_up.T
        gl.w_delta_down[:] = flat(lc.u).T @ flat(g_r)
        gl.w_B[:] = flat(lc.u).T @ flat(g_bp)
        gl.w_C[:] = flat(lc.u).T @ flat(g_cp)
        g_u += g_r @ lp.w_delta_down.T + g_bp @ lp.w_B.T + g_cp @ lp.w_C.T
        # u = resid / rms
        g_x = g_x + (g_u - lc.u * (g_u * lc.u).mean(axis=-1, keepdims=True)) / lc.rms

    np.add.at(grads.embedding, cache.tokens.ravel(), g_x.reshape(-1, d))

    if check_finite:
        for name, g in grads.named():
            if not np.all(np.isfinite(g)):
                raise NumericalFailure(f"non-finite gradient in {name}", name)
    return value, grads, logits


# --------------------------------------------------------------------------
# optimizers


class SGD:
    kind = "sgd"

    def __init__(self, lr):
        self.lr = lr
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for (_, p), (_, g) in zip(params.named(), grads.named()):
            p -= self.lr * g

    def state(self):
        return {"kind": self.kind, "t": self.t}, {}

    def load_state(self, meta, arrays):
        self.t = int(meta["t"])


class Adam:
    kind = "adam"

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * math.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        for (name, p), (_, g) in zip(params.named(), grads.named()):
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= scale * m / (np.sqrt(v) + self.eps)

    def state(self):
        meta = {"kind": self.kind, "t": self.t, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}
        arrays = {f"adam.m.{k}": v for k, v in self.m.items()}
        arrays.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return meta, arrays

    def load_state(self, meta, arrays):
        self.t = int(meta["t"])
        self.m = {k[len("adam.m.") :]: np.array(v, dtype=np.float64) for k, v in arrays.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v.") :]: np.array(v, dtype=np.float64) for k, v in arrays.items() if k.startswith("adam.v.")}


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.lr)
    return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)


def clip_gradients(grads: ModelParams, max_norm):
    norm = math.sqrt(sum(float((g * g).sum()) for _, g in grads.named()))
    if max_norm > 0 and norm > max_norm:
        for _, g in grads.named():
            g *= max_norm / norm
    return norm


# --------------------------------------------------------------------------
# loop


@dataclass
class Checkpoint:
    params: ModelParams
    step: int
    train_loss: float
    eval_accuracy: dict = field(default_factory=dict)  # eval set -> {k: accuracy}
    optimizer_state: tuple | None = None


@dataclass
class TrainResult:
    history: list[Checkpoint]
    params: ModelParams
    diverged: bool = False
    message: str = ""

    @property
    def last(self):
        return self.history[-1]


def _group_by_length(instances):
    groups = {}
    for inst in instances:
        groups.setdefault(len(inst), []).append(inst)
    return [groups[k] for k in sorted(groups)]


def accuracy_by_position(params, instances, batch_size=256):
    """Greedy answer accuracy per target position: ``{k: (correct, total)}``."""
    counts = {}
    for group in _group_by_length(instances):
        for s in range(0, len(group), batch_size):
            chunk = group[s : s + batch_size]
            logits, _ = forward_batch(params, np.stack([i.tokens for i in chunk]))
            pred = logits[:, -1].argmax(axis=-1)
            for inst, p in zip(chunk, pred):
                c, t = counts.get(inst.k, (0, 0))
                counts[inst.k] = (c + int(p == inst.gold_object), t + 1)
    return dict(sorted(counts.items()))


def train_loop(params: ModelParams, cfg: TrainConfig, dataset, eval_sets=None, log_path=None, optimizer=None,
               stop_sets=None):
    """Train in place on a copy of ``params``; deterministic under ``cfg.seed``.

    ``eval_sets`` maps a name to a list of instances; the training set itself
    is always evaluated as ``"train"``. A checkpoint is recorded at step 0, at
    every ``eval_interval`` and at the final step. With ``cfg.target_accuracy``
    set, training stops once every set named in ``stop_sets`` (default: just
    ``"train"``) reaches it.
    """
    dataset = list(dataset)
    if not dataset:
        raise ConfigError("empty training set")
    eval_sets = {"train": dataset, **(eval_sets or {})}
    params = params.copy()
    opt = optimizer or make_optimizer(cfg)
    rng = np.random.default_rng(cfg.seed)
    groups = _group_by_length(dataset)
    weights = np.array([len(g) for g in groups], dtype=float)
    weights /= weights.sum()
    writer = _LogWriter(log_path) if log_path else None

    history = []

    def record(step, train_loss):
        accs = {}
        for name, insts in eval_sets.items():
            counts = accuracy_by_position(params, insts)
            accs[name] = {k: c / t for k, (c, t) in counts.items()}
            if writer:
                writer.write(step, train_loss, name, counts)
        history.append(Checkpoint(params.copy(), step, train_loss, accs, opt.state()))
        log.info(
            "step %d loss %.4f %s",
            step,
            train_loss,
            " ".join(f"{name} acc {_mean_acc(a):.3f}" for name, a in accs.items()),
        )
        return accs

    initial_loss = dataset_loss(params, dataset, cfg.loss_positions)
    record(0, initial_loss)
    running = initial_loss
    step = 0
    try:
        for step in range(1, cfg.steps + 1):
            group = groups[rng.choice(len(groups), p=weights)] if len(groups) > 1 else groups[0]
            idx = rng.choice(len(group), size=min(cfg.batch_size, len(group)), replace=False)
            batch = make_batch([group[i] for i in idx], cfg.loss_positions)
            value, grads, _ = backward(params, batch)
            if not math.isfinite(value):
                raise NumericalFailure(f"loss became {value}")
            clip_gradients(grads, cfg.clip)
            opt.step(params, grads)
            running = 0.95 * running + 0.05 * value if step > 1 else value
            if step % cfg.eval_interval == 0 or step == cfg.steps:
                accs = record(step, running)
                if cfg.target_accuracy is not None and all(
                    _mean_acc(accs[name]) >= cfg.target_accuracy for name in stop_sets or ["train"]
                ):
                    break
    except NumericalFailure as exc:
        last = history[-1]
        if writer:
            writer.close()
        return TrainResult(history, last.params, diverged=True, message=f"step {step}: {exc}")
    if writer:
        writer.close()
    return TrainResult(history, params)


def dataset_loss(params, instances, loss_positions=ANSWER_ONLY, batch_size=256):
    """Mean loss over every unmasked position of every instance."""
    total = 0.0
    weight = 0.0
    for group in _group_by_length(instances):
        for s in range(0, len(group), batch_size):
            batch = make_batch(group[s : s + batch_size], loss_positions)
            n = batch.mask.sum()
            total += batch_loss(params, batch) * n
            weight += n
    return total / weight if weight else 0.0


def _mean_acc(per_k):
    return float(np.mean(list(per_k.values()))) if per_k else float("nan")


class _LogWriter:
    """Append-only CSV training log (columns: ``LOG_COLUMNS``)."""

    def __init__(self, path):
        path = Path(path)
        new = not path.exists() or path.stat().st_size == 0
        self._f = path.open("a", newline="")
        self._w = csv.writer(self._f, lineterminator="\n")
        if new:
            self._w.writerow(LOG_COLUMNS)

    def write(self, step, train_loss, name, counts):
        for k, (c, t) in counts.items():
            self._w.writerow([step, f"{train_loss:.9g}", name, k, f"{c / t:.9g}", c, t])
        self._f.flush()

    def close(self):
        self._f.close()
