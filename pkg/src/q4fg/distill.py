"""Quantization-aware training with knowledge distillation, plus synthetic tasks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, TrainingError
from .model import ForwardOutput, Model, QuantStrategy, forward
from .sparsity import CompositionOrder, MovementPruner
from .tensor import Adam, Tensor, backward, cross_entropy, log_softmax, mean, mul, sub, sum_

LOG_HEADER = ("step", "loss", "loss_logit", "loss_att", "loss_rep", "loss_task", "eval_metric")
TASKS = ("majority_classification", "markov_lm", "copy_lm")


@dataclass(frozen=True)
class KDConfig:
    w_logit: float = 1.0
    w_att: float = 0.0
    w_rep: float = 0.0
    w_task: float = 0.0
    att_variant: str = "prenorm"
    temperature: float = 1.0

    def __post_init__(self):
        ws = (self.w_logit, self.w_att, self.w_rep, self.w_task)
        if min(ws) < 0 or max(ws) <= 0:
            raise ConfigError("KD weights must be non-negative with at least one positive")
        if self.att_variant not in ("normalized", "prenorm"):
            raise ConfigError(f"att_variant must be 'normalized' or 'prenorm', got {self.att_variant!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    @property
    def needs_teacher(self) -> bool:
        return self.w_logit > 0 or self.w_att > 0 or self.w_rep > 0


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 1
    batch_size: int = 32
    dropout: float = 0.0
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_steps: int | None = None
    eval_every: int = 100
    order: str = CompositionOrder.PRUNE_THEN_QUANT.value

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be >= 1")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    task: str
    vocab_size: int
    train_x: np.ndarray
    val_x: np.ndarray
    train_y: np.ndarray | None = None
    val_y: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def is_lm(self) -> bool:
        return self.task != "majority_classification"

    @property
    def num_train(self) -> int:
        return len(self.train_x)

    def batch(self, split: str, idx=None, seq2seq: bool = False):
        """``(inputs, targets)`` for rows ``idx`` of ``split``."""
        x = self.train_x if split == "train" else self.val_x
        y = self.train_y if split == "train" else self.val_y
        if idx is not None:
            x = x[idx]
            y = None if y is None else y[idx]
        if not self.is_lm:
            return x, y
        if seq2seq:
            return (x[:, 1:], x[:, :-1]), x[:, 1:]
        return x[:, :-1], x[:, 1:]


def markov_entropy_rate(transition: np.ndarray) -> tuple[float, np.ndarray]:
    """Entropy rate (nats) and stationary distribution of a Markov chain."""
    p = np.asarray(transition, dtype=np.float64)
    vals, vecs = np.linalg.eig(p.T)
    pi = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    pi = pi / pi.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(p > 0, np.log(p), 0.0)
    return float(-(pi[:, None] * p * logs).sum()), pi


def synth_data(task: str, seed: int = 0, **sizes) -> Dataset:
    """Deterministic synthetic datasets with known optimal baselines.

    ``majority_classification``: sequences over ``num_classes`` symbols, the
    label is the most frequent symbol (ties are redrawn); Bayes accuracy 1.
    ``markov_lm``: windows of a stationary first-order chain; optimal
    perplexity is ``exp(entropy_rate)``.  ``copy_lm``: ``x SEP x``; a perfect
    copier has perplexity 1 on the copy region.
    """
    rng = np.random.default_rng(seed)
    if task == "majority_classification":
        k = sizes.get("num_classes", 3)
        t = sizes.get("seq_len", 12)
        n_train, n_val = sizes.get("n_train", 2000), sizes.get("n_val", 500)
        xs, ys = [], []
        while len(xs) < n_train + n_val:
            row = rng.integers(0, k, size=t)
            counts = np.bincount(row, minlength=k)
            if (counts == counts.max()).sum() > 1:
                continue
            xs.append(row)
            ys.append(int(counts.argmax()))
        x, y = np.array(xs), np.array(ys)
        return Dataset(task, k, x[:n_train], x[n_train:], y[:n_train], y[n_train:],
                       {"bayes_accuracy": 1.0, "num_classes": k})
    if task == "markov_lm":
        if "transition" in sizes:
            p = np.asarray(sizes["transition"], dtype=np.float64)
        else:
            s = sizes.get("num_states", 8)
            p = rng.dirichlet(np.full(s, sizes.get("concentration", 0.5)), size=s)
        s = p.shape[0]
        t = sizes.get("seq_len", 16)
        n_train, n_val = sizes.get("n_train", 2000), sizes.get("n_val", 200)
        h, pi = markov_entropy_rate(p)
        total = (n_train + n_val) * (t + 1)
        stream = np.empty(total, dtype=np.int64)
        stream[0] = rng.choice(s, p=pi)
        cum = np.cumsum(p, axis=1)
        u = rng.random(total)
        for i in range(1, total):
            stream[i] = min(int(np.searchsorted(cum[stream[i - 1]], u[i], side="right")), s - 1)
        w = stream.reshape(-1, t + 1)
        return Dataset(task, s, w[:n_train], w[n_train:],
                       info={"transition": p, "stationary": pi, "entropy_rate": h, "optimal_ppl": math.exp(h)})
    if task == "copy_lm":
        k = sizes.get("num_symbols", 8)
        length = sizes.get("copy_len", 6)
        n_train, n_val = sizes.get("n_train", 2000), sizes.get("n_val", 200)
        sep = k
        src = rng.integers(0, k, size=(n_train + n_val, length))
        x = np.concatenate([src, np.full((len(src), 1), sep), src], axis=1)
        # positions of targets (in the shifted [:, 1:] view) that are copies
        copy_mask = np.zeros(2 * length, dtype=bool)
        copy_mask[length:] = True
        return Dataset(task, k + 1, x[:n_train], x[n_train:],
                       info={"sep": sep, "copy_mask": copy_mask, "optimal_copy_ppl": 1.0})
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _mse(a: Tensor, b: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    d = sub(a, Tensor(b, dtype=a.dtype))
    sq = mul(d, d)
    if weight is None:
        return mean(sq)
    w = np.broadcast_to(weight, a.shape).astype(a.dtype)
    return mul(sum_(mul(sq, Tensor(w, dtype=a.dtype))), 1.0 / float(w.sum()))


def _teacher_key(key: tuple, layer_map: dict | None) -> tuple:
    stack, i = key[0], key[1]
    if layer_map is None:
        return key
    try:
        j = layer_map[stack][i]
    except (KeyError, IndexError):
        raise ConfigError(f"no teacher layer mapped for student {stack} layer {i}") from None
    return (stack, j) + tuple(key[2:])


def kd_loss(student_out: ForwardOutput, teacher_out: ForwardOutput | None, cfg: KDConfig,
            targets: np.ndarray | None = None, layer_map: dict | None = None) -> tuple[Tensor, dict]:
    """Weighted sum of logit KL, attention MSE, hidden-state MSE and task loss.

    Returns the total (differentiable) and a dict of the individual terms.
    """
    s_logits = student_out.logits
    dt = s_logits.dtype
    zero = Tensor(np.zeros((), dtype=dt), dtype=dt)
    terms = {"loss_logit": zero, "loss_att": zero, "loss_rep": zero, "loss_task": zero}
    if cfg.needs_teacher and teacher_out is None:
        raise ConfigError("KD terms need teacher outputs")

    if cfg.w_logit > 0:
        t = cfg.temperature
        tl = teacher_out.logits.data.astype(np.float64) / t
        tl = tl - tl.max(axis=-1, keepdims=True)
        log_pt = tl - np.log(np.exp(tl).sum(axis=-1, keepdims=True))
        pt = np.exp(log_pt)
        log_ps = log_softmax(mul(s_logits, 1.0 / t), axis=-1)
        rows = int(np.prod(s_logits.shape[:-1]))
        kl = sum_(mul(sub(Tensor(log_pt.astype(dt), dtype=dt), log_ps), Tensor(pt.astype(dt), dtype=dt)))
        terms["loss_logit"] = mul(kl, (t * t) / rows)

    if cfg.w_att > 0 or cfg.w_rep > 0:
        t_att = {k: i for i, k in enumerate(teacher_out.attention_keys)}
        t_hid = {k: i for i, k in enumerate(teacher_out.hidden_keys)}
    if cfg.w_att > 0:
        acc = zero
        for key, sc, pr, allowed in zip(student_out.attention_keys, student_out.attention_scores,
                                        student_out.attention_probs, student_out.attention_allowed):
            tk = _teacher_key(key, layer_map)
            if tk not in t_att:
                raise ConfigError(f"teacher has no attention module {tk}")
            j = t_att[tk]
            if cfg.att_variant == "normalized":
                acc = acc + _mse(pr, teacher_out.attention_probs[j].data)
            else:
                acc = acc + _mse(sc, teacher_out.attention_scores[j].data, allowed if not allowed.all() else None)
        terms["loss_att"] = acc
    if cfg.w_rep > 0:
        acc = zero
        for key, hs in zip(student_out.hidden_keys, student_out.hidden_states):
            tk = _teacher_key(key, layer_map)
            if tk not in t_hid:
                raise ConfigError(f"teacher has no hidden state {tk}")
            acc = acc + _mse(hs, teacher_out.hidden_states[t_hid[tk]].data)
        terms["loss_rep"] = acc
    if cfg.w_task > 0:
        if targets is None:
            raise ConfigError("task loss needs targets")
        terms["loss_task"] = cross_entropy(s_logits, targets)

    total = (mul(terms["loss_logit"], cfg.w_logit) + mul(terms["loss_att"], cfg.w_att)
             + mul(terms["loss_rep"], cfg.w_rep) + mul(terms["loss_task"], cfg.w_task))
    return total, {k: float(v.item()) for k, v in terms.items()}


# ---------------------------------------------------------------------------
# evaluation and training
# ---------------------------------------------------------------------------

def evaluate(model: Model, data: Dataset, strategy: QuantStrategy | None = None, masks=None,
             order=CompositionOrder.PRUNE_THEN_QUANT, split: str = "val", batch_size: int = 256) -> float:
    """Accuracy (classification) or perplexity (language modelling) on ``split``."""
    seq2seq = model.cfg.arch == "encoder_decoder"
    n = len(data.val_x if split == "val" else data.train_x)
    correct = 0
    nll_sum = 0.0
    count = 0
    for s in range(0, n, batch_size):
        idx = np.arange(s, min(n, s + batch_size))
        inputs, targets = data.batch(split, idx, seq2seq=seq2seq)
        logits = forward(model, inputs, strategy, masks, order=order).logits.data.astype(np.float64)
        if not data.is_lm:
            correct += int((logits.argmax(axis=-1) == targets).sum())
            count += len(targets)
        else:
            z = logits - logits.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            nll_sum += float(-np.take_along_axis(logp, targets[..., None], axis=-1).sum())
            count += targets.size
    return correct / count if not data.is_lm else math.exp(nll_sum / count)


@dataclass
class TrainResult:
    log: list[dict]
    best_step: int
    best_metric: float
    best_state: dict[str, np.ndarray]
    metric_mode: str

    def write_csv(self, path) -> None:
        write_log_csv(self.log, path)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def write_log_csv(log: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for row in log:
            w.writerow([row["step"]] + [_fmt(row.get(k)) for k in LOG_HEADER[1:]])


def qat_train(student: Model, teacher: Model | None, data: Dataset, train_cfg: TrainConfig, kd_cfg: KDConfig,
              strategy: QuantStrategy | None = None, masks: dict | None = None,
              movement: MovementPruner | None = None, layer_map: dict | None = None) -> TrainResult:
    """Train ``student`` (in place) against a frozen ``teacher``.

    The returned result carries the per-eval log and a copy of the student's
    parameters at the best logged evaluation point.  ``teacher=None`` with a
    task-only KD config gives plain supervised training.
    """
    if kd_cfg.needs_teacher and teacher is None:
        raise ConfigError("KD terms configured but no teacher given")
    order = CompositionOrder(train_cfg.order)
    seq2seq = student.cfg.arch == "encoder_decoder"
    rng = np.random.default_rng(train_cfg.seed)
    n = data.num_train
    steps_per_epoch = math.ceil(n / train_cfg.batch_size)
    total = train_cfg.max_steps if train_cfg.max_steps is not None else train_cfg.epochs * steps_per_epoch
    metric_mode = "min" if data.is_lm else "max"
    if layer_map is None and teacher is not None:
        layer_map = student.layer_map

    student.trainable(True)
    opt = Adam(student.params, lr=train_cfg.lr, betas=train_cfg.betas, eps=train_cfg.eps)
    log: list[dict] = []
    best = (None, -math.inf if metric_mode == "max" else math.inf, None)

    def current_masks():
        return movement.masks if movement is not None else masks

    def record(step: int, parts: dict | None, loss: float | None) -> None:
        nonlocal best
        metric = evaluate(student, data, strategy, current_masks(), order)
        row = {"step": step, "loss": loss, "eval_metric": metric, **(parts or {})}
        log.append(row)
        better = metric > best[1] if metric_mode == "max" else metric < best[1]
        if better or best[0] is None:
            best = (step, metric, student.state_dict())

    record(0, None, None)
    perm = rng.permutation(n)
    cursor = 0
    for step in range(1, total + 1):
        if cursor + train_cfg.batch_size > n:
            perm = rng.permutation(n)
            cursor = 0
        idx = perm[cursor:cursor + train_cfg.batch_size]
        cursor += train_cfg.batch_size
        inputs, targets = data.batch("train", idx, seq2seq=seq2seq)
        t_out = forward(teacher, inputs, None) if kd_cfg.needs_teacher else None
        s_out = forward(student, inputs, strategy, current_masks(), mode="train", order=order,
                        dropout_rate=train_cfg.dropout, rng=rng)
        loss, parts = kd_loss(s_out, t_out, kd_cfg, targets, layer_map)
        lv = float(loss.item())
        if not math.isfinite(lv):
            raise TrainingError(f"non-finite loss {lv} at step {step}")
        opt.zero_grad()
        backward(loss)
        if movement is not None:
            weights = {k: student.params[k + ".weight"] for k in movement.scores}
            movement.update(weights, {k: w.grad for k, w in weights.items()})
        opt.step()
        if step % train_cfg.eval_every == 0 or step == total:
            record(step, parts, lv)
    student.trainable(False)
    return TrainResult(log, best[0], best[1], best[2], metric_mode)


def train_float(model: Model, data: Dataset, train_cfg: TrainConfig) -> TrainResult:
    """Supervised float training on the task loss alone (teacher preparation)."""
    return qat_train(model, None, data, train_cfg, KDConfig(w_logit=0.0, w_task=1.0))
