"""Training loop, teacher ensembling, and perplexity evaluation.

Optimization is plain SGD with global-norm gradient clipping, optional
plateau LR decay, and optional ASGD-style parameter averaging that arms after
a configurable number of non-improving validation epochs. Teacher soft labels
are computed on the fly per batch; teacher state is carried across the same
token lanes the student sees. Everything is deterministic per (config, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import TokenStream, bptt_batches
from .errors import ConfigError, DataError, TrainingError
from .losses import DistillLossSpec, SoftLabelBatch, distill_loss
from .model import LmModel, LmState, flatten_targets, model_forward
from .regularization import RegContext, activation_reg
from .tensor import Tape, Tensor, backward

__all__ = ["TrainConfig", "EpochLog", "TrainResult", "TeacherEnsemble",
           "OneHotOracle", "ensemble_predict", "train", "perplexity",
           "clip_gradients"]


@dataclass
class TrainConfig:
    loss: DistillLossSpec = field(default_factory=DistillLossSpec)
    lr: float = 1.0
    grad_clip: float = 0.25
    epochs: int = 1
    batch_size: int = 2
    bptt_len: int = 8
    seed: int = 0
    asgd_trigger_patience: int = 0  # 0 disables averaging
    lr_decay_on_plateau: float = 1.0  # multiplier applied when validation stalls

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be > 0, got {self.grad_clip}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.asgd_trigger_patience < 0:
            raise ConfigError(f"asgd_trigger_patience must be >= 0, "
                              f"got {self.asgd_trigger_patience}")
        if not (0.0 < self.lr_decay_on_plateau <= 1.0):
            raise ConfigError(f"lr_decay_on_plateau must be in (0, 1], "
                              f"got {self.lr_decay_on_plateau}")


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    valid_ppl: float
    lr: float

    def line(self) -> str:
        return (f"epoch={self.epoch} train_loss={self.train_loss:.6f} "
                f"valid_ppl={self.valid_ppl:.6f} lr={self.lr:.6g}")


@dataclass
class TrainResult:
    logs: list[EpochLog]
    best_valid_ppl: float
    best_epoch: int


class TeacherEnsemble:
    """Frozen teacher models combined by an arithmetic mean of distributions."""

    def __init__(self, members: list[LmModel]):
        if not members:
            raise ConfigError("teacher ensemble needs at least one member")
        v = members[0].config.vocab_size
        for m in members[1:]:
            if m.config.vocab_size != v:
                raise ConfigError(
                    f"ensemble members disagree on vocab size: {v} vs "
                    f"{m.config.vocab_size}")
        self.members = members
        self._states: list[LmState] | None = None

    @property
    def vocab_size(self) -> int:
        return self.members[0].config.vocab_size

    @classmethod
    def from_checkpoints(cls, paths) -> "TeacherEnsemble":
        from .checkpoint import load_checkpoint
        return cls([load_checkpoint(p) for p in paths])

    def reset_state(self, batch_size: int) -> None:
        self._states = [m.init_state(batch_size) for m in self.members]

    def soft_labels(self, inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
        """Q rows (time-major) for one batch, carrying member state forward."""
        if self._states is None or self._states[0].batch_size != inputs.shape[0]:
            self.reset_state(inputs.shape[0])
        q, self._states = ensemble_predict(self, inputs, self._states)
        return q


def ensemble_predict(ensemble: TeacherEnsemble, tokens: np.ndarray,
                     states: list[LmState]) -> tuple[np.ndarray, list[LmState]]:
    """Mean of member next-word distributions, plus each member's new state.

    Rows are time-major, matching model_forward's log_probs layout. Member
    order is fixed, so the result is deterministic.
    """
    if len(states) != len(ensemble.members):
        raise ConfigError(f"{len(states)} states for {len(ensemble.members)} members")
    total = None
    new_states = []
    for member, state in zip(ensemble.members, states):
        out = model_forward(member, tokens, state)  # eval mode, no tape
        p = np.exp(out.log_probs.data)
        total = p if total is None else total + p
        new_states.append(out.state)
    return total / len(ensemble.members), new_states


class OneHotOracle:
    """Degenerate teacher that puts all mass on the true next token."""

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size

    def reset_state(self, batch_size: int) -> None:
        pass

    def soft_labels(self, inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
        y = flatten_targets(targets)
        q = np.zeros((y.shape[0], self.vocab_size))
        q[np.arange(y.shape[0]), y] = 1.0
        return q


def clip_gradients(params: list[tuple[str, Tensor]], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    if max_norm <= 0:
        raise ConfigError(f"grad_clip must be > 0, got {max_norm}")
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


class _Averager:
    """Running arithmetic mean of parameters, started at the ASGD trigger."""

    def __init__(self, params: list[tuple[str, Tensor]]):
        self.avg = [p.data.copy() for _, p in params]
        self.steps = 1

    def update(self, params: list[tuple[str, Tensor]]) -> None:
        self.steps += 1
        for acc, (_, p) in zip(self.avg, params):
            acc += (p.data - acc) / self.steps


def _snapshot(params) -> list[np.ndarray]:
    return [p.data.copy() for _, p in params]


def _restore(params, snap: list[np.ndarray]) -> None:
    for (_, p), arr in zip(params, snap):
        p.data = arr.copy()


def train(model: LmModel, train_stream: TokenStream, valid_stream: TokenStream,
          cfg: TrainConfig, teacher=None, log_fn=None) -> TrainResult:
    """Train the model in place; on return it holds the best-validation params.

    teacher must be present exactly when the loss variant consumes soft labels
    (anything but ce_only). Raises TrainingError naming the batch if the loss
    goes non-finite.
    """
    if cfg.loss.needs_teacher and teacher is None:
        raise ConfigError(f"loss variant {cfg.loss.variant!r} needs a teacher")
    if not cfg.loss.needs_teacher and teacher is not None:
        raise ConfigError("ce_only training takes no teacher")

    batches = bptt_batches(train_stream, cfg.batch_size, cfg.bptt_len)
    params = model.parameters()
    ctx = RegContext("train", seed=cfg.seed)
    rates = model.config.dropout
    use_reg = rates.ar_weight > 0 or rates.tar_weight > 0

    logs: list[EpochLog] = []
    lr = cfg.lr
    best_ppl = math.inf
    best_epoch = 0
    best_params: list[np.ndarray] | None = None
    bad_epochs = 0
    averager: _Averager | None = None

    for epoch in range(1, cfg.epochs + 1):
        state = model.init_state(cfg.batch_size)
        if teacher is not None:
            teacher.reset_state(cfg.batch_size)
        loss_sum = 0.0
        for bi, batch in enumerate(batches):
            q = teacher.soft_labels(batch.inputs, batch.targets) if teacher is not None else None
            y = flatten_targets(batch.targets)
            if q is not None:
                q = SoftLabelBatch(q, y).q  # validates rows and ids
            ctx.new_sequence()
            with Tape() as tape:
                out = model_forward(model, batch.inputs, state, ctx)
                loss = distill_loss(cfg.loss, out.probs, y, q)
                if use_reg:
                    loss = T.add(loss, activation_reg(
                        out.dropped_outputs, out.raw_outputs,
                        rates.ar_weight, rates.tar_weight))
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingError(
                        f"non-finite loss {value} at epoch {epoch}, batch {bi}")
                backward(loss, tape)
            state = out.state.detach()
            clip_gradients(params, cfg.grad_clip)
            for _, p in params:
                if p.grad is not None:
                    p.data -= lr * p.grad
            model.zero_grad()
            if averager is not None:
                averager.update(params)
            loss_sum += value

        train_loss = loss_sum / len(batches)
        if averager is None:
            valid_ppl = perplexity(model, valid_stream)
        else:
            raw = _snapshot(params)
            _restore(params, averager.avg)
            valid_ppl = perplexity(model, valid_stream)
            _restore(params, raw)

        entry = EpochLog(epoch, train_loss, valid_ppl, lr)
        logs.append(entry)
        if log_fn is not None:
            log_fn(entry.line())

        if valid_ppl < best_ppl:
            best_ppl = valid_ppl
            best_epoch = epoch
            best_params = averager.avg if averager is not None else _snapshot(params)
            best_params = [a.copy() for a in best_params]
            bad_epochs = 0
        else:
            bad_epochs += 1
            if cfg.lr_decay_on_plateau < 1.0:
                lr *= cfg.lr_decay_on_plateau
            if (cfg.asgd_trigger_patience > 0 and averager is None
                    and bad_epochs >= cfg.asgd_trigger_patience):
                averager = _Averager(params)

    if best_params is not None:
        _restore(params, best_params)
    return TrainResult(logs, best_ppl, best_epoch)


def perplexity(model: LmModel, stream: TokenStream, batch_size: int = 1,
               bptt_len: int = 32) -> float:
    """exp of the mean natural-log NLL over all batched target tokens (eos included).

    The window is clamped to the lane length so short validation streams are
    still fully covered rather than rejected.
    """
    lane_len = len(stream) // batch_size
    if lane_len < 2:
        raise DataError(f"stream of {len(stream)} tokens too short for "
                        f"{batch_size} evaluation lanes")
    batches = bptt_batches(stream, batch_size, min(bptt_len, lane_len - 1))
    state = model.init_state(batch_size)
    total = 0.0
    count = 0
    for batch in batches:
        out = model_forward(model, batch.inputs, state)
        y = flatten_targets(batch.targets)
        total += float(-out.log_probs.data[np.arange(y.shape[0]), y].sum())
        count += y.shape[0]
        state = out.state
    if count == 0:
        raise DataError("no target tokens to evaluate")
    return math.exp(total / count)
