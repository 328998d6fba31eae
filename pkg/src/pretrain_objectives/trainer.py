"""Pre-training loop: corruption, encoder, Adam, schedule and C-RTS feedback.

Every step draws its randomness from ``default_rng([seed, step])``, so a
run resumed from a checkpoint replays exactly the same batches, corruption
and dropout masks as an uninterrupted one.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .clustering import Clustering
from .corpus import TokenSequence, Vocabulary
from .feedback import FeedbackMatrix
from .model import (BINARY_HEAD, TOKEN_HEAD, AdamState, DivergenceError, ModelConfig, adam_step,
                    backward, forward, init_params, load_checkpoint, loss_binary, loss_token,
                    save_checkpoint)
from .objectives import IGNORE, CorruptedBatch, CorruptionConfig, Objective, corrupt_batch

logger = logging.getLogger(__name__)

EVAL_STREAM = 0x5EED


class TrainError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, state: "TrainState"):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.state = state


@dataclass(frozen=True)
class TrainConfig:
    objective: CorruptionConfig = field(default_factory=CorruptionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    steps: int = 2000
    batch_size: int = 32
    peak_lr: float = 1e-4
    warmup_steps: int = 100
    weight_decay: float = 0.01
    seed: int = 0
    eval_every: int = 200
    feedback_update_every: int = 1
    eval_rounds: int = 8
    heldout_every: int = 50

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainError("batch_size must be >= 1")
        if self.steps < 1:
            raise TrainError("steps must be >= 1")
        if not 0 <= self.warmup_steps < self.steps:
            raise TrainError("warmup_steps must be in [0, steps)")
        if self.eval_every < 1 or self.feedback_update_every < 1 or self.eval_rounds < 1:
            raise TrainError("eval_every, feedback_update_every and eval_rounds must be >= 1")
        if self.heldout_every < 2:
            raise TrainError("heldout_every must be >= 2")

    @property
    def head(self) -> str:
        return BINARY_HEAD if self.objective.kind.binary else TOKEN_HEAD

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objective"]["kind"] = self.objective.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["objective"] = CorruptionConfig(**d["objective"])
        d["model"] = ModelConfig(**d["model"])
        return cls(**d)


@dataclass
class MetricsRecord:
    step: int
    lr: float
    loss: float
    detection_precision: float | None
    detection_recall: float | None
    detection_f1: float | None
    token_accuracy: float | None
    tokens_seen: int
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainState:
    params: dict
    adam: AdamState
    step: int = 0
    tokens_seen: int = 0
    feedback: FeedbackMatrix | None = None
    pending_events: list = field(default_factory=list)


@dataclass
class PretrainResult:
    params: dict
    metrics: list[MetricsRecord]
    feedback: FeedbackMatrix | None
    state: TrainState
    lr_trace: list[float]
    events_per_step: list[int]
    train_losses: list[float]


def triangular_lr(step: int, warmup: int, total: int, peak: float) -> float:
    """Linear warm-up to `peak` over `warmup` steps, then linear decay to 0 at `total`."""
    if warmup >= total:
        raise TrainError("warmup must be < total")
    if not 0 <= step <= total:
        raise TrainError(f"step {step} outside [0, {total}]")
    if step < warmup:
        return peak * (step / warmup)
    return peak * ((total - step) / (total - warmup))


def split_heldout(corpus: Sequence[TokenSequence], every: int = 50):
    """Every `every`-th sequence (index 0, every, 2*every, ...) is held out."""
    corpus = list(corpus)
    heldout = corpus[::every]
    train = [s for i, s in enumerate(corpus) if i % every]
    if not train:
        raise TrainError("corpus too small to hold out a shard")
    return train, heldout


def detection_scores(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _confusion(logits, labels) -> tuple[int, int, int]:
    mask = labels != IGNORE
    pred = logits.argmax(-1)[mask]
    y = labels[mask]
    return (int(((pred == 1) & (y == 1)).sum()), int(((pred == 1) & (y == 0)).sum()),
            int(((pred == 0) & (y == 1)).sum()))


def evaluate_detection(params, cfg: ModelConfig, batches: Sequence[CorruptedBatch]):
    """Precision, recall and F1 with "replaced" as the positive class."""
    tp = fp = fn = 0
    positives = 0
    for b in batches:
        if b.binary_labels is None:
            raise TrainError("detection needs binary labels")
        logits = forward(params, cfg, b.input_ids, b.attention_mask)
        if logits.shape[-1] != 2:
            raise TrainError("detection needs a binary-head model")
        t, f, n = _confusion(logits, b.binary_labels)
        tp, fp, fn = tp + t, fp + f, fn + n
        positives += int((b.binary_labels == 1).sum())
    if positives == 0:
        raise TrainError("no positive labels in eval set")
    return detection_scores(tp, fp, fn)


def evaluate_token_accuracy(params, cfg: ModelConfig, batches: Sequence[CorruptedBatch]) -> float:
    correct = total = 0
    for b in batches:
        if b.token_labels is None:
            raise TrainError("token accuracy needs token labels")
        logits = forward(params, cfg, b.input_ids, b.attention_mask)
        mask = b.token_labels != IGNORE
        correct += int((logits.argmax(-1)[mask] == b.token_labels[mask]).sum())
        total += int(mask.sum())
    if total == 0:
        raise TrainError("no supervised positions")
    return correct / total


def heldout_batches(heldout, vocab, cfg: TrainConfig, clustering=None, feedback=None):
    """Corrupted held-out batches; fixed randomness, current F snapshot."""
    rng = np.random.default_rng([cfg.seed, EVAL_STREAM])
    seqs = list(heldout) * cfg.eval_rounds
    return [corrupt_batch(seqs[i:i + cfg.batch_size], vocab, cfg.objective, rng,
                          clustering, feedback)
            for i in range(0, len(seqs), cfg.batch_size)]


def heldout_loss(params, cfg: ModelConfig, batches: Sequence[CorruptedBatch]) -> float:
    total = 0.0
    count = 0
    for b in batches:
        logits = forward(params, cfg, b.input_ids, b.attention_mask)
        fn = loss_binary if b.kind.binary else loss_token
        n = int((b.labels != IGNORE).sum())
        total += fn(logits, b.labels)[0] * n
        count += n
    return total / count


def evaluate(state: TrainState, heldout, vocab, cfg: TrainConfig, clustering=None,
             lr: float = 0.0, wall_ms: float = 0.0) -> MetricsRecord:
    batches = heldout_batches(heldout, vocab, cfg, clustering, state.feedback)
    loss = heldout_loss(state.params, cfg.model, batches)
    p = r = f1 = acc = None
    if cfg.objective.kind.binary:
        p, r, f1 = evaluate_detection(state.params, cfg.model, batches)
    else:
        acc = evaluate_token_accuracy(state.params, cfg.model, batches)
    return MetricsRecord(state.step, lr, loss, p, r, f1, acc, state.tokens_seen, wall_ms)


def initial_state(cfg: TrainConfig, n_clusters: int | None = None) -> TrainState:
    params = init_params(cfg.model, cfg.head, cfg.seed)
    fb = FeedbackMatrix(n_clusters) if cfg.objective.kind is Objective.CRTS else None
    return TrainState(params, AdamState.zeros_like(params), feedback=fb)


def pretrain(corpus: Sequence[TokenSequence], vocab: Vocabulary, cfg: TrainConfig,
             clustering: Clustering | None = None, feedback: FeedbackMatrix | None = None,
             state: TrainState | None = None, stop_at: int | None = None,
             on_metrics: Callable[[MetricsRecord], None] | None = None,
             checkpoint_path=None) -> PretrainResult:
    """Run (or resume) pre-training up to `stop_at` or ``cfg.steps``.

    For C-RTS, `clustering` is required and `feedback` (or the one carried
    by `state`) is updated in place from the discriminator's argmax
    predictions on replaced positions. On divergence the last good state is
    written to `checkpoint_path` (when given) and ``TrainingDiverged`` raised.
    """
    is_crts = cfg.objective.kind is Objective.CRTS
    if cfg.model.vocab_size != vocab.size:
        raise TrainError(f"model vocab_size {cfg.model.vocab_size} != vocabulary size {vocab.size}")
    if is_crts != (clustering is not None):
        raise TrainError("clustering must be given exactly when the objective is CRTS")
    if clustering is not None and clustering.vocab_size != vocab.size:
        raise TrainError("clustering does not cover the vocabulary")
    if not is_crts and feedback is not None:
        raise TrainError("feedback matrix given for a non-CRTS objective")
    corpus = list(corpus)
    if not corpus:
        raise TrainError("empty corpus")
    if any(len(s.ids) > cfg.model.max_len for s in corpus):
        raise TrainError("sequences longer than the model's max_len")
    train, heldout = split_heldout(corpus, cfg.heldout_every)

    fresh = state is None
    if fresh:
        state = initial_state(cfg, clustering.n if is_crts else None)
        if feedback is not None:
            state.feedback = feedback
    if is_crts:
        if state.feedback is None or state.feedback.n != clustering.n:
            raise TrainError("feedback matrix does not match the clustering")
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)

    t0 = time.perf_counter()
    metrics: list[MetricsRecord] = []

    def emit(lr):
        rec = evaluate(state, heldout, vocab, cfg, clustering, lr,
                       (time.perf_counter() - t0) * 1000.0)
        metrics.append(rec)
        if on_metrics:
            on_metrics(rec)
        logger.info("step %d loss %.4f", rec.step, rec.loss)

    if fresh:
        emit(triangular_lr(0, cfg.warmup_steps, cfg.steps, cfg.peak_lr))

    lr_trace, events_per_step, train_losses = [], [], []
    for t in range(state.step + 1, end + 1):
        rng = np.random.default_rng([cfg.seed, t])
        idx = rng.integers(len(train), size=cfg.batch_size)
        batch = corrupt_batch([train[i] for i in idx], vocab, cfg.objective, rng,
                              clustering, state.feedback)
        try:
            loss, grads, logits = backward(state.params, cfg.model, batch.input_ids,
                                           batch.attention_mask, batch.labels,
                                           train_mode=True, rng=rng)
            lr = triangular_lr(t, cfg.warmup_steps, cfg.steps, cfg.peak_lr)
            adam_step(state.params, grads, state.adam, t, lr, weight_decay=cfg.weight_decay)
        except DivergenceError:
            if checkpoint_path is not None:
                save_training_checkpoint(checkpoint_path, cfg, state)
            raise TrainingDiverged(t, state) from None
        state.step = t
        state.tokens_seen += int(batch.attention_mask.sum())
        lr_trace.append(lr)
        train_losses.append(loss)
        if is_crts:
            ev = batch.events
            detected = logits[ev[:, 2], ev[:, 3]].argmax(-1) == 1
            state.pending_events.extend(
                (int(a), int(b), bool(d)) for (a, b), d in zip(ev[:, :2], detected))
            events_per_step.append(len(ev))
            if t % cfg.feedback_update_every == 0:
                state.feedback.update(state.pending_events)
                state.pending_events = []
        if t % cfg.eval_every == 0 or t == cfg.steps:
            emit(lr)

    if checkpoint_path is not None:
        save_training_checkpoint(checkpoint_path, cfg, state)
    return PretrainResult(state.params, metrics, state.feedback, state, lr_trace,
                          events_per_step, train_losses)


# -- checkpoints -----------------------------------------------------------

def feedback_sidecar(path) -> Path:
    return Path(str(path) + ".feedback")


def save_training_checkpoint(path, cfg: TrainConfig, state: TrainState) -> None:
    header = {
        "format": 1,
        "train_config": cfg.to_dict(),
        "head": cfg.head,
        "step": state.step,
        "tokens_seen": state.tokens_seen,
        "pending_events": [list(map(int, e)) for e in state.pending_events],
    }
    tensors = dict(state.params)
    tensors.update({f"adam.m.{k}": v for k, v in state.adam.m.items()})
    tensors.update({f"adam.v.{k}": v for k, v in state.adam.v.items()})
    save_checkpoint(path, header, tensors)
    if state.feedback is not None:
        state.feedback.save(feedback_sidecar(path))


def load_training_checkpoint(path) -> tuple[TrainConfig, TrainState]:
    header, tensors = load_checkpoint(path)
    cfg = TrainConfig.from_dict(header["train_config"])
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    m = {k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")}
    v = {k[len("adam.v."):]: v for k, v in tensors.items() if k.startswith("adam.v.")}
    fb = None
    if cfg.objective.kind is Objective.CRTS:
        side = feedback_sidecar(path)
        if not side.exists():
            raise TrainError(f"missing feedback sidecar {side}")
        fb = FeedbackMatrix.load(side)
    state = TrainState(params, AdamState(m, v), step=header["step"],
                       tokens_seen=header["tokens_seen"], feedback=fb,
                       pending_events=[(a, b, bool(d)) for a, b, d in header["pending_events"]])
    return cfg, state
