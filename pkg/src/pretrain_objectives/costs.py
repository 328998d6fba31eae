"""Analytic parameter and FLOPS accounting for encoder pre-training.

Counting conventions: a multiply-add is 2 FLOPs; layer norm, softmax and
GELU are charged a few FLOPs per element; training costs 3x the forward
pass. Vocabulary heads of MLM/SLM are evaluated only on the predicted
positions (`lm_output_frac` of the sequence), the binary heads of RTS and
C-RTS on every position.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

from .model import ModelConfig

TOKEN_HEAD_OBJECTIVES = ("MLM", "SLM", "TD")
BINARY_HEAD_OBJECTIVES = ("RTS", "CRTS")
OBJECTIVES = TOKEN_HEAD_OBJECTIVES + BINARY_HEAD_OBJECTIVES

TRAIN_MULTIPLIER = 3
LAYER_NORM_FLOPS = 5
SOFTMAX_FLOPS = 5
GELU_FLOPS = 8


class CostError(ValueError):
    pass


@dataclass(frozen=True)
class HeadCost:
    params: int
    flops: float


@dataclass(frozen=True)
class CostReport:
    params_total: int
    params_head: int
    head_fraction: float
    flops_per_step_forward: float
    flops_per_step_train: float
    flops_total: float
    head_flops_share: float

    def to_dict(self) -> dict:
        return asdict(self)


def _check_objective(objective: str) -> str:
    objective = str(getattr(objective, "value", objective)).upper().replace("-", "")
    if objective not in OBJECTIVES:
        raise CostError(f"unknown objective {objective!r}")
    return objective


def head_cost(objective: str, bs: int, L: int, H: int, V: int,
              predicted_fraction: float = 1.0) -> HeadCost:
    """Parameters and forward FLOPs per step of the output head.

    `predicted_fraction` scales the vocabulary head to the share of
    positions it is evaluated on; the binary head always covers all of them.
    """
    objective = _check_objective(objective)
    if min(bs, L, H, V) < 1:
        raise CostError("bs, L, H and V must be positive")
    if not 0.0 < predicted_fraction <= 1.0:
        raise CostError("predicted_fraction must be in (0, 1]")
    if objective in TOKEN_HEAD_OBJECTIVES:
        return HeadCost(H * V + V, 2.0 * bs * L * predicted_fraction * H * V)
    return HeadCost(2 * H + 2, 2.0 * bs * L * H * 2)


def backbone_params(cfg: ModelConfig) -> int:
    H, Fd = cfg.hidden, cfg.ffn_dim
    per_layer = 4 * (H * H + H) + (H * Fd + Fd) + (Fd * H + H) + 2 * 2 * H
    return cfg.vocab_size * H + cfg.max_len * H + cfg.layers * per_layer + 2 * H


def backbone_flops_per_token(cfg: ModelConfig, L: int) -> float:
    """Forward FLOPs per token of embeddings plus all encoder layers at length L."""
    H, Fd, nh = cfg.hidden, cfg.ffn_dim, cfg.heads
    attn = (
        2 * 3 * H * H + 3 * H          # q, k, v projections
        + 2 * H * L                    # scores
        + (SOFTMAX_FLOPS + 1) * nh * L  # scale + softmax
        + 2 * H * L                    # weighted values
        + 2 * H * H + H                # output projection
        + H                            # residual
        + LAYER_NORM_FLOPS * H
    )
    ffn = (
        2 * H * Fd + Fd + GELU_FLOPS * Fd
        + 2 * Fd * H + H
        + H
        + LAYER_NORM_FLOPS * H
    )
    embed = H + LAYER_NORM_FLOPS * H  # position add + final norm
    return cfg.layers * (attn + ffn) + embed


def model_cost(cfg: ModelConfig, objective: str, bs: int, steps: int,
               phases: list[tuple[int, int]] | None = None,
               lm_output_frac: float = 0.15) -> CostReport:
    """Cost of pre-training `cfg` with `objective`.

    `phases` is a list of (steps, sequence_length); by default a single
    phase of `steps` at ``cfg.max_len``. Per-step fields are step-weighted
    averages over the phases.
    """
    objective = _check_objective(objective)
    if bs < 1 or steps < 0:
        raise CostError("bs must be >= 1 and steps >= 0")
    if phases is None:
        phases = [(steps, cfg.max_len)]
    if any(L > cfg.max_len or L < 1 or n < 0 for n, L in phases):
        raise CostError("phase lengths must lie in [1, max_len] with non-negative steps")
    frac = lm_output_frac if objective in TOKEN_HEAD_OBJECTIVES else 1.0

    head_params = head_cost(objective, 1, 1, cfg.hidden, cfg.vocab_size).params
    params_total = backbone_params(cfg) + head_params

    def step_flops(L):
        head_f = head_cost(objective, bs, L, cfg.hidden, cfg.vocab_size, frac).flops
        width = frac * cfg.vocab_size if objective in TOKEN_HEAD_OBJECTIVES else 2
        head_f += SOFTMAX_FLOPS * bs * L * width
        return bs * L * backbone_flops_per_token(cfg, L) + head_f, head_f

    fwd_total = head_total = 0.0
    n_steps = 0
    for n, L in phases:
        step_f, head_f = step_flops(L)
        fwd_total += n * step_f
        head_total += n * head_f
        n_steps += n
    if n_steps == 0:
        # report the per-step cost of the first phase for a zero-step schedule
        fwd_step, head_f = step_flops(phases[0][1])
        share = head_f / fwd_step
    else:
        fwd_step = fwd_total / n_steps
        share = head_total / fwd_total
    return CostReport(
        params_total=params_total,
        params_head=head_params,
        head_fraction=head_params / params_total,
        flops_per_step_forward=fwd_step,
        flops_per_step_train=TRAIN_MULTIPLIER * fwd_step,
        flops_total=TRAIN_MULTIPLIER * fwd_total,
        head_flops_share=share,
    )


def base_like_config(vocab_size: int = 30522) -> ModelConfig:
    return ModelConfig(layers=12, hidden=768, heads=12, ffn_dim=3072, vocab_size=vocab_size,
                       max_len=512, dropout=0.1)


def small_like_config(vocab_size: int = 30522) -> ModelConfig:
    return ModelConfig(layers=12, hidden=256, heads=4, ffn_dim=1024, vocab_size=vocab_size,
                       max_len=512, dropout=0.1)


# 900K steps at 128 tokens then 100K at 512, batch 256
BASE_SCHEDULE = dict(bs=256, phases=[(900_000, 128), (100_000, 512)])
# 500K steps at 128 tokens, batch 1024
SMALL_SCHEDULE = dict(bs=1024, phases=[(500_000, 128)])


def flops_ratio(cfg: ModelConfig, bs: int, phases, numerator: str = "RTS",
                denominator: str = "MLM", lm_output_frac: float = 0.15) -> float:
    steps = sum(n for n, _ in phases)
    num = model_cost(cfg, numerator, bs, steps, phases, lm_output_frac).flops_total
    den = model_cost(cfg, denominator, bs, steps, phases, lm_output_frac).flops_total
    return num / den


def preprocessing_flops(vocab_size: int, corpus_tokens: int, dim: int = 300, window: int = 2,
                        negatives: int = 5, epochs: int = 5, n_clusters: int = 100,
                        restarts: int = 20, kmeans_iters: int = 300) -> dict:
    """One-off cost of the C-RTS word2vec + k-means preparation.

    Kept outside the per-step model cost; it is paid once before training.
    """
    w2v = epochs * corpus_tokens * 2 * window * (1 + negatives) * 3 * 2 * dim
    km = restarts * kmeans_iters * vocab_size * n_clusters * 3 * dim
    return {"word2vec_flops": float(w2v), "kmeans_flops": float(km)}
