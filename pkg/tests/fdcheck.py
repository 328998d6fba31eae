"""Central finite-difference oracle for the encoder gradients."""
import numpy as np

from pretrain_objectives.model import BINARY_HEAD, backward, init_params
from pretrain_objectives.objectives import IGNORE

# Below this magnitude both gradients are rounding noise; attn.bk is the
# standing example, since a key bias shifts every score in a row equally
# and its exact gradient is 0.
FLOOR = 1e-5


def rel_error(analytic, numeric, floor=FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def fd_batch(cfg, head, seed):
    rng = np.random.default_rng(seed)
    B, L = 2, cfg.max_len
    ids = rng.integers(5, cfg.vocab_size, size=(B, L))
    ids[:, 0] = 2
    mask = np.ones((B, L), bool)
    # second row is padded after position 3
    ids[1, 3] = 3
    ids[1, 4:] = 0
    mask[1, 4:] = False
    if head == BINARY_HEAD:
        labels = rng.integers(2, size=(B, L))
    else:
        labels = rng.integers(5, cfg.vocab_size, size=(B, L))
    labels[:, 0] = IGNORE
    labels[1, 3:] = IGNORE
    return ids, mask, labels


def fd_grad_check(cfg, head, seed=0, train_mode=False, h=1e-6):
    """Max relative error per parameter tensor, analytic vs central differences (float64)."""
    params = init_params(cfg, head, seed, dtype=np.float64)
    # larger weights than the 0.02 init so every path carries signal
    rng = np.random.default_rng(seed + 1)
    for k, v in params.items():
        v += rng.normal(scale=0.3, size=v.shape)
    ids, mask, labels = fd_batch(cfg, head, seed)

    def run():
        r = np.random.default_rng(99) if train_mode else None
        return backward(params, cfg, ids, mask, labels, train_mode, r)

    _, grads, _ = run()
    worst = {}
    for name, p in params.items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = run()[0]
            p[idx] = old - h
            dn = run()[0]
            p[idx] = old
            num[idx] = (up - dn) / (2 * h)
        worst[name] = rel_error(grads[name], num)
    return worst
