"""A small pre-norm transformer encoder in numpy with hand-written gradients.

Parameters live in a flat ``dict[str, ndarray]``. The output head is either
a token head (H x |V|) or a binary head (H x 2); the head is not tied to
the input embeddings.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .objectives import IGNORE

TOKEN_HEAD = "token"
BINARY_HEAD = "binary"
LN_EPS = 1e-12
MASK_BIAS = -1e9
GELU_C = math.sqrt(2.0 / math.pi)


class ModelError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 2000
    max_len: int = 64
    dropout: float = 0.1

    def __post_init__(self):
        for name in ("layers", "hidden", "heads", "ffn_dim", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")
        if self.hidden % self.heads:
            raise ModelError("hidden must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


def head_width(cfg: ModelConfig, head: str) -> int:
    if head == TOKEN_HEAD:
        return cfg.vocab_size
    if head == BINARY_HEAD:
        return 2
    raise ModelError(f"unknown head {head!r}")


def head_of(params: dict) -> str:
    return BINARY_HEAD if params["head.w"].shape[1] == 2 else TOKEN_HEAD


def param_shapes(cfg: ModelConfig, head: str) -> dict[str, tuple[int, ...]]:
    H, Fd = cfg.hidden, cfg.ffn_dim
    shapes = {"tok_emb": (cfg.vocab_size, H), "pos_emb": (cfg.max_len, H)}
    for i in range(cfg.layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.g": (H,), p + "ln1.b": (H,),
            p + "attn.wq": (H, H), p + "attn.bq": (H,),
            p + "attn.wk": (H, H), p + "attn.bk": (H,),
            p + "attn.wv": (H, H), p + "attn.bv": (H,),
            p + "attn.wo": (H, H), p + "attn.bo": (H,),
            p + "ln2.g": (H,), p + "ln2.b": (H,),
            p + "ffn.w1": (H, Fd), p + "ffn.b1": (Fd,),
            p + "ffn.w2": (Fd, H), p + "ffn.b2": (H,),
        })
    shapes["lnf.g"] = (H,)
    shapes["lnf.b"] = (H,)
    shapes["head.w"] = (H, head_width(cfg, head))
    shapes["head.b"] = (head_width(cfg, head),)
    return shapes


def is_decayed(name: str, shape) -> bool:
    """Weight decay applies to weight matrices only, never biases or layer norms."""
    return len(shape) == 2


def _truncated_normal(rng, shape, std=0.02):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(cfg: ModelConfig, head: str, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg, head).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape, dtype=dtype)
        elif len(shape) == 2:
            params[name] = _truncated_normal(rng, shape).astype(dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def count_params(params: dict) -> int:
    return int(sum(v.size for v in params.values()))


# -- building blocks -------------------------------------------------------

def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layer_norm_back(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(0)
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    dxh = dy * g
    dx = rstd * (dxh - dxh.mean(-1, keepdims=True) - xhat * (dxh * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _gelu(u):
    t = np.tanh(GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(du_out, u, t):
    dt = (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * dt)


def _dropout_mask(rng, shape, p, dtype):
    if p == 0.0:
        return None
    return (rng.random(shape, dtype=np.float32) >= p).astype(dtype) * dtype.type(1.0 / (1.0 - p))


def _linear_back(dy, x, w):
    """Gradients of y = x @ w + b given dy; returns dx, dw, db."""
    H_in = x.shape[-1]
    dw = x.reshape(-1, H_in).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    return dy @ w.T, dw, db


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# -- forward / backward ----------------------------------------------------

def forward(params: dict, cfg: ModelConfig, input_ids, attention_mask, train_mode: bool = False,
            rng=None, return_cache: bool = False):
    """Per-position logits, shape (B, L, |V|) or (B, L, 2).

    PAD keys are excluded from attention, so PAD content never reaches the
    outputs at real positions. Dropout only runs in `train_mode`.
    """
    input_ids = np.asarray(input_ids)
    attention_mask = np.asarray(attention_mask, dtype=bool)
    if input_ids.ndim != 2 or attention_mask.shape != input_ids.shape:
        raise ModelError(f"input_ids {input_ids.shape} and attention_mask "
                         f"{attention_mask.shape} must be matching (B, L) arrays")
    B, L = input_ids.shape
    if L > cfg.max_len:
        raise ModelError(f"sequence length {L} exceeds max_len {cfg.max_len}")
    if input_ids.min() < 0 or input_ids.max() >= cfg.vocab_size:
        raise ModelError("token id out of range")
    if params["tok_emb"].shape != (cfg.vocab_size, cfg.hidden):
        raise ModelError("parameters do not match the model config")
    dtype = params["tok_emb"].dtype
    p_drop = cfg.dropout if train_mode else 0.0
    if p_drop and rng is None:
        raise ModelError("train_mode with dropout needs an rng")
    nh, dh = cfg.heads, cfg.head_dim
    scale = dtype.type(1.0 / math.sqrt(dh))
    bias = np.where(attention_mask, 0.0, MASK_BIAS).astype(dtype)[:, None, None, :]

    cache = {"ids": input_ids, "layers": []}
    x = params["tok_emb"][input_ids] + params["pos_emb"][:L]
    m = _dropout_mask(rng, x.shape, p_drop, dtype)
    cache["drop0"] = m
    if m is not None:
        x = x * m
    for i in range(cfg.layers):
        p = f"layers.{i}."
        c = {}
        h, c["ln1"] = _layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        c["h1"] = h
        q = (h @ params[p + "attn.wq"] + params[p + "attn.bq"]).reshape(B, L, nh, dh).transpose(0, 2, 1, 3)
        k = (h @ params[p + "attn.wk"] + params[p + "attn.bk"]).reshape(B, L, nh, dh).transpose(0, 2, 1, 3)
        v = (h @ params[p + "attn.wv"] + params[p + "attn.bv"]).reshape(B, L, nh, dh).transpose(0, 2, 1, 3)
        probs = softmax(q @ k.transpose(0, 1, 3, 2) * scale + bias)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, L, nh * dh)
        c.update(q=q, k=k, v=v, probs=probs, ctx=ctx)
        o = ctx @ params[p + "attn.wo"] + params[p + "attn.bo"]
        c["drop1"] = m = _dropout_mask(rng, o.shape, p_drop, dtype)
        x = x + (o * m if m is not None else o)

        h2, c["ln2"] = _layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        u = h2 @ params[p + "ffn.w1"] + params[p + "ffn.b1"]
        a, t = _gelu(u)
        f = a @ params[p + "ffn.w2"] + params[p + "ffn.b2"]
        c.update(h2=h2, u=u, t=t, a=a)
        c["drop2"] = m = _dropout_mask(rng, f.shape, p_drop, dtype)
        x = x + (f * m if m is not None else f)
        cache["layers"].append(c)
    xf, cache["lnf"] = _layer_norm(x, params["lnf.g"], params["lnf.b"])
    cache["xf"] = xf
    logits = xf @ params["head.w"] + params["head.b"]
    if return_cache:
        return logits, cache
    return logits


def backprop(params: dict, cfg: ModelConfig, cache: dict, dlogits) -> dict[str, np.ndarray]:
    """Reverse pass from d(loss)/d(logits) to gradients for every parameter."""
    B, L = cache["ids"].shape
    nh, dh = cfg.heads, cfg.head_dim
    scale = params["tok_emb"].dtype.type(1.0 / math.sqrt(dh))
    g = {}
    dxf, g["head.w"], g["head.b"] = _linear_back(dlogits, cache["xf"], params["head.w"])
    dx, g["lnf.g"], g["lnf.b"] = _layer_norm_back(dxf, params["lnf.g"], cache["lnf"])
    for i in reversed(range(cfg.layers)):
        p = f"layers.{i}."
        c = cache["layers"][i]
        # feed-forward branch
        df = dx * c["drop2"] if c["drop2"] is not None else dx
        da, g[p + "ffn.w2"], g[p + "ffn.b2"] = _linear_back(df, c["a"], params[p + "ffn.w2"])
        du = _gelu_back(da, c["u"], c["t"])
        dh2, g[p + "ffn.w1"], g[p + "ffn.b1"] = _linear_back(du, c["h2"], params[p + "ffn.w1"])
        dxn, g[p + "ln2.g"], g[p + "ln2.b"] = _layer_norm_back(dh2, params[p + "ln2.g"], c["ln2"])
        dx = dx + dxn
        # attention branch
        do = dx * c["drop1"] if c["drop1"] is not None else dx
        dctx, g[p + "attn.wo"], g[p + "attn.bo"] = _linear_back(do, c["ctx"], params[p + "attn.wo"])
        dctx = dctx.reshape(B, L, nh, dh).transpose(0, 2, 1, 3)
        probs, q, k, v = c["probs"], c["q"], c["k"], c["v"]
        dprobs = dctx @ v.transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ dctx
        ds = probs * (dprobs - (dprobs * probs).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        h1 = c["h1"]
        dh1 = 0
        for name, d in (("q", dq), ("k", dk), ("v", dv)):
            d = d.transpose(0, 2, 1, 3).reshape(B, L, nh * dh)
            dpart, g[p + f"attn.w{name}"], g[p + f"attn.b{name}"] = _linear_back(
                d, h1, params[p + f"attn.w{name}"])
            dh1 = dh1 + dpart
        dxn, g[p + "ln1.g"], g[p + "ln1.b"] = _layer_norm_back(dh1, params[p + "ln1.g"], c["ln1"])
        dx = dx + dxn
    if cache["drop0"] is not None:
        dx = dx * cache["drop0"]
    g["pos_emb"] = np.zeros_like(params["pos_emb"])
    g["pos_emb"][:L] = dx.sum(0)
    g["tok_emb"] = np.zeros_like(params["tok_emb"])
    np.add.at(g["tok_emb"], cache["ids"].ravel(), dx.reshape(B * L, -1))
    return {name: g[name] for name in params}


# -- losses ----------------------------------------------------------------

def _cross_entropy(logits, labels, n_classes=None):
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape:
        raise ModelError(f"logits {logits.shape} and labels {labels.shape} do not match")
    if n_classes is not None and logits.shape[-1] != n_classes:
        raise ModelError(f"expected {n_classes} classes, got {logits.shape[-1]}")
    mask = labels != IGNORE
    n = int(mask.sum())
    if n == 0:
        raise ModelError("no supervised positions")
    z = logits[mask]
    y = labels[mask]
    if y.min() < 0 or y.max() >= logits.shape[-1]:
        raise ModelError("label out of range")
    with np.errstate(invalid="ignore", over="ignore"):
        z = z - z.max(-1, keepdims=True)
        lse = np.log(np.exp(z).sum(-1))
        rows = np.arange(n)
        loss = float((lse - z[rows, y]).mean())
        p = np.exp(z - lse[:, None])
    p[rows, y] -= 1.0
    grad = np.zeros_like(logits)
    grad[mask] = p / n
    return loss, grad


def loss_token(logits, token_labels):
    """Mean cross-entropy over non-IGNORE positions and its gradient."""
    return _cross_entropy(logits, token_labels)


def loss_binary(logits, binary_labels):
    return _cross_entropy(logits, binary_labels, n_classes=2)


def backward(params: dict, cfg: ModelConfig, input_ids, attention_mask, labels,
             train_mode: bool = False, rng=None):
    """Forward, loss and exact gradients; returns (loss, grads, logits)."""
    logits, cache = forward(params, cfg, input_ids, attention_mask, train_mode, rng,
                            return_cache=True)
    loss_fn = loss_binary if head_of(params) == BINARY_HEAD else loss_token
    loss, dlogits = loss_fn(logits, labels)
    if not math.isfinite(loss):
        raise DivergenceError("diverged")
    return loss, backprop(params, cfg, cache, dlogits), logits


# -- optimizer -------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, step: int, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.01):
    """Adam with bias correction and decoupled weight decay, in place.

    Decay only touches weight matrices. Returns (params, state).
    """
    if step < 1:
        raise ModelError("step must be >= 1")
    for name, gr in grads.items():
        if not np.all(np.isfinite(gr)):
            raise DivergenceError(f"non-finite gradient for {name}")
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    for name, p in params.items():
        gr = grads[name]
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * gr
        v *= beta2
        v += (1.0 - beta2) * gr * gr
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay and is_decayed(name, p.shape):
            p -= (lr * weight_decay) * p
        p -= (lr * update).astype(p.dtype)
    return params, state


# -- checkpoint files ------------------------------------------------------

_MAGIC = b"PTOBJCK1"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write a header (canonical JSON) plus named float32 tensors, little-endian."""
    head = canonical_json(header).encode("utf-8")
    parts = [_MAGIC, struct.pack("<I", len(head)), head, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ModelError(f"{path}: not a checkpoint file")
    off = len(_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    if off != len(data):
        raise ModelError(f"{path}: trailing bytes in checkpoint")
    return header, tensors
