import math

import numpy as np
import pytest

from fdcheck import fd_grad_check, rel_error
from pretrain_objectives.model import (BINARY_HEAD, TOKEN_HEAD, AdamState, DivergenceError,
                                       ModelConfig, ModelError, adam_step, backward, forward,
                                       init_params, load_checkpoint, loss_binary, loss_token,
                                       param_shapes, save_checkpoint, softmax)
from pretrain_objectives.objectives import IGNORE

TINY = ModelConfig(layers=2, hidden=8, heads=2, ffn_dim=16, vocab_size=11, max_len=6, dropout=0.1)


def test_init_deterministic_and_shapes():
    a = init_params(TINY, TOKEN_HEAD, seed=3)
    b = init_params(TINY, TOKEN_HEAD, seed=3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert a["head.w"].shape == (8, 11)
    assert init_params(TINY, BINARY_HEAD, seed=3)["head.w"].shape == (8, 2)
    assert set(a) == set(param_shapes(TINY, TOKEN_HEAD))
    assert np.all(a["layers.0.ln1.g"] == 1) and np.all(a["layers.0.attn.bq"] == 0)
    w = a["layers.1.ffn.w1"]
    assert np.abs(w).max() <= 0.04 + 1e-7 and abs(w.std() - 0.0176) < 0.01


def test_config_validation():
    with pytest.raises(ModelError):
        ModelConfig(hidden=10, heads=3)
    with pytest.raises(ModelError):
        ModelConfig(dropout=1.0)
    with pytest.raises(ModelError):
        ModelConfig(layers=0)


def test_forward_shape():
    cfg = ModelConfig(layers=1, hidden=8, heads=2, ffn_dim=16, vocab_size=13, max_len=8)
    p = init_params(cfg, TOKEN_HEAD, 0)
    logits = forward(p, cfg, np.array([[2, 5, 6, 3]]), np.ones((1, 4), bool))
    assert logits.shape == (1, 4, 13)
    pb = init_params(cfg, BINARY_HEAD, 0)
    assert forward(pb, cfg, np.array([[2, 5, 6, 3]]), np.ones((1, 4), bool)).shape == (1, 4, 2)


def test_forward_shape_errors():
    p = init_params(TINY, TOKEN_HEAD, 0)
    with pytest.raises(ModelError):
        forward(p, TINY, np.array([[2, 5, 3]]), np.ones((1, 4), bool))
    with pytest.raises(ModelError):
        forward(p, TINY, np.array([[2, 11, 3]]), np.ones((1, 3), bool))
    with pytest.raises(ModelError):
        forward(p, TINY, np.zeros((1, 7), int), np.ones((1, 7), bool))


def test_pad_content_does_not_leak():
    p = init_params(TINY, TOKEN_HEAD, 1)
    mask = np.array([[1, 1, 1, 1, 0, 0]], bool)
    ids = np.array([[2, 5, 6, 3, 0, 0]])
    other = ids.copy()
    other[0, 4:] = [9, 7]
    a = forward(p, TINY, ids, mask)
    b = forward(p, TINY, other, mask)
    assert np.allclose(a[0, :4], b[0, :4], atol=1e-6)


def test_eval_mode_deterministic_and_train_mode_noisy():
    p = init_params(TINY, TOKEN_HEAD, 1)
    ids = np.array([[2, 5, 6, 7, 8, 3]])
    mask = np.ones_like(ids, bool)
    assert np.array_equal(forward(p, TINY, ids, mask), forward(p, TINY, ids, mask))
    t1 = forward(p, TINY, ids, mask, True, np.random.default_rng(0))
    t2 = forward(p, TINY, ids, mask, True, np.random.default_rng(1))
    assert not np.allclose(t1, t2)
    with pytest.raises(ModelError):
        forward(p, TINY, ids, mask, train_mode=True)


def test_attention_rows_sum_to_one():
    p = init_params(TINY, TOKEN_HEAD, 2)
    ids = np.array([[2, 5, 6, 3, 0, 0], [2, 5, 6, 7, 8, 3]])
    mask = ids != 0
    mask[0, 3] = True
    _, cache = forward(p, TINY, ids, mask, return_cache=True)
    for c in cache["layers"]:
        probs = c["probs"]
        assert np.allclose(probs.sum(-1), 1, atol=1e-6)
        assert np.all(probs[0, :, :, 4:] < 1e-6)


def test_loss_token_uniform():
    logits = np.zeros((1, 3, 7))
    labels = np.array([[IGNORE, 4, IGNORE]])
    loss, grad = loss_token(logits, labels)
    assert math.isclose(loss, math.log(7), rel_tol=1e-12)
    assert abs(loss - 1.9459) < 1e-4
    assert np.all(grad[0, 0] == 0)


def test_loss_binary_uniform_and_errors():
    loss, _ = loss_binary(np.zeros((2, 2, 2)), np.array([[0, 1], [IGNORE, 1]]))
    assert math.isclose(loss, math.log(2), rel_tol=1e-12)
    with pytest.raises(ModelError, match="no supervised positions"):
        loss_binary(np.zeros((1, 2, 2)), np.full((1, 2), IGNORE))
    with pytest.raises(ModelError):
        loss_binary(np.zeros((1, 2, 3)), np.array([[0, 1]]))


def test_loss_saturated_is_zero():
    logits = np.full((1, 2, 5), -200.0)
    logits[0, 0, 3] = 200.0
    loss, grad = loss_token(logits, np.array([[3, IGNORE]]))
    assert loss < 1e-12 and np.abs(grad).max() < 1e-12


@pytest.mark.parametrize("fn,classes", [(loss_token, 9), (loss_binary, 2)])
def test_loss_gradients_match_finite_differences(fn, classes):
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 5, classes))
    labels = rng.integers(classes, size=(2, 5))
    labels[0, 1] = labels[1, 3] = IGNORE
    _, grad = fn(logits, labels)
    num = np.zeros_like(logits)
    h = 1e-6
    for idx in np.ndindex(logits.shape):
        up, dn = logits.copy(), logits.copy()
        up[idx] += h
        dn[idx] -= h
        num[idx] = (fn(up, labels)[0] - fn(dn, labels)[0]) / (2 * h)
    assert rel_error(grad, num) < 1e-6


@pytest.mark.parametrize("head,train_mode", [(TOKEN_HEAD, False), (BINARY_HEAD, False),
                                             (TOKEN_HEAD, True)])
def test_backward_matches_finite_differences(head, train_mode):
    worst = fd_grad_check(TINY, head, seed=4, train_mode=train_mode)
    assert max(worst.values()) < 1e-4, worst


def test_saturated_model_has_near_zero_gradient():
    cfg = ModelConfig(layers=1, hidden=8, heads=2, ffn_dim=16, vocab_size=11, max_len=6, dropout=0.0)
    p = init_params(cfg, TOKEN_HEAD, 0, dtype=np.float64)
    ids = np.array([[2, 5, 6, 3]])
    mask = np.ones_like(ids, bool)
    p["head.b"][:] = -300.0
    p["head.b"][7] = 300.0
    loss, grads, _ = backward(p, cfg, ids, mask, np.array([[IGNORE, 7, IGNORE, IGNORE]]))
    assert loss < 1e-12
    assert max(np.abs(g).max() for g in grads.values()) < 1e-12


def test_binary_model_has_no_token_head():
    p = init_params(TINY, BINARY_HEAD, 0, dtype=np.float64)
    ids = np.array([[2, 5, 6, 3]])
    _, grads, _ = backward(p, TINY, ids, np.ones_like(ids, bool), np.array([[IGNORE, 1, 0, IGNORE]]))
    assert grads["head.w"].shape == (8, 2)
    assert not any(g.shape == (8, 11) for g in grads.values())


def test_backward_diverged():
    p = init_params(TINY, BINARY_HEAD, 0, dtype=np.float64)
    p["head.b"][0] = np.inf
    ids = np.array([[2, 5, 3]])
    with pytest.raises(DivergenceError, match="diverged"):
        backward(p, TINY, ids, np.ones_like(ids, bool), np.array([[IGNORE, 1, IGNORE]]))


def test_adam_hand_example():
    p = {"w": np.array([1.0])}
    state = AdamState.zeros_like(p)
    adam_step(p, {"w": np.array([1.0])}, state, step=1, lr=0.1, weight_decay=0.0)
    # m_hat = v_hat = 1 so the update is lr * 1 / (1 + eps)
    assert math.isclose(p["w"][0], 1 - 0.1 / (1 + 1e-8), rel_tol=1e-12)
    assert abs(p["w"][0] - 0.9) < 1e-7


def test_adam_zero_gradient_is_identity():
    p = {"w": np.ones((2, 2)), "b": np.ones(2)}
    before = {k: v.copy() for k, v in p.items()}
    state = AdamState.zeros_like(p)
    for step in (1, 2, 3):
        adam_step(p, {k: np.zeros_like(v) for k, v in p.items()}, state, step, lr=0.1,
                  weight_decay=0.0)
    assert all(np.array_equal(p[k], before[k]) for k in p)


def test_adam_decay_only_on_matrices():
    p = {"w": np.ones((2, 2)), "b": np.ones(2)}
    state = AdamState.zeros_like(p)
    adam_step(p, {k: np.zeros_like(v) for k, v in p.items()}, state, 1, lr=0.1, weight_decay=0.01)
    assert np.allclose(p["w"], 1 - 0.1 * 0.01) and np.all(p["b"] == 1)


def test_adam_defaults_and_errors():
    import inspect
    sig = inspect.signature(adam_step).parameters
    assert (sig["beta1"].default, sig["beta2"].default, sig["eps"].default) == (0.9, 0.999, 1e-8)
    assert sig["weight_decay"].default == 0.01
    p = {"w": np.ones(2)}
    with pytest.raises(ModelError):
        adam_step(p, {"w": np.ones(2)}, AdamState.zeros_like(p), 0, 0.1)
    with pytest.raises(DivergenceError):
        adam_step(p, {"w": np.array([np.nan, 0])}, AdamState.zeros_like(p), 1, 0.1)


def test_checkpoint_roundtrip_bitexact(tmp_path):
    p = init_params(TINY, TOKEN_HEAD, 5)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, {"model": TINY.to_dict(), "step": 3}, p)
    header, q = load_checkpoint(path)
    assert header == {"model": TINY.to_dict(), "step": 3}
    assert set(q) == set(p)
    assert all(q[k].tobytes() == p[k].tobytes() for k in p)
    save_checkpoint(tmp_path / "again.bin", header, q)
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"not a checkpoint")
    with pytest.raises(ModelError):
        load_checkpoint(tmp_path / "x")


def test_softmax_stable():
    z = np.array([1000.0, 1000.0])
    assert np.allclose(softmax(z), [0.5, 0.5])
