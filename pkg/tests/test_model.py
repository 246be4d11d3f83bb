import numpy as np
import pytest

from conftest import TINY
from ifprune import tensor as T
from ifprune.model import ModelConfig, Transformer, ffn_forward_masked, loss_next_token
from ifprune.softtopk import make_mask
from ifprune.tensor import Tensor, backward, grad_check


@pytest.fixture
def model():
    return Transformer.init(TINY, seed=0)


def _ffn(model, layer=0):
    P = model.params
    p = f"layers.{layer}."
    return P[p + "w1"], P[p + "w3"], P[p + "w2"]


def test_config_validation():
    with pytest.raises(ValueError, match="t_ffn"):
        ModelConfig(d_ffn=8, t_ffn=9)
    with pytest.raises(ValueError, match="n_heads"):
        ModelConfig(d_model=10, n_heads=4)


def test_ffn_all_ones_mask_is_unmasked(model, rng):
    x = Tensor(rng.normal(size=(5, TINY.d_model)))
    w1, w3, w2 = _ffn(model)
    a = ffn_forward_masked(x, w1, w3, w2).data
    b = ffn_forward_masked(x, w1, w3, w2, np.ones(TINY.d_ffn)).data
    assert np.array_equal(a, b)


def test_ffn_zero_mask_gives_zero(model, rng):
    x = Tensor(rng.normal(size=(5, TINY.d_model)))
    out = ffn_forward_masked(x, *_ffn(model), np.zeros(TINY.d_ffn)).data
    assert np.all(out == 0)


def test_ffn_one_hot_mask_matches_single_channel(model, rng):
    x = rng.normal(size=(5, TINY.d_model))
    w1, w3, w2 = _ffn(model)
    i = 7
    m = np.zeros(TINY.d_ffn)
    m[i] = 1.0
    masked = ffn_forward_masked(Tensor(x), w1, w3, w2, m).data
    h = x @ w1.data[:, i]
    direct = np.outer(h / (1 + np.exp(-h)) * (x @ w3.data[:, i]), w2.data[i])
    np.testing.assert_allclose(masked, direct, atol=1e-12)


def test_ffn_mask_width_checked(model, rng):
    x = Tensor(rng.normal(size=(2, TINY.d_model)))
    with pytest.raises(T.ShapeError):
        ffn_forward_masked(x, *_ffn(model), np.ones(TINY.d_ffn + 1))


def test_absent_mask_equals_all_ones(model):
    tokens = np.arange(10) % TINY.vocab
    a = model.forward(tokens).data
    b = model.forward(tokens, np.ones((TINY.n_layers, TINY.d_ffn))).data
    assert np.array_equal(a, b)


def test_causality(model, rng):
    tokens = rng.integers(0, TINY.vocab, 12)
    short = model.forward(tokens[:8]).data
    long = model.forward(tokens).data
    np.testing.assert_allclose(long[:, :8], short, atol=1e-12)


def test_rejects_bad_tokens(model):
    with pytest.raises(ValueError, match="token id"):
        model.forward([1, 2, TINY.vocab])
    with pytest.raises(ValueError, match="max_seq"):
        model.forward(np.zeros(TINY.max_seq + 1, dtype=int))


def test_forward_deterministic(model, rng):
    tokens = rng.integers(0, TINY.vocab, (2, 9))
    mask = make_mask(rng.normal(size=(TINY.n_layers, TINY.d_ffn)), TINY.t_ffn)
    assert np.array_equal(model.forward(tokens, mask).data, model.forward(tokens, mask).data)


def test_zero_mask_channels_get_zero_gradient(model, rng):
    tokens = rng.integers(0, TINY.vocab, (2, 10))
    mask = make_mask(rng.normal(size=(TINY.n_layers, TINY.d_ffn)), TINY.t_ffn)
    logits = model.forward(tokens[:, :-1], mask)
    T.zero_grad(model.params.values())
    backward(loss_next_token(logits, tokens[:, 1:]))
    for layer in range(TINY.n_layers):
        off = np.setdiff1d(np.arange(TINY.d_ffn), mask.selected[layer])
        p = f"layers.{layer}."
        assert np.all(model.params[p + "w1"].grad[:, off] == 0)
        assert np.all(model.params[p + "w3"].grad[:, off] == 0)
        assert np.all(model.params[p + "w2"].grad[off, :] == 0)
        assert np.any(model.params[p + "w2"].grad[mask.selected[layer], :] != 0)


def test_full_model_grad_check():
    cfg = ModelConfig(n_layers=2, d_model=16, d_ffn=32, t_ffn=12, n_heads=2, vocab=11, max_seq=8)
    model = Transformer.init(cfg, seed=4)
    rng = np.random.default_rng(5)
    tokens = rng.integers(0, cfg.vocab, (2, 6))
    m = Tensor(rng.uniform(0.1, 1.0, (cfg.n_layers, cfg.d_ffn)), requires_grad=True, name="mask")
    params = {**model.params, "mask": m}

    def f():
        return loss_next_token(model.forward(tokens[:, :-1], m), tokens[:, 1:])

    rep = grad_check(f, params, eps=1e-5, tol=1e-4)
    assert rep.passed, {k: v for k, v in rep.errors.items() if v > 1e-4}


def test_loss_uniform_logits():
    V = 13
    assert loss_next_token(Tensor(np.zeros((4, V))), np.arange(4)).item() == pytest.approx(np.log(V))


def test_loss_confident_logits():
    logits = np.full((3, 5), -50.0)
    targets = np.array([4, 0, 2])
    logits[np.arange(3), targets] = 50.0
    assert loss_next_token(Tensor(logits), targets).item() < 1e-30


def test_loss_mask_matches_brute_force(rng):
    logits = rng.normal(size=(2, 6, 9))
    targets = rng.integers(0, 9, (2, 6))
    lm = np.zeros((2, 6), bool)
    lm[:, ::2] = True
    got = loss_next_token(Tensor(logits), targets, lm).item()
    terms = []
    for b in range(2):
        for i in range(6):
            if lm[b, i]:
                row = logits[b, i]
                terms.append(np.log(np.sum(np.exp(row))) - row[targets[b, i]])
    assert got == pytest.approx(sum(terms) / len(terms), rel=1e-12)


def test_loss_rejects_all_false_mask():
    with pytest.raises(ValueError):
        loss_next_token(Tensor(np.zeros((2, 3))), [0, 1], [False, False])
