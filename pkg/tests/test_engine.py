import numpy as np
import pytest

from routechoice.core import StructuralError
from routechoice.engine import (
    Adam,
    Dropout,
    EncoderLayer,
    MultiHeadAttention,
    Param,
    adaptive_avg_pool,
    adaptive_pool_matrix,
    concat,
    load_checkpoint,
    masked_softmax_xent,
    save_checkpoint,
    split_grad,
    xent_grad,
)
from gradcheck import H, RTOL, SEEDS, case_errors, cases, rel_err


@pytest.mark.parametrize("name,seed,shape", list(cases()))
def test_layer_gradients(name, seed, shape):
    errs = case_errors(name, seed, shape)
    bad = {k: v for k, v in errs.items() if not v < RTOL}
    assert not bad, bad


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("n,a", [(3, 4), (1, 2), (5, 7)])
def test_masked_xent_gradient(seed, n, a):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n, a))
    mask = rng.random((n, a)) < 0.7
    mask[:, 0] = True
    chosen = np.zeros(n, dtype=int)
    _, probs = masked_softmax_xent(u, mask, chosen)
    g = xent_grad(probs, chosen)
    num = np.zeros_like(u)
    for i in np.ndindex(u.shape):
        up, down = u.copy(), u.copy()
        up[i] += H
        down[i] -= H
        num[i] = (masked_softmax_xent(up, mask, chosen)[0].sum()
                  - masked_softmax_xent(down, mask, chosen)[0].sum()) / (2 * H)
    assert rel_err(g, num) < RTOL


def test_concat_split_roundtrip():
    a, b = np.ones((2, 3)), np.zeros((2, 2))
    out, sizes = concat([a, b])
    ga, gb = split_grad(out, sizes)
    np.testing.assert_array_equal(ga, a)
    np.testing.assert_array_equal(gb, b)


def test_pool_windows():
    x = np.array([1.0, 3.0, 5.0, 7.0])
    np.testing.assert_allclose(adaptive_avg_pool(x, 2), [2.0, 6.0])
    np.testing.assert_allclose(adaptive_avg_pool(np.array([1.0, 2.0]), 4), [1, 1, 2, 2])
    np.testing.assert_array_equal(adaptive_avg_pool(x, 4), x)


@pytest.mark.parametrize("length,target", [(4850, 512), (4464, 64), (5, 3), (3, 7)])
def test_pool_windows_cover_input(length, target):
    m = adaptive_pool_matrix(length, target)
    assert np.all((m > 0).sum(axis=0) >= 1)
    assert np.all((m > 0).sum(axis=1) >= 1)
    np.testing.assert_allclose(m.sum(axis=0), 1.0)


def test_masked_softmax_examples():
    mask = np.array([True, True, True, True, False])
    loss, p = masked_softmax_xent(np.zeros(5), mask, 2)
    np.testing.assert_allclose(p[:4], 0.25)
    assert p[4] == 0.0
    assert loss == pytest.approx(np.log(4))
    _, p = masked_softmax_xent(np.array([np.log(2), 0.0]), np.array([True, True]), 0)
    np.testing.assert_allclose(p, [2 / 3, 1 / 3])


def test_masked_softmax_shift_invariance_and_stability():
    rng = np.random.default_rng(0)
    u = rng.normal(size=(4, 6))
    mask = rng.random((4, 6)) < 0.6
    mask[:, 1] = True
    chosen = np.ones(4, dtype=int)
    l1, p1 = masked_softmax_xent(u, mask, chosen)
    l2, p2 = masked_softmax_xent(u + 123.4, mask, chosen)
    np.testing.assert_allclose(p1, p2, atol=1e-12)
    np.testing.assert_allclose(l1, l2, atol=1e-10)
    np.testing.assert_allclose(p1.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p1[~mask] == 0.0)
    l3, p3 = masked_softmax_xent(np.array([[700.0, 0.0, 699.0]]), np.ones((1, 3), bool), [0])
    assert np.all(np.isfinite(p3)) and np.isfinite(l3[0])


def test_masked_softmax_rejects_masked_choice():
    with pytest.raises(StructuralError):
        masked_softmax_xent(np.zeros(3), np.array([True, True, False]), 2)


def test_attention_permutation_equivariance():
    rng = np.random.default_rng(3)
    layer = MultiHeadAttention(8, 2, 4, rng)
    x = rng.normal(size=(6, 8))
    perm = rng.permutation(6)
    np.testing.assert_allclose(layer.forward(x)[perm], layer.forward(x[perm]), atol=1e-12)
    enc = EncoderLayer(8, 2, 4, 16, 0.2, rng).eval()
    np.testing.assert_allclose(enc.forward(x)[perm], enc.forward(x[perm]), atol=1e-12)


def test_zero_input_gives_uniform_attention():
    rng = np.random.default_rng(0)
    layer = MultiHeadAttention(8, 2, 4, rng)
    layer.forward(np.zeros((5, 8)))
    np.testing.assert_allclose(layer._cache[3], 1 / 5)


def test_attention_rejects_wrong_width():
    layer = MultiHeadAttention(8, 2, 4, np.random.default_rng(0))
    with pytest.raises(StructuralError):
        layer.forward(np.zeros((3, 6)))


def test_dropout_eval_is_identity_and_deterministic():
    x = np.random.default_rng(0).normal(size=(50, 20))
    d = Dropout(0.2, seed=1).eval()
    a, b = d.forward(x), d.forward(x)
    assert np.array_equal(a, x) and np.array_equal(a, b)
    d.train()
    m1 = d.forward(x)
    m2 = d.forward(x)
    assert np.array_equal(m1, m2)
    d.step = 1
    assert not np.array_equal(d.forward(x), m1)
    # inverted scaling keeps the expectation
    big = Dropout(0.2, seed=3).train().forward(np.ones((400, 400)))
    assert big.mean() == pytest.approx(1.0, abs=0.01)


def test_adam_first_step_moves_by_lr():
    p = Param("w", [0.5])
    opt = Adam([p], lr=1e-3)
    p.grad[:] = 1.0
    opt.step()
    # m_hat = v_hat = 1 on the first step, so the move is lr / (1 + eps)
    assert p.value[0] == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), abs=1e-15)


def test_adam_zero_gradient_leaves_params():
    p = Param("w", np.arange(3.0))
    opt = Adam([p], lr=1e-2)
    opt.step()
    np.testing.assert_array_equal(p.value, np.arange(3.0))


def test_frozen_parameters_are_bit_identical():
    rng = np.random.default_rng(0)
    p = Param("w", rng.normal(size=5), frozen=[True, False, True, False, False])
    q = Param("all", rng.normal(size=3), frozen=True)
    before_p, before_q = p.value.copy(), q.value.copy()
    opt = Adam([p, q], lr=1e-2)
    for _ in range(1000):
        p.grad[:] = rng.normal(size=5)
        q.grad[:] = rng.normal(size=3)
        opt.step()
    assert np.array_equal(p.value[p.frozen], before_p[p.frozen])
    assert not np.array_equal(p.value[~p.frozen], before_p[~p.frozen])
    assert np.array_equal(q.value, before_q)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    params = [Param("a.weight", rng.normal(size=(3, 2)), frozen=[[True, False]] * 3),
              Param("b", rng.normal(size=4) * 1e-300)]
    path = tmp_path / "ck.npz"
    save_checkpoint(path, params, meta={"kind": "CNN1"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"kind": "CNN1"}
    for p, q in zip(params, loaded):
        assert p.name == q.name
        assert np.array_equal(p.value, q.value)
        assert np.array_equal(p.frozen, q.frozen)
