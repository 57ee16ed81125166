import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fairdiff.errors import NumericError, ParseError, ShapeError
from fairdiff.numerics import (AdamState, Mlp, Rng, RngBank, adam_step, load_mlp, mlp_backward,
                               mlp_forward, mlp_from_lines, mlp_to_lines, permutation, rng_gaussian,
                               rng_split, rng_uniform, save_mlp)

# Published SplitMix64 outputs for state 1234567.
SPLITMIX_REF = [6457827717110365317, 3203168211198807973, 9817491932198370423,
                4593380528125082431, 16408922859458223821]


def _splitmix_py(state, n):
    mask = (1 << 64) - 1
    out = []
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & mask
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out.append(z ^ (z >> 31))
    return out


class TestRng:
    def test_reference_vector(self):
        assert _splitmix_py(1234567, 5) == SPLITMIX_REF
        r = Rng(0)
        r._key[0] = np.uint64(1234567)
        u = r.uniform(5)
        assert [int(x * 2.0 ** 53) for x in u] == [v >> 11 for v in SPLITMIX_REF]

    def test_matches_python_oracle_for_derived_keys(self):
        r = Rng(42, stream=3).split(9)
        expected = [(v >> 11) / 2.0 ** 53 for v in _splitmix_py(r.key, 50)]
        assert r.uniform(50).tolist() == expected

    def test_determinism_first_1000(self):
        r1, r2 = Rng(7), Rng(7)
        assert np.array_equal(r1.uniform(1000), r2.uniform(1000))
        assert np.array_equal(Rng(7).gaussian(1000), Rng(7).gaussian(1000))
        assert rng_uniform(Rng(7)) == Rng(7).uniform(1)[0]

    def test_call_pattern_does_not_matter(self):
        r = Rng(3)
        pieces = np.concatenate([r.uniform(3), r.uniform(7)])
        assert np.array_equal(pieces, Rng(3).uniform(10))

    def test_uniform_range_and_mean(self):
        u = Rng(1).uniform(100_000)
        assert u.min() >= 0.0 and u.max() < 1.0
        assert abs(u.mean() - 0.5) <= 0.005

    def test_gaussian_moments(self):
        g = Rng(2).gaussian(100_000)
        assert abs(g.var() - 1.0) <= 0.02
        assert abs(g.mean()) < 0.02

    def test_scalar_wrappers(self):
        assert isinstance(rng_gaussian(Rng(0)), float)
        assert rng_split(Rng(0), 4).key == Rng(0).split(4).key

    def test_streams_differ(self):
        assert Rng(0, 0).uniform() != Rng(0, 1).uniform()
        assert Rng(0).uniform() != Rng(1).uniform()

    def test_split_pairs_differ(self):
        base = Rng(11)
        firsts = [base.split(i).uniform() for i in range(1001)]
        pairs = list(zip(firsts[:-1], firsts[1:]))
        assert all(a != b for a, b in pairs)
        assert len(set(firsts)) == len(firsts)

    def test_split_ignores_parent_draws(self):
        r = Rng(5)
        before = r.split(2).uniform(4)
        r.uniform(100)
        assert np.array_equal(before, r.split(2).uniform(4))

    def test_bank_rows_equal_splits(self):
        base = Rng(9, stream=4)
        bank = RngBank(base, 6)
        g1, u1, g2 = bank.gaussian(5), bank.uniform(3), bank.gaussian(4)
        for i in range(6):
            c = base.split(i)
            assert np.array_equal(g1[i], c.gaussian(5))
            assert np.array_equal(u1[i], c.uniform(3))
            assert np.array_equal(g2[i], c.gaussian(4))

    def test_negative_seed_rejected(self):
        with pytest.raises(ValueError):
            Rng(-1)

    @given(st.integers(0, 40), st.integers(0, 2 ** 32))
    @settings(max_examples=50, deadline=None)
    def test_permutation_is_permutation(self, n, seed):
        p = permutation(Rng(seed), n)
        assert sorted(p.tolist()) == list(range(n))


def _straight_forward(m: Mlp, x):
    """Loop-based forward pass, independent of the vectorised one."""
    h = [float(v) for v in x]
    for li, (w, b) in enumerate(zip(m.weights, m.biases)):
        nxt = []
        for j in range(w.shape[1]):
            acc = float(b[j])
            for i in range(w.shape[0]):
                acc += h[i] * float(w[i, j])
            nxt.append(acc)
        if li < len(m.weights) - 1 and m.hidden_activation == "tanh":
            nxt = [math.tanh(v) for v in nxt]
        h = nxt
    return np.array(h)


def _fd_check(m: Mlp, x, target, h=1e-5):
    """Max relative error of analytic vs central-difference gradients of the
    squared-error loss, over all parameters and the input."""
    def loss(mm, xx):
        return 0.5 * float(np.sum((mm.forward(xx) - target) ** 2))

    out = m.forward(x)
    grads, gx = m.backward(x, out - target)
    worst = 0.0
    params = m.params
    for pi, p in enumerate(params):
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[pi][idx] += h
            minus[pi][idx] -= h
            num = (loss(m.with_params(plus), x) - loss(m.with_params(minus), x)) / (2 * h)
            ana = grads[pi][idx]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-7))
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num = (loss(m, xp) - loss(m, xm)) / (2 * h)
        worst = max(worst, abs(num - gx[idx]) / max(abs(num), abs(gx[idx]), 1e-7))
    return worst


class TestMlp:
    def test_zero_weights_give_bias(self):
        m = Mlp.init((3, 4, 2), Rng(0))
        m = m.with_params([np.zeros_like(p) if i % 2 == 0 else p for i, p in enumerate(m.params)])
        m.biases[-1][:] = [0.5, -1.5]
        assert np.array_equal(mlp_forward(m, np.array([1.0, 2.0, 3.0])), [0.5, -1.5])

    def test_identity_layer(self):
        m = Mlp((2, 2), [np.eye(2)], [np.zeros(2)], "identity")
        assert np.array_equal(m.forward(np.array([1.0, 2.0])), [1.0, 2.0])

    def test_matches_straight_line_forward(self):
        m = Mlp.init((2, 3, 1), Rng(4))
        x = np.array([0.3, -1.2])
        assert np.allclose(m.forward(x), _straight_forward(m, x), atol=1e-12, rtol=0)

    def test_batch_equals_rows(self):
        m = Mlp.init((4, 5, 3), Rng(1))
        x = Rng(2).gaussian(20).reshape(5, 4)
        batch = m.forward(x)
        # BLAS may order the matrix-vector sums differently
        for i in range(5):
            assert np.allclose(batch[i], m.forward(x[i]), atol=1e-13, rtol=0)

    def test_forward_is_pure(self):
        m = Mlp.init((3, 4, 2), Rng(0))
        x = np.ones(3)
        assert np.array_equal(m.forward(x), m.forward(x))

    def test_linear_neuron_gradient(self):
        m = Mlp((1, 1), [np.array([[2.0]])], [np.array([0.5])], "identity")
        (gw, gb), gx = mlp_backward(m, np.array([3.0]), np.array([1.0]))
        assert gw[0, 0] == 3.0 and gb[0] == 1.0 and gx[0] == 2.0

    def test_zero_upstream(self):
        m = Mlp.init((3, 4, 2), Rng(0))
        grads, gx = m.backward(np.ones(3), np.zeros(2))
        assert all(not g.any() for g in grads) and not gx.any()

    def test_finite_difference_2_4_2(self):
        m = Mlp.init((2, 4, 2), Rng(3))
        x = np.array([0.7, -0.4])
        assert _fd_check(m, x, np.array([0.1, 0.2])) <= 1e-4

    @given(st.lists(st.integers(1, 5), min_size=2, max_size=4), st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_finite_difference_random_shapes(self, sizes, seed):
        m = Mlp.init(tuple(sizes), Rng(seed))
        x = Rng(seed, 1).gaussian(sizes[0])
        t = Rng(seed, 2).gaussian(sizes[-1])
        assert _fd_check(m, x, t) <= 1e-4

    def test_batch_backward_sums_rows(self):
        m = Mlp.init((3, 4, 2), Rng(0))
        x = Rng(1).gaussian(6).reshape(2, 3)
        up = Rng(2).gaussian(4).reshape(2, 2)
        gb, _ = m.backward(x, up)
        g0, _ = m.backward(x[0], up[0])
        g1, _ = m.backward(x[1], up[1])
        for a, b, c in zip(gb, g0, g1):
            assert np.allclose(a, b + c, atol=1e-14)

    def test_shape_errors(self):
        m = Mlp.init((3, 2), Rng(0))
        with pytest.raises(ShapeError):
            m.forward(np.ones(4))
        with pytest.raises(ShapeError):
            m.backward(np.ones(3), np.ones(3))
        with pytest.raises(ShapeError):
            Mlp((3, 2), [np.ones((2, 3))], [np.zeros(2)])

    def test_xavier_bound(self):
        m = Mlp.init((10, 30), Rng(0))
        assert np.abs(m.weights[0]).max() <= math.sqrt(6 / 40)
        assert not m.biases[0].any()

    def test_checkpoint_round_trip(self, tmp_path):
        m = Mlp.init((3, 5, 2), Rng(8))
        save_mlp(m, tmp_path / "m.ckpt")
        text = (tmp_path / "m.ckpt").read_text()
        assert text.splitlines()[0] == "MLPCKPT v1"
        assert text.splitlines()[1] == "3 5 2"
        back = load_mlp(tmp_path / "m.ckpt")
        for a, b in zip(m.params, back.params):
            assert np.array_equal(a, b)

    def test_checkpoint_errors(self):
        lines = mlp_to_lines(Mlp.init((2, 2), Rng(0)))
        with pytest.raises(ParseError):
            mlp_from_lines(["nope"] + lines[1:])
        with pytest.raises(ParseError):
            mlp_from_lines(lines[:-1])


class TestAdam:
    def test_single_step_hand_value(self):
        st_ = AdamState.for_params([np.zeros(1)], lr=0.001)
        (p,), s2 = adam_step(st_, [np.zeros(1)], [np.ones(1)])
        assert abs(p[0] - (-0.001)) < 1e-6
        assert s2.step == 1 and st_.step == 0

    def test_zero_grads_only_decay_moments(self):
        params = [np.array([1.0, -2.0])]
        state = AdamState.for_params(params, lr=0.1)
        params, state = adam_step(state, params, [np.array([3.0, 1.0])])
        for _ in range(5):
            m, v = state.m[0].copy(), state.v[0].copy()
            _, state = adam_step(state, params, [np.zeros(2)])
            assert np.array_equal(state.m[0], 0.9 * m)
            assert np.array_equal(state.v[0], 0.999 * v)

    def test_zero_grads_from_fresh_state(self):
        params = [np.array([1.0, -2.0])]
        new, _ = adam_step(AdamState.for_params(params), params, [np.zeros(2)])
        assert np.array_equal(new[0], params[0])

    def test_quadratic_convergence(self):
        theta = [np.array([1.0])]
        state = AdamState.for_params(theta, lr=0.01)
        for _ in range(2000):
            theta, state = adam_step(state, theta, [2.0 * theta[0]])
        assert abs(theta[0][0]) < 1e-3

    def test_non_finite_gradient(self):
        with pytest.raises(NumericError):
            adam_step(AdamState.for_params([np.zeros(2)]), [np.zeros(2)], [np.array([np.nan, 0.0])])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step(AdamState.for_params([np.zeros(2)]), [np.zeros(2)], [np.zeros(3)])
