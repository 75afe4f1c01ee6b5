import math

import numpy as np
import pytest

from udn import autodiff as ad
from udn.autodiff import Graph, ParamStore

from conftest import central_diff, rel_err


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


class TestForwardDense:
    def test_identity_weights(self):
        g = Graph()
        out = ad.forward_dense(g.constant([[1.0, 2.0]]), g.constant(np.eye(2)), g.constant([0.0, 0.0]), "relu")
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]])

    def test_relu_clamps(self):
        g = Graph()
        out = ad.forward_dense(g.constant([[-1.0, 2.0]]), g.constant(np.eye(2)), g.constant([0.0, 0.0]), "relu")
        np.testing.assert_array_equal(out.data, [[0.0, 2.0]])

    def test_matches_triple_loop(self, rng):
        x, w, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
        g = Graph()
        out = ad.forward_dense(g.constant(x), g.constant(w), g.constant(b), "identity")
        np.testing.assert_allclose(out.data, naive_matmul(x, w) + b, atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        g = Graph()
        with pytest.raises(ad.DimensionError):
            ad.forward_dense(g.constant(np.ones((2, 3))), g.constant(np.ones((2, 2))), g.constant(np.zeros(2)))


class TestLikelihoods:
    def test_uniform_softmax(self):
        g = Graph()
        assert ad.categorical_loglik(g.constant([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(0.5), abs=1e-15)

    def test_saturated_softmax(self):
        g = Graph()
        v = ad.categorical_loglik(g.constant([[1000.0, 0.0]]), [0]).item()
        assert v == pytest.approx(0.0, abs=1e-300)

    def test_matches_unstabilised_oracle(self, rng):
        logits = rng.normal(size=(5, 3))
        labels = rng.integers(0, 3, size=5)
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        expected = np.log(p[np.arange(5), labels]).sum()
        g = Graph()
        assert ad.categorical_loglik(g.constant(logits), labels).item() == pytest.approx(expected, abs=1e-10)

    def test_label_out_of_range(self):
        g = Graph()
        with pytest.raises(IndexError):
            ad.categorical_loglik(g.constant([[0.0, 1.0]]), [2])

    @pytest.mark.parametrize("scale", [1e2, 1e3, 1e4])
    def test_large_logits_finite(self, rng, scale):
        logits = rng.uniform(-scale, scale, size=(20, 4))
        g = Graph()
        v = ad.categorical_loglik(g.constant(logits), rng.integers(0, 4, size=20)).item()
        assert math.isfinite(v)

    def test_gaussian_zero_residual(self):
        g = Graph()
        y = np.array([0.3, -1.0, 2.0])
        v = ad.gaussian_loglik(g.constant(y), y, 1.0).item()
        assert v == pytest.approx(-3 * 0.5 * math.log(2 * math.pi), abs=1e-14)

    def test_gaussian_unit_residual(self):
        g = Graph()
        v = ad.gaussian_loglik(g.constant([0.0]), [1.0], 1.0).item()
        assert v == pytest.approx(-0.5 * math.log(2 * math.pi) - 0.5, abs=1e-14)

    def test_gaussian_closed_form(self, rng):
        mu, y, s = rng.normal(size=7), rng.normal(size=7), 0.7
        expected = sum(-0.5 * math.log(2 * math.pi * s * s) - (yi - mi) ** 2 / (2 * s * s) for mi, yi in zip(mu, y))
        g = Graph()
        assert ad.gaussian_loglik(g.constant(mu), y, s).item() == pytest.approx(expected, abs=1e-12)

    def test_gaussian_sigma_domain(self):
        g = Graph()
        with pytest.raises(ValueError):
            ad.gaussian_loglik(g.constant([0.0]), [0.0], 0.0)


class TestBackward:
    def test_square(self):
        store = ParamStore()
        store.add("w", 3.0)
        g = Graph()
        w = g.param(store, "w")
        g.backward(w * w)
        assert store.grad("w") == 6.0

    def test_disconnected_parameter(self):
        store = ParamStore()
        store.add("w", 3.0)
        store.add("unused", np.ones(4))
        g = Graph()
        w = g.param(store, "w")
        g.param(store, "unused")
        g.backward(ad.exp(w))
        np.testing.assert_array_equal(store.grad("unused"), np.zeros(4))

    def test_non_scalar_root(self):
        g = Graph()
        with pytest.raises(ad.ContractError):
            g.backward(g.constant([1.0, 2.0]) * 2.0)

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_nonfinite_is_error(self):
        g = Graph()
        with pytest.raises(ad.NonFiniteError):
            ad.exp(g.constant([1000.0]))

    def test_one_layer_net_against_fd(self, rng):
        x = rng.normal(size=(6, 3))
        y = rng.integers(0, 2, size=6)
        store = ParamStore()
        store.add("w", rng.normal(size=(3, 2)))
        store.add("b", rng.normal(size=2))

        def loss():
            g = Graph()
            out = ad.forward_dense(g.constant(x), g.param(store, "w"), g.param(store, "b"), "identity")
            return g, ad.categorical_loglik(out, y)

        g, node = loss()
        g.backward(node)
        for name in ("w", "b"):
            fd = central_diff(lambda: loss()[1].item(), store[name])
            assert rel_err(store.grad(name), fd).max() <= 1e-6

    def test_gradients_accumulate_until_zeroed(self):
        store = ParamStore()
        store.add("w", 2.0)
        for _ in range(2):
            g = Graph()
            g.backward(g.param(store, "w") * 3.0)
        assert store.grad("w") == 6.0
        store.zero_grad()
        assert store.grad("w") == 0.0

    def test_broadcast_adjoint(self, rng):
        store = ParamStore()
        store.add("b", rng.normal(size=3))
        x = rng.normal(size=(5, 3))
        g = Graph()
        g.backward(ad.sum(ad.square(g.constant(x) + g.param(store, "b"))))
        np.testing.assert_allclose(store.grad("b"), 2 * (x + store["b"]).sum(axis=0), rtol=1e-14)


def _random_mlp_loss(seed):
    """A random <=3-layer, <=32-unit net with a mixed scalar loss."""
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, 4))
    widths = [int(rng.integers(1, 6))] + [int(rng.integers(1, 33)) for _ in range(depth)]
    n = int(rng.integers(1, 9))
    x = rng.normal(size=(n, widths[0]))
    k = int(rng.integers(2, 5))
    labels = rng.integers(0, k, size=n)
    targets = rng.normal(size=n)
    store = ParamStore()
    for i in range(depth):
        store.add(f"w{i}", rng.normal(size=(widths[i], widths[i + 1])) / math.sqrt(widths[i]))
        store.add(f"b{i}", rng.normal(size=widths[i + 1]) * 0.1)
    store.add("head", rng.normal(size=(widths[-1], k)))
    store.add("reg", rng.normal(size=(widths[-1], 1)))

    def build():
        g = Graph()
        h = g.constant(x)
        for i in range(depth):
            h = ad.forward_dense(h, g.param(store, f"w{i}"), g.param(store, f"b{i}"), "relu")
        logits = h @ g.param(store, "head")
        mean = (h @ g.param(store, "reg"))[:, 0]
        penalty = ad.sum(ad.square(g.param(store, "w0"))) * -0.5
        return g, ad.categorical_loglik(logits, labels) + ad.gaussian_loglik(mean, targets, 0.8) + penalty

    return store, build


@pytest.mark.parametrize("seed", range(100))
def test_gradient_matches_finite_differences(seed):
    store, build = _random_mlp_loss(seed)
    g, loss = build()
    g.backward(loss)
    # finite differences carry ~eps*|f|/h of roundoff; keep the floor well above it
    floor = 1e-6 * max(1.0, abs(loss.item()))
    for name in store:
        fd = central_diff(lambda: build()[1].item(), store[name], h=1e-5)
        assert rel_err(store.grad(name), fd, floor).max() <= 1e-4, name


def test_determinism(rng):
    a = _random_mlp_loss(7)
    b = _random_mlp_loss(7)
    ga, la = a[1]()
    gb, lb = b[1]()
    ga.backward(la)
    gb.backward(lb)
    assert la.item() == lb.item()
    for name in a[0]:
        assert np.array_equal(a[0].grad(name), b[0].grad(name))


class TestStep:
    def test_plain_sgd(self):
        store = ParamStore()
        store.add("w", 1.0)
        store.slots["w"].grad[...] = 1.0
        ad.step(store, "sgd_momentum", 0.1, momentum=0.0)
        assert store["w"] == pytest.approx(0.9, abs=1e-15)

    def test_momentum_accumulates(self):
        store = ParamStore()
        store.add("w", 0.0)
        moves = []
        for _ in range(2):
            before = float(store["w"])
            store.slots["w"].grad[...] = 1.0
            ad.step(store, "sgd_momentum", 0.1, momentum=0.9)
            moves.append(float(store["w"]) - before)
        assert moves[1] / moves[0] == pytest.approx(1.9, rel=1e-12)

    def test_weight_decay_added_to_gradient(self):
        store = ParamStore()
        store.add("w", 2.0)
        ad.step(store, "sgd_momentum", 0.5, weight_decay=0.1)
        assert store["w"] == pytest.approx(2.0 - 0.5 * 0.2)

    def test_adam_matches_reference_recurrence(self, rng):
        grads = rng.normal(size=(5, 3))
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        w_ref = rng.normal(size=3)
        store = ParamStore()
        store.add("w", w_ref)
        m = np.zeros(3)
        v = np.zeros(3)
        for t, gt in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * gt
            v = b2 * v + (1 - b2) * gt**2
            w_ref = w_ref - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
            store.slots["w"].grad[...] = gt
            ad.step(store, "adam", lr)
        np.testing.assert_allclose(store["w"], w_ref, atol=1e-12, rtol=0)

    def test_adam_first_step_is_about_lr(self):
        store = ParamStore()
        store.add("w", 1.0)
        store.slots["w"].grad[...] = 0.37
        ad.step(store, "adam", 0.01)
        assert store["w"] == pytest.approx(0.99, abs=1e-9)

    def test_only_named_slots_move(self):
        store = ParamStore()
        store.add("a", 1.0)
        store.add("b", 1.0)
        store.slots["a"].grad[...] = 1.0
        store.slots["b"].grad[...] = 1.0
        ad.step(store, "adam", 0.1, names=["a"])
        assert store["b"] == 1.0 and store["a"] != 1.0

    @pytest.mark.parametrize("lr", [0.0, -1.0])
    def test_bad_lr(self, lr):
        store = ParamStore()
        store.add("w", 1.0)
        with pytest.raises(ad.ConfigError):
            ad.step(store, "adam", lr)

    def test_unknown_optimizer(self):
        with pytest.raises(ad.ConfigError):
            ad.step(ParamStore(), "rmsprop", 0.1)
