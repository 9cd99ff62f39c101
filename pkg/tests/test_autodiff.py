import numpy as np
import pytest

from icleq.autodiff import GraphNumericsError, Tape
from icleq.rng import RngStream


def fd_check(build, params, h=1e-6, rtol=1e-6, atol=1e-9):
    """Every-coordinate central finite-difference check of tape gradients.

    ``build(tape, pnodes)`` must return a scalar node.
    """
    tape = Tape()
    pnodes = {k: tape.leaf(v, k) for k, v in params.items()}
    loss = build(tape, pnodes)
    grads = tape.backward(loss)

    def value(ps):
        t = Tape()
        return float(build(t, {k: t.leaf(v, k) for k, v in ps.items()}).value)

    for name, p in params.items():
        g = grads[name]
        for ix in range(p.size):
            plus = {k: v.copy() for k, v in params.items()}
            plus[name].flat[ix] += h
            minus = {k: v.copy() for k, v in params.items()}
            minus[name].flat[ix] -= h
            fd = (value(plus) - value(minus)) / (2 * h)
            an = g.flat[ix]
            assert abs(an - fd) <= max(atol, rtol * max(abs(an), abs(fd))), (
                f"{name}[{ix}]: analytic {an} vs fd {fd}"
            )


def rnd(seed, *shape):
    return RngStream(seed).normal(size=shape)


class TestOpGradients:
    def test_matmul_plain(self):
        params = {"a": rnd(1, 3, 4), "b": rnd(2, 4, 2)}
        fd_check(
            lambda t, p: t.sum_all(t.square(t.matmul(p["a"], p["b"]))), params
        )

    def test_matmul_broadcast_batch(self):
        # (2, 3, 4) @ (4, 2) and (3, 4) @ (2, 4, 2): both broadcast sides
        params = {"a": rnd(3, 2, 3, 4), "b": rnd(4, 4, 2)}
        fd_check(lambda t, p: t.sum_all(t.square(t.matmul(p["a"], p["b"]))), params)
        params = {"a": rnd(5, 3, 4), "b": rnd(6, 2, 4, 2)}
        fd_check(lambda t, p: t.sum_all(t.square(t.matmul(p["a"], p["b"]))), params)

    def test_add_sub_mul_broadcast(self):
        params = {"a": rnd(7, 2, 3), "b": rnd(8, 1, 3), "c": rnd(9, 2, 1)}

        def build(t, p):
            s = t.add(p["a"], p["b"])
            s = t.sub(s, p["c"])
            s = t.mul(s, p["b"])
            return t.sum_all(t.square(s))

        fd_check(build, params)

    def test_scale_square(self):
        params = {"a": rnd(10, 4)[:, None]}
        fd_check(lambda t, p: t.sum_all(t.square(t.scale(p["a"], -2.5))), params)

    def test_gelu(self):
        params = {"a": rnd(11, 3, 5)}
        fd_check(lambda t, p: t.sum_all(t.square(t.gelu(p["a"]))), params, h=1e-6)

    def test_layer_norm(self):
        params = {"a": rnd(12, 5, 2, 3), "g": 1 + 0.1 * rnd(13, 5), "b": 0.1 * rnd(14, 5)}

        def build(t, p):
            ln = t.layer_norm(
                p["a"], t.reshape(p["g"], (5, 1, 1)), t.reshape(p["b"], (5, 1, 1)), axis=0
            )
            return t.sum_all(t.square(ln))

        fd_check(build, params, h=1e-6, rtol=1e-5)

    def test_softmax_with_mask(self):
        mask = np.triu(np.full((4, 4), -1e9), k=1)
        params = {"a": rnd(15, 2, 4, 4)}

        def build(t, p):
            sm = t.softmax(p["a"], axis=-1, mask_add=mask)
            return t.sum_all(t.square(sm))

        fd_check(build, params)

    def test_softmax_axis0(self):
        params = {"a": rnd(16, 5, 3)}
        fd_check(lambda t, p: t.sum_all(t.square(t.softmax(p["a"], axis=0))), params)

    def test_transpose_reshape(self):
        params = {"a": rnd(17, 2, 3, 4)}

        def build(t, p):
            x = t.transpose(p["a"], (1, 2, 0))
            x = t.reshape(x, (3, 8))
            return t.sum_all(t.square(x))

        fd_check(build, params)

    def test_index_and_slice_last(self):
        params = {"a": rnd(18, 3, 6)}

        def build(t, p):
            x = t.index_last(p["a"], np.array([0, 2, 4]))
            y = t.slice_last(p["a"], 2)
            return t.add(t.sum_all(t.square(x)), t.sum_all(t.square(y)))

        fd_check(build, params)


class TestTapeMechanics:
    def test_masked_softmax_zeros_are_exact(self):
        tape = Tape()
        a = tape.leaf(rnd(19, 2, 4, 4), "a")
        sm = tape.softmax(a, axis=-1, mask_add=np.triu(np.full((4, 4), -1e9), k=1))
        assert np.all(sm.value[..., 0, 1:] == 0.0)
        np.testing.assert_allclose(sm.value.sum(axis=-1), 1.0, atol=1e-12)

    def test_constant_gets_no_gradient(self):
        tape = Tape()
        a = tape.leaf(rnd(20, 2, 2), "a")
        c = tape.constant(np.ones((2, 2)))
        loss = tape.sum_all(tape.square(tape.mul(a, c)))
        grads = tape.backward(loss)
        assert set(grads) == {"a"}
        assert c.grad is None

    def test_unused_leaf_reports_zero_gradient(self):
        tape = Tape()
        a = tape.leaf(rnd(21, 2), "a")
        b = tape.leaf(rnd(22, 3), "b")
        loss = tape.sum_all(tape.square(tape.reshape(a, (2, 1))))
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads["b"], np.zeros(3))

    def test_backward_requires_scalar(self):
        tape = Tape()
        a = tape.leaf(rnd(23, 2, 2), "a")
        with pytest.raises(ValueError):
            tape.backward(tape.square(a))

    def test_check_finite_names_the_node(self):
        tape = Tape(check_finite=True)
        a = tape.leaf(np.array([[1e308]]), "a")
        with np.errstate(over="ignore"), pytest.raises(GraphNumericsError, match="op=square"):
            tape.square(a)

    def test_topological_order_by_construction(self):
        tape = Tape()
        a = tape.leaf(rnd(24, 2, 2), "a")
        b = tape.square(a)
        c = tape.add(a, b)
        ids = [n.nid for n in tape.nodes]
        assert ids == sorted(ids)
        for node in tape.nodes:
            assert all(p.nid < node.nid for p in node.parents)

    def test_fanout_accumulates(self):
        # f = sum(a*a) + sum(a) -> df/da = 2a + 1
        tape = Tape()
        a = tape.leaf(rnd(25, 3), "a")
        loss = tape.add(tape.sum_all(tape.square(a)), tape.sum_all(a))
        grads = tape.backward(loss)
        np.testing.assert_allclose(grads["a"], 2 * a.value + 1.0, atol=1e-12)
