import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jacbound.errors import DimensionMismatchError, ValidationError
from jacbound.relu_network import (
    ConvCirculant,
    Dense,
    NetworkSpec,
    ResNetBlock,
    WidthChange,
    backprop,
    dense_net,
    forward,
    forward_batch,
    jacobian_explicit,
    jacobian_op_norm,
    jacobian_stats,
    param_lipschitz_bound,
    resnet_param_lipschitz_bound,
)
from jacbound.structured_operators import FilterBank, WidthOp


def random_dense(seed, depth, width, p0=None, out=None):
    rng = np.random.default_rng(seed)
    dims = [p0 or width] + [width] * (depth - 1) + [out or width]
    return dense_net([rng.normal(size=(dims[d + 1], dims[d])) / np.sqrt(dims[d]) for d in range(depth)])


def random_resnet(seed, depth, p, q):
    rng = np.random.default_rng(seed)
    return NetworkSpec(tuple(ResNetBlock(rng.normal(size=(q, p)) / p, rng.normal(size=(p, q)) / q) for _ in range(depth)))


def mixed_net(seed):
    """Dense, conv, average pool, 1x1 conv, max pool and a ResNet block in one chain."""
    rng = np.random.default_rng(seed)
    bank = FilterBank(rng.normal(size=(2, 4)), 2)
    return NetworkSpec(
        (
            Dense(rng.normal(size=(8, 6))),
            ConvCirculant(bank, 8),
            WidthChange(WidthOp("avg_pool", 8, 2)),
            WidthChange(WidthOp("one_by_one_conv", 4, 2, coeffs=np.array([0.7, -0.4]))),
            WidthChange(WidthOp("max_pool", 8, 2)),
            ResNetBlock(rng.normal(size=(3, 4)), rng.normal(size=(4, 3))),
            Dense(rng.normal(size=(3, 4))),
        )
    )


def naive_forward(net, x):
    """Independent oracle written directly from the layer definitions."""
    h = np.asarray(x, dtype=float)
    for layer in net.layers:
        if isinstance(layer, ResNetBlock):
            h = np.maximum(layer.V @ np.maximum(layer.U @ h, 0) + h, 0)
        elif isinstance(layer, WidthChange):
            op = layer.op
            if op.kind == "max_pool":
                h = np.array([seg[np.argmax(np.abs(seg))] for seg in h.reshape(-1, op.s)])
            else:
                h = layer.T @ h
        else:
            h = np.maximum(layer.matrix() @ h, 0)
    return h


class TestForward:
    def test_relu_clips(self):
        out = forward(dense_net([np.diag([2.0, 1.0])]), [1.0, -1.0]).output[0]
        np.testing.assert_array_equal(out, [2.0, 0.0])

    def test_positive_chain_is_matrix_product(self):
        rng = np.random.default_rng(0)
        W1, W2 = rng.uniform(0.1, 1, (3, 4)), rng.uniform(0.1, 1, (2, 3))
        x = rng.uniform(0.1, 1, 4)
        np.testing.assert_allclose(forward(dense_net([W1, W2]), x).output[0], W2 @ W1 @ x, rtol=1e-14)

    def test_homogeneity_c3(self):
        net = random_dense(1, 4, 8)
        x = np.random.default_rng(2).normal(size=8)
        a, b = forward(net, 3 * x).output[0], 3 * forward(net, x).output[0]
        assert np.linalg.norm(a - b) <= 1e-12 * np.linalg.norm(b)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6), st.floats(1e-3, 1e3))
    def test_homogeneity_property(self, seed, c):
        net = mixed_net(seed)
        x = np.random.default_rng(seed + 1).normal(size=6)
        a, b = forward(net, c * x).output[0], c * forward(net, x).output[0]
        assert np.linalg.norm(a - b) <= 1e-12 * (1 + np.linalg.norm(b))

    def test_mixed_net_matches_naive(self):
        net = mixed_net(3)
        X = np.random.default_rng(4).normal(size=(5, 6))
        out = forward_batch(net, X).output
        for row, x in zip(out, X):
            np.testing.assert_allclose(row, naive_forward(net, x), rtol=1e-13, atol=1e-13)

    def test_trace_mask_invariant(self):
        tr = forward_batch(mixed_net(5), np.random.default_rng(6).normal(size=(4, 6)))
        for t in tr.layers:
            if t.mask is not None:
                assert set(np.unique(t.mask)) <= {0.0, 1.0}
                np.testing.assert_array_equal(t.post, t.mask * t.pre)

    def test_dimension_checks(self):
        with pytest.raises(DimensionMismatchError):
            forward(random_dense(0, 2, 4), np.ones(5))
        with pytest.raises(ValidationError):
            NetworkSpec((Dense(np.ones((3, 4))), Dense(np.ones((2, 4)))))
        with pytest.raises(ValidationError):
            ResNetBlock(np.ones((3, 4)), np.ones((5, 3)))


class TestJacobian:
    def test_zero_is_inactive_example(self):
        net = dense_net([np.array([[1.0, -1.0], [0.0, 2.0]])])
        x = np.array([1.0, 1.0])
        J = jacobian_explicit(net, x, 1, 1)
        np.testing.assert_array_equal(J, [[0.0, 0.0], [0.0, 2.0]])
        np.testing.assert_array_equal(J @ x, forward(net, x).output[0])

    def test_empty_range_identity(self):
        net = random_dense(0, 3, 5)
        np.testing.assert_array_equal(jacobian_explicit(net, np.ones(5), 3, 2), np.eye(5))
        assert jacobian_op_norm(net, np.ones(5), 3, 2).value == 1.0

    def test_out_of_range(self):
        net = random_dense(0, 3, 5)
        with pytest.raises(ValidationError):
            jacobian_explicit(net, np.ones(5), 0, 2)
        with pytest.raises(ValidationError):
            jacobian_op_norm(net, np.ones(5), 1, 4)

    def test_exact_linearization_d3_p8(self):
        net = random_dense(7, 3, 8)
        x = np.random.default_rng(8).normal(size=8)
        J = jacobian_explicit(net, x, 1, 3)
        assert np.linalg.norm(forward(net, x).output[0] - J @ x) <= 1e-10

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6))
    def test_linearization_and_chain_mixed(self, seed):
        net = mixed_net(seed)
        x = np.random.default_rng(seed).normal(size=6)
        tr = forward(net, x)
        f = tr.output[0]
        J = jacobian_explicit(net, x, 1, net.depth, tr)
        assert np.linalg.norm(f - J @ x) <= 1e-10 * (1 + np.linalg.norm(f))
        for d in range(1, net.depth):
            a = tr.layers[d - 1].post[0]
            left = jacobian_explicit(net, x, d + 1, net.depth, tr)
            assert np.linalg.norm(J - left @ jacobian_explicit(net, x, 1, d, tr)) <= 1e-10 * (1 + np.linalg.norm(J))
            # the suffix Jacobian frozen at x also linearizes the suffix at a_d
            np.testing.assert_allclose(left @ a, f, atol=1e-10 * (1 + np.linalg.norm(f)))

    def test_matches_finite_differences(self):
        net = random_dense(11, 3, 6)
        x = np.random.default_rng(12).normal(size=6)
        J = jacobian_explicit(net, x, 1, 3)
        h = 1e-7
        fd = np.column_stack(
            [(naive_forward(net, x + h * e) - naive_forward(net, x - h * e)) / (2 * h) for e in np.eye(6)]
        )
        np.testing.assert_allclose(J, fd, atol=1e-6)

    def test_diag_norm_six(self):
        net = dense_net([np.diag([2.0, 1.0]), np.diag([3.0, 1.0])])
        assert jacobian_op_norm(net, np.array([1.0, 1.0]), 1, 2, tol=1e-12).value == pytest.approx(6.0, rel=1e-10)

    def test_matrix_free_matches_svd_d4_p16(self):
        net = random_dense(13, 4, 16)
        x = np.random.default_rng(14).normal(size=16)
        ref = np.linalg.svd(jacobian_explicit(net, x, 1, 4), compute_uv=False)[0]
        est = jacobian_op_norm(net, x, 1, 4, tol=1e-10, max_iter=100000)
        assert est.value == pytest.approx(ref, rel=1e-8)

    def test_matrix_free_on_mixed_net(self):
        net = mixed_net(15)
        x = np.random.default_rng(16).normal(size=6)
        for i, j in [(1, 7), (2, 5), (4, 6), (6, 6)]:
            ref = np.linalg.svd(jacobian_explicit(net, x, i, j), compute_uv=False)[0]
            assert jacobian_op_norm(net, x, i, j, tol=1e-10, max_iter=100000).value == pytest.approx(ref, rel=1e-8, abs=1e-12)


class TestJacobianStats:
    def test_single_input_depth_one(self):
        W = np.array([[1.0, -2.0], [3.0, 1.0]])
        x = np.array([1.0, 1.0])
        stats = jacobian_stats(dense_net([W]), x[None], tol=1e-12)
        mask = (W @ x > 0).astype(float)
        assert stats.agg_full == pytest.approx(np.linalg.norm(np.diag(mask) @ W, 2), rel=1e-10)

    def test_aggregate_is_max(self):
        net = dense_net([np.diag([5.0, 1.0])])
        X = np.array([[0.0, 1.0], [1.0, 1.0]])
        stats = jacobian_stats(net, X, tol=1e-12)
        assert stats.full[0] == pytest.approx(1.0) and stats.agg_full == pytest.approx(5.0)
        assert stats.argmax_full == 1

    def test_empty_dataset(self):
        with pytest.raises(ValidationError):
            jacobian_stats(random_dense(0, 2, 3), np.zeros((0, 3)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6), st.integers(1, 5))
    def test_contraction_and_leave_one(self, seed, depth):
        net = random_dense(seed, depth, 6)
        X = np.random.default_rng(seed).normal(size=(4, 6))
        stats = jacobian_stats(net, X, tol=1e-10)
        assert np.all(stats.full >= 0)
        assert stats.agg_full <= stats.prod_spectral + 1e-8
        assert stats.agg_full == stats.full.max()
        assert stats.agg_leave_one == stats.leave_one.max()
        np.testing.assert_array_equal(stats.prefix[:, 0], 1.0)
        np.testing.assert_array_equal(stats.suffix[:, -1], 1.0)
        # each leave-one term is a product of sub-chain norms, so it is bounded by the left-out products
        for d in range(depth):
            rest = np.prod([n for k, n in enumerate(stats.layer_norms) if k != d])
            assert stats.leave_one[:, d].max() <= rest * (1 + 1e-8)


class TestLipschitzCertificates:
    def test_identical_nets(self):
        net = random_dense(0, 3, 5)
        cert = param_lipschitz_bound(net, net, np.ones(5))
        assert cert.bound == 0.0 and cert.actual == 0.0

    def test_hand_case(self):
        cert = param_lipschitz_bound(dense_net([np.eye(2)]), dense_net([0.5 * np.eye(2)]), np.array([1.0, 0.0]))
        assert cert.actual == pytest.approx(0.5, abs=1e-15)
        assert cert.bound >= 0.5

    def test_seeded_sweep(self):
        rng = np.random.default_rng(2024)
        for trial in range(100):
            depth, width = int(rng.integers(1, 5)), int(rng.integers(2, 17))
            A = random_dense(trial, depth, width)
            B = dense_net([W + 0.3 * rng.normal(size=W.shape) for W in (l.W for l in A.layers)])
            x = rng.normal(size=width)
            cert = param_lipschitz_bound(A, B, x)
            assert cert.actual <= cert.bound, trial

    def test_architecture_mismatch(self):
        with pytest.raises(ValidationError):
            param_lipschitz_bound(random_dense(0, 2, 4), random_dense(0, 3, 4), np.ones(4))

    def test_resnet_identical(self):
        net = random_resnet(0, 2, 4, 3)
        cert = resnet_param_lipschitz_bound(net, net, np.ones(4))
        assert cert.bound == 0.0 and cert.actual == 0.0

    def test_resnet_hand_case(self):
        U = np.eye(2)
        A = NetworkSpec((ResNetBlock(U, np.diag([1.0, 0.5])),))
        B = NetworkSpec((ResNetBlock(U, np.diag([0.5, 0.5])),))
        x = np.array([1.0, 2.0])
        cert = resnet_param_lipschitz_bound(A, B, x)
        # outputs (1+1, 2+1) and (1+0.5, 2+1): difference 0.5 in the first coordinate
        assert cert.actual == pytest.approx(0.5, abs=1e-15)
        # one block, empty suffix: B = 1, scale = 1 + 1, sqrt(2D) = sqrt(2), ||dV||_F = 0.5
        assert cert.bound == pytest.approx(1.0 * 2.0 * np.sqrt(5) * np.sqrt(2) * 0.5, rel=1e-12)

    def test_resnet_sweep(self):
        rng = np.random.default_rng(77)
        for trial in range(60):
            depth, p, q = int(rng.integers(1, 4)), int(rng.integers(2, 8)), int(rng.integers(1, 6))
            A = random_resnet(trial, depth, p, q)
            B = NetworkSpec(
                tuple(ResNetBlock(l.U + 0.3 * rng.normal(size=l.U.shape), l.V + 0.3 * rng.normal(size=l.V.shape)) for l in A.layers)
            )
            cert = resnet_param_lipschitz_bound(A, B, rng.normal(size=p))
            assert cert.actual <= cert.bound, trial


class TestBackprop:
    def test_gradients_match_finite_differences(self):
        net = mixed_net(21)
        X = np.random.default_rng(22).normal(size=(3, 6))
        G = np.random.default_rng(23).normal(size=(3, 3))
        grads = backprop(net, forward_batch(net, X), G)

        def objective(n):
            return float(np.sum(G * forward_batch(n, X).output))

        h = 1e-6
        W = net.layers[0].W.copy()
        W[2, 3] += h
        layers = list(net.layers)
        layers[0] = Dense(W)
        fd = (objective(NetworkSpec(tuple(layers))) - objective(net)) / h
        assert grads[0][2, 3] == pytest.approx(fd, rel=1e-4, abs=1e-7)

        F = net.layers[1].bank.filters.copy()
        F[1, 2] += h
        layers = list(net.layers)
        layers[1] = ConvCirculant(FilterBank(F, 2), 8)
        fd = (objective(NetworkSpec(tuple(layers))) - objective(net)) / h
        assert grads[1][1, 2] == pytest.approx(fd, rel=1e-4, abs=1e-7)

        blk = net.layers[5]
        V = blk.V.copy()
        V[0, 1] += h
        layers = list(net.layers)
        layers[5] = ResNetBlock(blk.U, V)
        fd = (objective(NetworkSpec(tuple(layers))) - objective(net)) / h
        assert grads[5][1][0, 1] == pytest.approx(fd, rel=1e-4, abs=1e-7)
        assert grads[2] is None and grads[4] is None
