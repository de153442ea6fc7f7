"""Acceptance criteria 1 to 9.

Each criterion is one ``test_criterion_<n>_...`` function; the terminal summary
prints one PASS or FAIL line per criterion together with the measured values
recorded through ``record_property``.
"""

import math
import time

import numpy as np
import pytest

from jacbound import trainer_experiments as te
from jacbound.capacity_bounds import (
    JacSummary,
    NormTable,
    bound_bartlett17,
    bound_cor3_resnet,
    bound_golowich,
    bound_neyshabur15,
    bound_neyshabur_pac,
    bound_thm1,
    dudley_erc_bound,
    gen_error_rhs,
    table2_cnn_variants,
)
from jacbound.erc_estimator import FiniteClass, erc_exact_finite, erc_from_losses, loss_matrix
from jacbound.linalg_core import frobenius_norm, spectral_norm, svd_small
from jacbound.margin_loss import LabeledDataset
from jacbound.relu_network import (
    NetworkSpec,
    ResNetBlock,
    dense_net,
    forward,
    jacobian_explicit,
    jacobian_op_norm,
    param_lipschitz_bound,
    resnet_param_lipschitz_bound,
)
from jacbound.structured_operators import (
    WidthOp,
    certified_norm,
    conv_weight,
    max_pool_op,
    orthonormalize_filters,
    width_op_matrix,
)

# pinned tolerances and runtime limits
CIRCULANT_REL_TOL = 1e-8
CIRCULANT_GRAM_TOL = 1e-8
CIRCULANT_SECONDS = 10
WIDTH_OP_ABS_TOL = 1e-12
WIDTH_OP_SECONDS = 5
LINEARIZATION_TOL = 1e-10
CHAIN_TOL = 1e-10
MATRIX_FREE_REL_TOL = 1e-8
JACOBIAN_SECONDS = 30
LIPSCHITZ_SECONDS = 60
ERC_ORACLE_TOL = 1e-12
ERC_SECONDS = 60
SEC5_GAP = 10.0
SEC5_SECONDS = 10 * 60
DEPTH_R2_MIN = 0.8
DEPTH_SECONDS = 20 * 60
HAND_CHECK_TOL = 1e-10
HAND_CHECK_SECONDS = 1.0

DESK_SEED = 0


def circulant_configs(count=50, seed=1):
    """Seeded (k, s, n, p) draws with s | k, n <= k and p a multiple of k."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        k = int(rng.integers(1, 13))
        s = int(rng.choice([d for d in range(1, k + 1) if k % d == 0]))
        n = int(rng.integers(1, k + 1))
        out.append((k, s, n, k * int(rng.integers(1, 4))))
    return out


def test_criterion_1_circulant_certificate(record_property):
    start = time.perf_counter()
    failures = []
    for idx, (k, s, n, p) in enumerate(circulant_configs()):
        W = conv_weight(orthonormalize_filters(n, k, seed=idx, s=s), p)
        est = spectral_norm(W, tol=1e-12, max_iter=100000, seed=idx).value
        rel = abs(est - math.sqrt(k / s)) / math.sqrt(k / s)
        gram = frobenius_norm(W.T @ W - (k / s) * np.eye(p)) if n == k else 0.0
        if rel > CIRCULANT_REL_TOL or gram > CIRCULANT_GRAM_TOL:
            failures.append(((k, s, n, p), rel))
    elapsed = time.perf_counter() - start
    record_property("configs", 50)
    record_property("failing", len(failures))
    record_property("failing_with_n_plus_s_le_k", sum(1 for (k, s, n, _), _r in failures if n + s <= k))
    record_property("seconds", round(elapsed, 2))
    assert elapsed < CIRCULANT_SECONDS
    assert not failures, f"norm differs from sqrt(k/s) on {len(failures)} configs, e.g. {failures[:3]}"


def test_criterion_2_width_operators(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    checked = 0
    for s in (1, 2, 3, 4, 8):
        for p in range(s, 65, s):
            x = rng.normal(size=p)
            ops = [
                WidthOp("avg_pool", p, s),
                WidthOp("max_pool", p, s),
                WidthOp("padding", p, s),
                WidthOp("one_by_one_conv", p, s, coeffs=rng.normal(size=s)),
            ]
            for op in ops:
                T = width_op_matrix(op, x) if op.kind == "max_pool" else width_op_matrix(op)
                if op.kind == "avg_pool":
                    expected = math.sqrt(1.0 / s)
                elif op.kind == "one_by_one_conv":
                    expected = math.sqrt(float(np.sum(op.coeffs**2)))
                else:
                    expected = 1.0
                assert certified_norm(op) == pytest.approx(expected, abs=WIDTH_OP_ABS_TOL)
                worst = max(worst, abs(svd_small(T)[1][0] - expected))
                checked += 1
            T, _ = max_pool_op(x, s)
            assert np.all(T.sum(axis=1) == 1.0)
    elapsed = time.perf_counter() - start
    record_property("operators", checked)
    record_property("worst_abs_error", f"{worst:.2e}")
    record_property("seconds", round(elapsed, 2))
    assert worst <= WIDTH_OP_ABS_TOL
    assert elapsed < WIDTH_OP_SECONDS


def _random_net(rng):
    D = int(rng.integers(1, 5))
    dims = [int(rng.integers(1, 17)) for _ in range(D + 1)]
    return dense_net([rng.normal(size=(dims[d + 1], dims[d])) / math.sqrt(dims[d]) for d in range(D)])


def test_criterion_3_jacobian_exactness(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    worst_lin = worst_chain = worst_norm = 0.0
    for trial in range(100):
        net = _random_net(rng)
        x = rng.normal(size=net.input_dim)
        tr = forward(net, x)
        f = tr.output[0]
        D = net.depth
        J = jacobian_explicit(net, x, 1, D, tr)
        worst_lin = max(worst_lin, np.linalg.norm(f - J @ x) / (1 + np.linalg.norm(f)))
        for d in range(1, D):
            split = jacobian_explicit(net, x, d + 1, D, tr) @ jacobian_explicit(net, x, 1, d, tr)
            worst_chain = max(worst_chain, np.linalg.norm(J - split))
        ref = svd_small(J)[1][0] if J.size else 0.0
        est = jacobian_op_norm(net, x, 1, D, tol=1e-12, seed=trial, max_iter=100000, trace=tr).value
        if ref > 0:
            worst_norm = max(worst_norm, abs(est - ref) / ref)
        else:
            assert est == 0.0
    elapsed = time.perf_counter() - start
    record_property("worst_linearization", f"{worst_lin:.2e}")
    record_property("worst_chain", f"{worst_chain:.2e}")
    record_property("worst_norm_rel", f"{worst_norm:.2e}")
    record_property("seconds", round(elapsed, 2))
    assert worst_lin <= LINEARIZATION_TOL
    assert worst_chain <= CHAIN_TOL
    assert worst_norm <= MATRIX_FREE_REL_TOL
    assert elapsed < JACOBIAN_SECONDS


def test_criterion_4_lipschitz_sweeps(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    dense_violations = resnet_violations = 0
    tightest = math.inf
    for _ in range(100):
        A = _random_net(rng)
        B = dense_net([l.W + rng.uniform(0.01, 1.0) * rng.normal(size=l.W.shape) for l in A.layers])
        cert = param_lipschitz_bound(A, B, rng.normal(size=A.input_dim))
        dense_violations += cert.actual > cert.bound
        if cert.actual > 0:
            tightest = min(tightest, cert.bound / cert.actual)
    for _ in range(50):
        D, p, q = int(rng.integers(1, 4)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        A = NetworkSpec(tuple(ResNetBlock(rng.normal(size=(q, p)) / p, rng.normal(size=(p, q)) / q) for _ in range(D)))
        B = NetworkSpec(
            tuple(
                ResNetBlock(l.U + 0.5 * rng.normal(size=l.U.shape), l.V + 0.5 * rng.normal(size=l.V.shape))
                for l in A.layers
            )
        )
        cert = resnet_param_lipschitz_bound(A, B, rng.normal(size=p))
        resnet_violations += cert.actual > cert.bound
    elapsed = time.perf_counter() - start
    record_property("dense_violations", dense_violations)
    record_property("resnet_violations", resnet_violations)
    record_property("min_bound_over_actual", round(tightest, 3))
    record_property("seconds", round(elapsed, 2))
    assert dense_violations == 0 and resnet_violations == 0
    assert elapsed < LIPSCHITZ_SECONDS


def _enumeration_oracle(G):
    """Independent loop over sign patterns encoded as integers, bit i giving eps_i."""
    n, m = G.shape
    total = 0.0
    for code in range(2**m):
        best = 0.0
        for f in range(n):
            acc = 0.0
            for i in range(m):
                acc += G[f, i] if (code >> i) & 1 else -G[f, i]
            best = max(best, abs(acc) / m)
        total += best
    return total / 2**m


def test_criterion_5_erc_oracle(record_property):
    start = time.perf_counter()
    # hand-enumerable singletons
    assert erc_from_losses(np.zeros((1, 6))) == 0.0
    assert erc_from_losses([[1.0]]) == 1.0
    assert erc_from_losses([[1.0, 1.0]]) == 0.5
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        m = int(rng.integers(1, 13))
        members = [dense_net([rng.normal(size=(4, 3)), rng.normal(size=(3, 4))]) for _ in range(int(rng.integers(1, 5)))]
        data = LabeledDataset(rng.normal(size=(m, 3)), rng.integers(0, 3, size=m), 3)
        cls = FiniteClass(members, float(rng.uniform(0.1, 2.0)))
        worst = max(worst, abs(erc_exact_finite(cls, data) - _enumeration_oracle(loss_matrix(cls, data))))
    elapsed = time.perf_counter() - start
    record_property("worst_abs_error", f"{worst:.2e}")
    record_property("seconds", round(elapsed, 2))
    assert worst <= ERC_ORACLE_TOL
    assert elapsed < ERC_SECONDS


def _run_sec5():
    start = time.perf_counter()
    cfg, train, test = te.desk_cnn_setup(DESK_SEED)
    text, terms, _, hist = te.experiment_fig1a(cfg, train, test)
    return text, terms, hist, time.perf_counter() - start


def _run_depth():
    start = time.perf_counter()
    cfg, train, _ = te.desk_dense_setup(DESK_SEED)
    text, rows = te.experiment_fig1c(te.FIG1C_DEPTHS, cfg, train)
    return text, rows, time.perf_counter() - start


@pytest.fixture(scope="module")
def sec5_run():
    return _run_sec5()


@pytest.fixture(scope="module")
def depth_run():
    return _run_depth()


def test_criterion_6_sec5_ordering(sec5_run, record_property):
    _, terms, hist, elapsed = sec5_run
    ours, b1, b2, b3 = terms["Ours"], terms["Bound1"], terms["Bound2"], terms["Bound3"]
    record_property("Ours", f"{ours:.4g}")
    record_property("Bound1", f"{b1:.4g}")
    record_property("Bound2", f"{b2:.4g}")
    record_property("Bound3", f"{b3:.4g}")
    record_property("min(B1,B2)/Ours", round(min(b1, b2) / ours, 2))
    record_property("Bound3/Bound2", round(b3 / b2, 3))
    record_property("train_acc", hist[-1]["train_acc"])
    record_property("seconds", round(elapsed, 1))
    assert elapsed < SEC5_SECONDS
    assert ours < b1 and ours < b2
    assert min(b1, b2) / ours >= SEC5_GAP
    assert b3 / b2 >= SEC5_GAP


def test_criterion_7_depth_dependence(depth_run, record_property):
    _, rows, elapsed = depth_run
    depths = [r[0] for r in rows]
    bjac = [r[1] for r in rows]
    prod = [r[2] for r in rows]
    prod_slope, prod_r2 = te.linear_fit(depths, np.log(prod))
    jac_slope, _ = te.linear_fit(depths, np.log(bjac))
    record_property("prod_slope", round(prod_slope, 4))
    record_property("prod_r2", round(prod_r2, 4))
    record_property("jac_slope", round(jac_slope, 4))
    record_property("seconds", round(elapsed, 1))
    assert all(j <= p + 1e-8 for j, p in zip(bjac, prod))
    assert prod_slope > 0 and prod_r2 >= DEPTH_R2_MIN
    assert jac_slope < prod_slope
    assert elapsed < DEPTH_SECONDS


def test_criterion_8_hand_checks(record_property):
    start = time.perf_counter()
    unit = JacSummary(1.0, 1.0)
    checks = {}
    homog = NormTable.from_values([1.0, 1.0], 2.0, 4.0, 4, 4)
    checks["thm1"] = (bound_thm1(homog, unit, 100, 1.0, 1.0, 1.0, log_c_net=1.0), math.sqrt(32) / 10)
    checks["neyshabur15"] = (bound_neyshabur15(NormTable.from_values([1.0, 1.0], 1.0, 1.0), 100, 1.0), 0.4)
    ident8 = NormTable.from_values([1.0, 1.0], math.sqrt(8), 8.0, 8, 8)
    checks["bartlett17"] = (bound_bartlett17(ident8, 100, 1.0), math.log(8) * (2 * 8 ** (2 / 3)) ** 1.5 / 10)
    ident4 = NormTable.from_values([1.0, 1.0], 2.0, 4.0, 4, 4)
    checks["neyshabur_pac"] = (bound_neyshabur_pac(ident4, 100, 1.0), math.log(8) * math.sqrt(128) / 10)
    golo = NormTable.from_values([1.0] * 4, 2.0, 4.0, 4, 4)
    checks["golowich"] = (bound_golowich(golo, 256, 1.0), 16 * min(math.sqrt(math.log(16)) / 4, 0.125))
    t2 = table2_cnn_variants(9, 3, 64, 4, 10**4)
    checks["table2_neyshabur15"] = (t2["neyshabur15"], 16 * 4096 / 100)
    checks["table2_bartlett17"] = (t2["bartlett17"], 3**1.5 * 8 * 64 / 100)
    checks["table2_golowich"] = (t2["golowich"], 4096 * 0.02)
    checks["table2_ours"] = (t2["ours"], 9 * 18 / 100)
    checks["cor3"] = (bound_cor3_resnet([(1.0, 1.0)] * 2, unit, 100, 1.0, 1.0, 4, 4), math.sqrt(32 * math.log(10) / 100))
    checks["dudley"] = (dudley_erc_bound(1.0, 1.0, 1.0, 4.0, 100), math.sqrt(4 * math.log(5)) / 10)
    checks["gen_error_rhs"] = (gen_error_rhs(0.1, 0.05, 200, 0.05), 0.2 + 3 * math.sqrt(math.log(40) / 400))
    # rounded values quoted alongside the examples
    quoted = {"thm1": 0.5657, "bartlett17": 4.705, "golowich": 2.0, "dudley": 0.2537, "gen_error_rhs": 0.4881}
    worst = max(abs(got - want) / abs(want) for got, want in checks.values())
    elapsed = time.perf_counter() - start
    record_property("checks", len(checks))
    record_property("worst_rel_error", f"{worst:.2e}")
    record_property("seconds", round(elapsed, 3))
    assert worst <= HAND_CHECK_TOL
    for name, value in quoted.items():
        assert checks[name][0] == pytest.approx(value, abs=5e-4)
    assert elapsed < HAND_CHECK_SECONDS


def test_criterion_9_determinism(sec5_run, depth_run, record_property):
    sec5_again = _run_sec5()
    depth_again = _run_depth()
    same6 = sec5_again[0] == sec5_run[0]
    same7 = depth_again[0] == depth_run[0]
    record_property("fig1a_identical", same6)
    record_property("fig1c_identical", same7)
    assert same6 and same7
