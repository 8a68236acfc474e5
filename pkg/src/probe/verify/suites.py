"""Invariant suites behind ``probe verify``.

Each suite builds small random models and returns a list of
``VerificationResult``.  Model modules are imported inside the suites so
that ``oracles`` and ``mixed`` stay free of them.
"""

from __future__ import annotations

import math

import numpy as np

from probe.numeric import (Dual, dual_forward, finite_diff_gradient, finite_diff_jacobian,
                           matrix_exp, quadrature)
from probe.verify.oracles import (VerificationResult, closed_form_mle_gaussian,
                                  compare_densities, empirical_conditional, normal_pdf,
                                  normal_shift_l1, result)


def numeric_suite(rng) -> list[VerificationResult]:
    from probe.numeric import dual as D
    f = lambda x: D.tanh(x) * D.exp(x)  # noqa: E731
    xs = rng.uniform(-2, 2, 50)
    err = max(abs(dual_forward(f, x)[1] - finite_diff_gradient(
        lambda v: np.tanh(v[0]) * np.exp(v[0]), [x])[0]) for x in xs)
    q = quadrature(normal_pdf, -8, 8, 1024)
    a = rng.normal(size=(4, 4))
    e = matrix_exp(a)
    series = sum(np.linalg.matrix_power(a, k) / math.factorial(k) for k in range(40))
    return [result("numeric.dual_vs_fd", "max abs", err, 1e-7),
            result("numeric.simpson_normal", "|mass-1|", abs(q - 1), 1e-10),
            result("numeric.expm_vs_series", "max abs", np.max(np.abs(e - series)), 1e-10)]


def oracle_suite(rng) -> list[VerificationResult]:
    g = np.linspace(-8, 8, 1601)
    same = compare_densities(normal_pdf, normal_pdf, g)
    shift = compare_densities(normal_pdf, lambda x: normal_pdf(x, 0.1), g)
    box = np.linspace(0, 3, 3001)
    disjoint = compare_densities(((box >= 0) & (box <= 1)).astype(float),
                                 ((box >= 2) & (box <= 3)).astype(float), box)
    mean, var = closed_form_mle_gaussian([1.0, 3.0])
    cond = empirical_conditional([(0, "A"), (0, "A"), (0, "B"), (1, "B")])
    return [result("oracle.identical_l1", "l1", same.l1, 0.0),
            result("oracle.shift_l1", "|l1-exact|", abs(shift.l1 - normal_shift_l1(0.1)), 1e-4),
            result("oracle.disjoint_l1", "|l1-2|", abs(disjoint.l1 - 2.0), 2e-3),
            result("oracle.mle_13", "|mean-2|+|var-1|", abs(mean - 2) + abs(var - 1), 1e-15),
            result("oracle.conditional", "|P(A|0)-2/3|", abs(cond[0]["A"] - 2 / 3), 1e-15)]


def flow1d_suite(rng) -> list[VerificationResult]:
    from probe import flow1d
    net = flow1d.MonotoneNet.init(rng, hidden=(8, 8))
    xs = rng.uniform(-3, 3, 100)
    y, dydx = flow1d.forward_cdf(net, xs)
    h = 1e-5
    fd = (flow1d.forward_cdf(net, xs + h)[0] - flow1d.forward_cdf(net, xs - h)[0]) / (2 * h)
    rel = float(np.max(np.abs(dydx - fd) / np.maximum(np.abs(fd), 1e-12)))
    m = flow1d.mass(net, -40, 40)
    q = quadrature(lambda x: flow1d.density(net, x), -40, 40, 20000)
    return [result("flow1d.dydx_vs_fd", "max rel", rel, 1e-5),
            result("flow1d.monotone", "min dydx", float(dydx.min()), 0.0, upper=False),
            result("flow1d.mass", "|mass-1|", abs(m - 1), 1e-2),
            result("flow1d.ftc", "|quad-mass|", abs(q - m), 1e-6)]


def flownd_suite(rng) -> list[VerificationResult]:
    from probe import flownd
    upper, det_err, local_err = 0.0, 0.0, 0.0
    for n in (2, 3, 5):
        net = flownd.TriangularFlowNet.init(n, rng)
        f = flownd.flow_map(net)
        for _ in range(10):
            a = rng.normal(size=n)
            jac = finite_diff_jacobian(f, a, 1e-6)
            upper = max(upper, float(np.max(np.abs(np.triu(jac, 1)))))
            _, diag = flownd.forward_flow(net, a)
            prod = float(np.prod(diag.prod(axis=0)))
            det_err = max(det_err, abs(np.linalg.det(jac) - prod) / abs(prod))
            table = flownd.local_losses(net, a)
            local_err = max(local_err, abs(table.total + math.log(prod)))
    return [result("flownd.upper_entries", "max abs", upper, 1e-8),
            result("flownd.det_vs_diag", "max rel", det_err, 1e-5),
            result("flownd.local_sum", "max abs", local_err, 1e-10)]


def heads_suite(rng) -> list[VerificationResult]:
    from probe import heads
    logits = rng.normal(size=(20, 4))
    labels = rng.integers(0, 4, 20)
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    gap = abs(heads.classifier_loss(logits, labels) - heads.one_hot_cross_entropy(p, np.eye(4)[labels]))
    a = rng.normal(size=(2, 2))
    sigma = a @ a.T + 0.5 * np.eye(2)
    mu, t = rng.normal(size=2), rng.normal(size=2)
    r = t - mu
    dense = math.log(2 * math.pi) + 0.5 * math.log(np.linalg.det(sigma)) \
        + 0.5 * r @ np.linalg.inv(sigma) @ r
    g = heads.gaussian_nll(mu, np.linalg.cholesky(sigma), t)
    return [result("heads.ce_equivalence", "abs", gap, 1e-12),
            result("heads.gaussian_vs_dense", "abs", abs(g - dense), 1e-10)]


def timeevo_suite(rng) -> list[VerificationResult]:
    from probe import timeevo as te
    worst_det = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 7))
        model = te.LinearTimeModel.random(n, rng)
        worst_det = max(worst_det, abs(np.linalg.det(model.propagator()) - 1))
    lin = te.check_linearity(te.LinearTimeModel.random(4, rng), rng)
    nl = te.NonlinearTimeModel.init(2, 1, rng, dt=1e-2)
    a0 = rng.uniform(0.05, 0.95, size=(20, 2))
    traj = te.evolve_nonlinear(nl, a0)
    nll = te.nonlinear_nll(traj)
    dts = np.diff(traj.times)
    local_gap = float(np.max(np.abs((nll.local * dts[None, :, None]).sum(axis=(1, 2))
                                    - nll.continuum)))
    inside = bool(np.all((traj.states > 0) & (traj.states < 1)))
    est, se = te.linear_mc_normalization(te.LinearTimeModel.random(2, rng), 20000, rng)
    return [result("timeevo.unit_det", "max |det-1|", worst_det, 1e-8),
            result("timeevo.linearity", "residual", lin.residual, 1e-9),
            result("timeevo.local_sum", "max abs", local_gap, 1e-12),
            result("timeevo.confined", "states inside", float(inside), 1.0, upper=False),
            result("timeevo.mc_normalization", "|est-1|/se", abs(est - 1) / se, 3.0)]


def mixed_suite(rng) -> list[VerificationResult]:
    from probe.verify.mixed import ProductCDFMixture
    model = ProductCDFMixture.init(4, rng)
    pts = rng.uniform(-2, 2, size=(10, 2))
    gap = max(abs(model.density_dual(p) - model.density(p)[0]) for p in pts)
    return [result("mixed.dual_vs_closed_form", "max abs", gap, 1e-10),
            result("mixed.mass", "|mass-1|", abs(model.mass() - 1), 1e-2)]


SUITES = {"numeric": numeric_suite, "oracles": oracle_suite, "flow1d": flow1d_suite,
          "flownd": flownd_suite, "heads": heads_suite, "timeevo": timeevo_suite,
          "mixed": mixed_suite}


def run_suites(name: str = "all", seed: int = 0) -> list[VerificationResult]:
    names = list(SUITES) if name == "all" else [name]
    out = []
    for s in names:
        if s not in SUITES:
            raise ValueError(f"unknown suite {s!r}; expected 'all' or one of {sorted(SUITES)}")
        out.extend(SUITES[s](np.random.default_rng([seed, len(out)])))
    return out
