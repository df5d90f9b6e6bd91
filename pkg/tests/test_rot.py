import numpy as np
import pytest

from otcluster.rot import (
    BracketFailure,
    RotConfig,
    cost_from_predictions,
    objective_value,
    pseudo_labels_from_plan,
    sinkhorn_fixed_marginals,
    solve_rot,
    solve_variant,
    update_beta,
)

from oracles import pgd_rot_oracle, reference_sinkhorn


def random_predictions(rng, n, k, conc=1.2):
    return rng.dirichlet(np.ones(k) * conc, size=n)


# ---------------------------------------------------------------------------
# cost matrix


def test_cost_clamps_hard_zeros():
    c = cost_from_predictions(np.array([[1.0, 0.0]]), 1e-8)
    assert c[0, 0] == 0.0
    assert np.isclose(c[0, 1], -np.log(1e-8))
    assert np.isfinite(c).all()


def test_cost_uniform_rows():
    k = 5
    c = cost_from_predictions(np.full((3, k), 1.0 / k))
    assert np.allclose(c, np.log(k))


def test_cost_inverts_to_probabilities(rng):
    p = random_predictions(rng, 6, 4)
    c = cost_from_predictions(p)
    assert np.allclose(np.exp(-c), np.maximum(p, 1e-8))


# ---------------------------------------------------------------------------
# inner Sinkhorn


def test_sinkhorn_constant_cost_gives_uniform():
    n, k = 6, 3
    q, f, g, ok = sinkhorn_fixed_marginals(
        np.ones((n, k)), np.full(n, 1 / n), np.full(k, 1 / k), 0.05
    )
    assert ok
    assert np.allclose(q, 1.0 / (n * k), atol=1e-9)


def test_sinkhorn_matches_high_precision_reference():
    cost = np.array([[0.0, 1.0], [1.0, 0.0]])
    marg = np.array([0.5, 0.5])
    q, f, g, ok = sinkhorn_fixed_marginals(cost, marg, marg, 0.05, tol=1e-10, max_iter=5000)
    assert ok
    ref = reference_sinkhorn(cost, marg, marg, 0.05, iters=100_000)
    assert np.abs(q - ref).max() < 1e-8
    # off-diagonal mass is exp(-1/lambda1)-suppressed
    assert q[0, 1] / q[0, 0] == pytest.approx(np.exp(-20.0), rel=1e-6)


def test_sinkhorn_random_instance_against_reference(rng):
    p = random_predictions(rng, 7, 4)
    cost = cost_from_predictions(p)
    alpha = np.full(7, 1 / 7)
    beta = rng.dirichlet(np.ones(4) * 3)
    q, f, g, ok = sinkhorn_fixed_marginals(cost, alpha, beta, 0.1, tol=1e-12, max_iter=20000)
    ref = reference_sinkhorn(cost, alpha, beta, 0.1, iters=100_000)
    assert np.abs(q - ref).max() < 1e-9


def test_sinkhorn_postconditions(rng):
    p = random_predictions(rng, 9, 5)
    alpha = np.full(9, 1 / 9)
    beta = rng.dirichlet(np.ones(5))
    q, f, g, ok = sinkhorn_fixed_marginals(
        cost_from_predictions(p), alpha, beta, 0.05, max_iter=100_000
    )
    assert ok
    assert np.abs(q.sum(axis=1) - alpha).max() <= 1e-6
    assert np.abs(q.sum(axis=0) - beta).max() <= 1e-6
    # the scaling form reconstructs Q exactly
    recon = np.exp((f[:, None] + np.log(np.maximum(p, 1e-8)) + g[None, :]) / 0.05)
    assert np.allclose(recon, q, rtol=1e-10)


# ---------------------------------------------------------------------------
# beta update


def test_update_beta_constant_potentials():
    beta, h = update_beta(np.full(4, 2.5), lambda2=1.7, num_classes=4)
    assert np.allclose(beta, 0.25)
    assert h == pytest.approx(2.5 - 1.7, abs=1e-9)


def test_update_beta_two_class_bisection_oracle():
    # root of 1/(0-h) + 1/(1-h) = 1 below min(g): h = -(1+sqrt(5))/2, the
    # golden-ratio point; frozen from the bisection/algebra oracle
    beta, h = update_beta(np.array([0.0, 1.0]), lambda2=2.0, num_classes=2)
    assert h == pytest.approx(-(1 + np.sqrt(5)) / 2, abs=1e-9)
    assert beta == pytest.approx([(np.sqrt(5) - 1) / 2, (3 - np.sqrt(5)) / 2], abs=1e-9)


def test_update_beta_sum_monotone_in_h(rng):
    g = rng.normal(size=6)
    lam2, k = 1.3, 6
    hs = np.sort(g.min() - np.exp(rng.normal(size=8)))
    sums = [(lam2 / (k * (g - h))).sum() for h in hs]
    assert (np.diff(sums) > 0).all()


def test_update_beta_simplex_and_positive(rng):
    for _ in range(25):
        g = rng.normal(size=rng.integers(2, 12)) * rng.uniform(0.1, 30)
        beta, h = update_beta(g, lambda2=float(rng.uniform(0.1, 10)), num_classes=len(g))
        assert (beta > 0).all()
        assert abs(beta.sum() - 1.0) <= 1e-10
        assert h < g.min()


# ---------------------------------------------------------------------------
# full solves


def test_solve_rot_uniform_predictions():
    n, k = 8, 4
    plan, trace = solve_rot(np.full((n, k), 1.0 / k))
    assert np.allclose(plan.q, 1.0 / (n * k), atol=1e-8)
    assert np.allclose(plan.beta, 1.0 / k, atol=1e-8)


def test_solve_rot_kl_limit_recovers_uniform(rng):
    p = random_predictions(rng, 12, 4, conc=0.6)
    cfg = RotConfig(lambda2=1e6)
    plan, _ = solve_rot(p, cfg)
    assert np.abs(plan.beta - 0.25).max() <= 1e-3

    cot, _ = solve_variant(p, RotConfig(variant="cot"))
    assert np.abs(plan.q - cot.q).max() <= 1e-3


def tight_config(lambda2):
    return RotConfig(lambda1=0.05, lambda2=lambda2, outer_iters=100,
                     sinkhorn_iters=30_000, marginal_tol=1e-9, beta_stop=1e-10,
                     progress_stop=1e-10)


def test_solve_rot_spec_instance_matches_pgd_oracle():
    p = np.array([[0.9, 0.1], [0.8, 0.2], [0.2, 0.8]])
    plan, _ = solve_rot(p, tight_config(2.0))
    oracle = pgd_rot_oracle(p, 0.05, 2.0, steps=1_000_000)
    assert np.abs(plan.q - oracle).max() <= 1e-3


def test_solve_rot_marginals_and_simplex(rng):
    p = random_predictions(rng, 40, 7, conc=0.5)
    plan, trace = solve_rot(p)
    assert np.abs(plan.q.sum(axis=1) - plan.alpha).max() <= 1e-6
    assert abs(plan.beta.sum() - 1.0) <= 1e-10
    assert (plan.beta > 0).all()


def test_solve_rot_trace_monotone(rng):
    for _ in range(12):
        n = int(rng.integers(3, 40))
        k = int(rng.integers(2, 8))
        lam2 = float(rng.choice([0.5, 2.0, 7.0]))
        p = random_predictions(rng, n, k, conc=0.7)
        _, trace = solve_rot(p, RotConfig(lambda2=lam2))
        diffs = np.diff(np.array(trace.objective))
        assert (diffs <= 1e-8).all(), diffs


def test_solve_rot_permutation_equivariance(rng):
    p = random_predictions(rng, 10, 5)
    perm = rng.permutation(5)
    cfg = RotConfig()
    plan_a, _ = solve_rot(p, cfg)
    plan_b, _ = solve_rot(p[:, perm], cfg)
    assert np.allclose(plan_a.q[:, perm], plan_b.q, atol=1e-9)
    assert np.allclose(plan_a.beta[perm], plan_b.beta, atol=1e-9)


def test_solve_rot_beta_entropy_monotone_in_lambda2(rng):
    p = random_predictions(rng, 30, 5, conc=0.4)

    def beta_entropy(lam2):
        plan, _ = solve_rot(p, RotConfig(lambda2=lam2))
        return -(plan.beta * np.log(plan.beta)).sum()

    values = [beta_entropy(l2) for l2 in (0.5, 1.0, 2.0, 7.0, 50.0)]
    assert (np.diff(values) >= -1e-9).all(), values


# ---------------------------------------------------------------------------
# variants


def test_cot_columns_uniform(rng):
    p = random_predictions(rng, 12, 4)
    plan, _ = solve_variant(p, RotConfig(variant="cot", sinkhorn_iters=100_000))
    assert np.abs(plan.q.sum(axis=0) - 0.25).max() <= 1e-6


def test_mot_momentum_one_keeps_initial_beta(rng):
    p = random_predictions(rng, 10, 4)
    plan, trace = solve_variant(p, RotConfig(variant="mot", mot_momentum=1.0))
    for beta in trace.betas:
        assert np.allclose(beta, 0.25)


def test_mot_momentum_zero_tracks_argmax_histogram():
    p = np.array([[0.9, 0.1], [0.8, 0.2], [0.7, 0.3], [0.1, 0.9]])
    cfg = RotConfig(variant="mot", mot_momentum=0.0, outer_iters=1)
    plan, _ = solve_variant(p, cfg)
    assert np.allclose(plan.beta, [0.75, 0.25])


def test_eot_pulls_beta_toward_uniform(rng):
    p = random_predictions(rng, 20, 4, conc=0.4)
    weak, _ = solve_variant(p, RotConfig(variant="eot", lambda2=0.1))
    strong, _ = solve_variant(p, RotConfig(variant="eot", lambda2=100.0))
    assert np.abs(strong.beta - 0.25).max() < np.abs(weak.beta - 0.25).max()
    assert np.abs(strong.beta - 0.25).max() < 1e-3


# ---------------------------------------------------------------------------
# pseudo-labels and objective


def test_pseudo_labels_uniform_plan():
    n, k = 6, 3
    plan, _ = solve_rot(np.full((n, k), 1.0 / k))
    pseudo = pseudo_labels_from_plan(plan)
    assert np.allclose(pseudo.soft, 1.0 / k, atol=1e-8)
    assert np.allclose(pseudo.confidence, 1.0 / k, atol=1e-8)
    assert not pseudo.clean.any()


def test_pseudo_labels_hard_from_one_hot_row():
    plan, _ = solve_rot(np.array([[0.999, 0.001], [0.999, 0.001], [0.001, 0.999]]),
                        RotConfig(lambda2=50.0))
    pseudo = pseudo_labels_from_plan(plan)
    assert pseudo.hard[0] == 0 and pseudo.hard[2] == 1
    assert np.abs(pseudo.soft.sum(axis=1) - 1.0).max() <= 1e-9


def test_pseudo_label_rows_sum_to_one(rng):
    p = random_predictions(rng, 25, 6)
    plan, _ = solve_rot(p)
    pseudo = pseudo_labels_from_plan(plan)
    assert np.abs(pseudo.soft.sum(axis=1) - 1.0).max() <= 1e-9


def test_objective_closed_form_uniform():
    n, k, c = 4, 3, 2.0
    cfg = RotConfig(lambda1=0.05, lambda2=2.0)
    q = np.full((n, k), 1.0 / (n * k))
    value = objective_value(q, np.full((n, k), c), np.full(k, 1.0 / k), cfg)
    assert value == pytest.approx(c - 0.05 * np.log(n * k), abs=1e-12)


def test_objective_zero_kl_at_uniform_beta(rng):
    p = random_predictions(rng, 5, 3)
    cfg = RotConfig()
    q = p / p.sum()
    base = objective_value(q, cost_from_predictions(p), np.full(3, 1 / 3), cfg)
    no_kl = objective_value(q, cost_from_predictions(p), np.full(3, 1 / 3),
                            RotConfig(lambda2=123.0))
    assert base == pytest.approx(no_kl, abs=1e-12)


def test_objective_matches_naive_double_loop(rng):
    q = rng.uniform(0.01, 1.0, size=(5, 3))
    q /= q.sum()
    cost = rng.uniform(0, 3, size=(5, 3))
    beta = rng.dirichlet(np.ones(3))
    cfg = RotConfig(lambda1=0.31, lambda2=1.7)

    naive = 0.0
    for i in range(5):
        for j in range(3):
            naive += q[i, j] * cost[i, j] + 0.31 * q[i, j] * np.log(q[i, j])
    for j in range(3):
        naive += 1.7 * (1 / 3) * (np.log(1 / 3) - np.log(beta[j]))
    assert objective_value(q, cost, beta, cfg) == pytest.approx(naive, abs=1e-12)
