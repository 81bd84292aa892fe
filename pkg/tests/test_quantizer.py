import json

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy import stats

from gskring import consensus as cons
from gskring.experiments import ExperimentConfig, design_pmf, node_samples, simulate_cell
from gskring.quantizer import (
    ERASURE,
    InfeasibleDesignError,
    JointDistribution,
    MultiLevelQuantizer,
    baseline_marginal_maxent,
    baseline_max_lloyd,
    baseline_uniform,
    bivariate_gaussian,
    conditional_entropy,
    consensus_probability,
    csr_gaussian_pair,
    design_for_target,
    em_em,
    entropy_block,
    error_block,
    evaluate,
    excursion_metrics,
    init_block,
    lloyd_max,
    metrics,
    mismatch_mass,
    refining_block,
    search_eta_star,
    symbol_error_rate,
)

from oracles import excursion_oracle, lloyd_max_gaussian, metric_oracle

INF = np.inf


def Q1(lo_edge, hi_edge):
    """b = 1 quantizer with guard band (lo_edge, hi_edge]."""
    return MultiLevelQuantizer(1, [-INF, hi_edge], [lo_edge, INF], [lo_edge - 1, hi_edge + 1])


def diagonal(n=8):
    s = np.arange(n, dtype=float)
    return JointDistribution(s, s, np.eye(n) / n)


def independent(n=4):
    s = np.arange(n, dtype=float)
    return JointDistribution(s, s, np.full((n, n), 1.0 / n**2))


def random_pmf(rng, nx, ny):
    xs = np.sort(rng.choice(np.linspace(-3, 3, 400), nx, replace=False))
    ys = np.sort(rng.choice(np.linspace(-3, 3, 400), ny, replace=False))
    m = rng.random((nx, ny)) ** 3
    return JointDistribution(xs, ys, m / m.sum())


def random_quantizer(rng, b, lo=-3.2, hi=3.2):
    K = 2**b
    cuts = np.sort(rng.uniform(lo, hi, 2 * (K - 1)))
    lower = np.concatenate(([-INF], cuts[1::2]))
    upper = np.concatenate((cuts[0::2], [INF]))
    reps = np.empty(K)
    for j in range(K):
        a = lower[j] if np.isfinite(lower[j]) else upper[j] - 1
        c = upper[j] if np.isfinite(upper[j]) else lower[j] + 1
        reps[j] = c if np.isfinite(c) else a + 1
    return MultiLevelQuantizer(b, lower, upper, reps)


# ------------------------------------------------------------- structure


def test_evaluate_examples():
    Q = Q1(-0.1, 0.1)
    assert evaluate(Q, 0.0) == ERASURE
    assert evaluate(Q, -0.1) == 0  # upper edge belongs to the cell
    assert evaluate(Q, 0.1) == ERASURE  # guard is (-0.1, 0.1]
    assert evaluate(Q, 1e-9 + 0.1) == 1
    assert evaluate(Q, -1e9) == 0
    np.testing.assert_array_equal(Q([-1, 0, 1]), [0, ERASURE, 1])


def test_definition_invariants_enforced():
    with pytest.raises(ValueError):
        MultiLevelQuantizer(1, [-INF, 0.0], [0.5, INF], [0.0, 1.0])  # overlap
    with pytest.raises(ValueError):
        MultiLevelQuantizer(1, [-5.0, 0.0], [0.0, INF], [-1.0, 1.0])  # bounded outer cell
    with pytest.raises(ValueError):
        MultiLevelQuantizer(1, [-INF, 0.0], [0.0, INF], [-1.0, -2.0])  # representative outside
    with pytest.raises(ValueError):
        MultiLevelQuantizer(2, [-INF, 0.0], [0.0, INF], [-1.0, 1.0])  # wrong cell count


def test_quantizer_json_roundtrip(tmp_path):
    Q = init_block(csr_gaussian_pair(20, bins=64), 2)
    Q.save(tmp_path / "q.json", eta=1e-3, e=2)
    doc = json.loads((tmp_path / "q.json").read_text())
    assert set(doc) == {"b", "pairs", "representatives", "eta", "e"}
    back = MultiLevelQuantizer.load(tmp_path / "q.json")
    np.testing.assert_array_equal(back.lower, Q.lower)
    assert back.content_hash() == Q.content_hash()
    assert len(Q.content_hash()) == 40


def test_joint_distribution_validation_and_csv(tmp_path):
    with pytest.raises(ValueError):
        JointDistribution([0, 1], [0, 1], [[0.5, 0.5], [0.5, 0.5]])
    with pytest.raises(ValueError):
        JointDistribution([1, 0], [0, 1], [[0.25, 0.25], [0.25, 0.25]])
    P = bivariate_gaussian(1.0, 0.8, bins=16)
    P.to_csv(tmp_path / "p.csv")
    back = JointDistribution.from_csv(tmp_path / "p.csv")
    np.testing.assert_allclose(back.mass, P.mass, atol=1e-15)
    assert back.kind == "histogram"


def test_from_samples_exact_pmf():
    x = np.array([0.0, 1.0, 1.0, 2.0])
    P = JointDistribution.from_samples(x, x[::-1], support=[0.0, 1.0, 2.0])
    np.testing.assert_allclose(P.mass, [[0, 0, 0.25], [0, 0.5, 0], [0.25, 0, 0]])
    with pytest.raises(ValueError):
        JointDistribution.from_samples(x, x, support=[0.0, 1.0])


# --------------------------------------------------------------- metrics


def test_pc_examples():
    P = diagonal()
    Q = MultiLevelQuantizer(1, [-INF, 3.5], [3.5, INF], [0.0, 7.0])
    assert consensus_probability(Q, P) == pytest.approx(1.0)
    one = JointDistribution([0.0, 1.0], [0.0, 1.0], [[1.0, 0.0], [0.0, 0.0]])
    assert consensus_probability(Q1(0.5, 0.7), one) == pytest.approx(1.0)
    sq = JointDistribution([-1.0, 1.0], [-1.0, 1.0], np.full((2, 2), 0.25))
    assert consensus_probability(Q1(-0.5, 0.5), sq) == pytest.approx(1.0)


def test_entropy_and_mismatch_examples():
    P = csr_gaussian_pair(20, bins=128)
    Q = Q1(-0.05, 0.05)
    assert conditional_entropy(Q, P) == pytest.approx(1.0, abs=1e-12)
    one_row = JointDistribution([0.0, 1.0], [0.0, 1.0], [[0.5, 0.5], [0.0, 0.0]])
    assert conditional_entropy(Q1(0.5, 0.6), one_row) == pytest.approx(0.0)
    assert mismatch_mass(Q1(3.5, 3.6), diagonal()) == 0.0
    two = independent(2)
    assert mismatch_mass(Q1(0.5, 0.5 + 1e-9), two) == pytest.approx(0.5)
    assert symbol_error_rate(Q1(0.5, 0.5 + 1e-9), two) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        conditional_entropy(Q1(-10, 10), JointDistribution([0.0], [0.0], [[1.0]]))


def test_metrics_match_oracle_random_8x8():
    rng = np.random.default_rng(101)
    for _ in range(100):
        P = random_pmf(rng, 8, 8)
        Q = random_quantizer(rng, int(rng.integers(1, 3)))
        got, ref = metrics(Q, P), metric_oracle(Q, P)
        assert got.p_cm == pytest.approx(ref["p_cm"], abs=1e-12)
        assert got.p_c == pytest.approx(ref["p_c"], abs=1e-12)


def test_metrics_match_oracle_gaussian_rho099():
    P = bivariate_gaussian(1.0, 0.99, bins=96)
    Q = MultiLevelQuantizer(2, [-INF, -0.6, 0.05, 0.7], [-0.7, -0.05, 0.6, INF], [-1.2, -0.3, 0.3, 1.2])
    got, ref = metrics(Q, P), metric_oracle(Q, P)
    assert got.conditional_entropy == pytest.approx(ref["H"], abs=1e-12)
    np.testing.assert_allclose(got.g, ref["g"], atol=1e-12)
    np.testing.assert_allclose(got.delta, ref["delta"], atol=1e-12)


@pytest.mark.parametrize("e", [1, 2, 3, 5])
def test_excursion_metrics_match_oracle(e):
    P = csr_gaussian_pair(15, bins=64)
    Q = MultiLevelQuantizer(1, [-INF, 0.1], [-0.1, INF], [-0.5, 0.5])
    pc, ser, _ = excursion_metrics(Q, P, e)
    rpc, rser = excursion_oracle(Q, P, e)
    assert pc == pytest.approx(rpc, abs=1e-14)
    assert ser == pytest.approx(rser, abs=1e-12)


# ---------------------------------------------------------------- blocks


def test_init_block_gaussian_median_and_quartiles():
    P = bivariate_gaussian(1.0, 0.9)
    width = P.x_support[1] - P.x_support[0]
    Q = init_block(P, 1)
    assert abs(Q.upper[0]) <= width and np.all(Q.guard_widths == 0)
    Q2 = init_block(P, 2)
    np.testing.assert_allclose(Q2.upper[:-1], stats.norm.ppf([0.25, 0.5, 0.75]), atol=width)


def test_init_block_discrete_uniform_levels():
    Q = init_block(diagonal(8), 2)
    counts = np.bincount(Q(np.arange(8.0)), minlength=4)
    np.testing.assert_array_equal(counts, [2, 2, 2, 2])


def test_error_block_leaves_satisfied_quantizer():
    P = diagonal()
    Q = init_block(P, 2)
    assert error_block(Q, P, 2, 1e-3) is Q
    P2 = csr_gaussian_pair(20, bins=128)
    Qw = Q1(-0.4, 0.4)
    assert error_block(Qw, P2, 1, 1e-3) is Qw


def test_error_block_meets_bound_rho09():
    P = bivariate_gaussian(1.0, 0.9, bins=256)
    Q = error_block(init_block(P, 1), P, 1, 1e-3)
    assert metric_oracle(Q, P)["delta"][0] <= 1e-3 + 1e-15


def test_error_block_unreachable_raises():
    P = independent(4)
    with pytest.raises(InfeasibleDesignError):
        error_block(init_block(P, 1), P, 1, 1e-6)


def test_entropy_block_balanced_unchanged():
    P = diagonal()
    Q = init_block(P, 1)
    assert entropy_block(Q, P, 1) is Q


def test_entropy_block_recentres_guard():
    P = bivariate_gaussian(1.0, 0.95, bins=256)
    grid_w = P.x_support[1] - P.x_support[0]
    Q = Q1(0.4, 0.6)
    out = entropy_block(Q, P, 1)
    assert out.guard_widths[0] == pytest.approx(0.2, abs=grid_w)
    centre = 0.5 * (out.upper[0] + out.lower[1])
    assert abs(centre) <= 2 * grid_w
    g = metrics(out, P).g_tilde[0]
    # a one-step move either way cannot get closer to 1/2
    for shift in (-grid_w, grid_w):
        moved = MultiLevelQuantizer(1, out.lower, out.upper + [shift, 0], out.representatives + [shift, 0])
        moved = MultiLevelQuantizer(1, [-INF, out.lower[1] + shift], [out.upper[0] + shift, INF], out.representatives)
        assert abs(metrics(moved, P).g_tilde[0] - 0.5) >= abs(g - 0.5) - 1e-12


def test_refining_block_examples():
    P = diagonal()
    Q = init_block(P, 1)
    assert refining_block(Q, P) is Q
    s = np.arange(7, dtype=float)
    P = JointDistribution(s, s, np.diag([0.1, 0.1, 0.1, 0.25, 0.25, 0.1, 0.1]))
    Q = MultiLevelQuantizer(1, [-INF, 4.5], [2.5, INF], [1.0, 5.5])
    out = refining_block(Q, P)
    alpha = metrics(out, P).alpha
    assert alpha[0] == pytest.approx(0.2)
    assert alpha.max() - alpha.min() <= 0.1 + 1e-12


def test_refining_never_increases_mismatch():
    rng = np.random.default_rng(5)
    checked = 0
    for _ in range(30):
        P = bivariate_gaussian(1.0, rng.uniform(0.8, 0.99), bins=64)
        b = int(rng.integers(1, 3))
        try:
            Q = error_block(init_block(P, b), P, b, 1e-2)
            out = refining_block(Q, P)
        except InfeasibleDesignError:
            continue  # guard or cell ran out of room; documented failure mode
        checked += 1
        assert mismatch_mass(out, P) <= mismatch_mass(Q, P) + 1e-15
        assert np.all(out.guard_widths >= Q.guard_widths - 1e-12)
    assert checked >= 10


# ---------------------------------------------------------------- EM-EM


@pytest.mark.parametrize("b", [1, 2, 3])
def test_em_em_noiseless(b):
    P = diagonal(16)
    r = em_em(P, b, 1e-3)
    assert r.converged and r.feasible
    assert np.all(r.quantizer.guard_widths == 0)
    assert r.conditional_entropy_bits == pytest.approx(b)
    assert r.ser == 0


def test_em_em_gaussian_20db_b2():
    P = csr_gaussian_pair(20)
    eta = 1e-3 * em_em(P, 2, 1e-3).p_c
    r = em_em(P, 2, eta)
    assert r.converged
    assert abs(r.conditional_entropy_bits - 2.0) <= 0.02
    assert r.ser <= 1e-3
    assert r.ser == pytest.approx(r.p_cm / r.p_c)


def test_baselines_fall_short_of_b_bits():
    P = csr_gaussian_pair(20)
    for f in (baseline_uniform, baseline_max_lloyd, baseline_marginal_maxent):
        assert f(P, 2).conditional_entropy_bits < 2.0


def test_search_eta_star_examples():
    P = diagonal()
    eta, r = search_eta_star(P, 1, [1e-4, 1e-3, 1e-2])
    assert eta == 1e-4 and r.ser == 0
    eta, _ = search_eta_star(P, 1, [3e-3])
    assert eta == 3e-3


def test_search_eta_star_is_grid_minimum():
    P = csr_gaussian_pair(12, bins=128)
    grid = np.logspace(-4, -1, 8)
    designs = [em_em(P, 2, float(e)) for e in grid]
    _, best = search_eta_star(P, 2, grid)
    assert best.ser <= min(d.ser for d in designs if np.isfinite(d.ser)) + 1e-15


def test_design_for_target_diagonal():
    r = design_for_target(diagonal(), 1, 1e-2)
    assert r.feasible and r.excursion_e == 1


def test_design_for_target_two_points_single_sample():
    # two support points leave no room for guards, so EM-EM never settles;
    # the design is still exact on P and meets the target at e = 1
    P = JointDistribution([-1.0, 1.0], [-1.0, 1.0], [[0.485, 0.015], [0.015, 0.485]])
    r = design_for_target(P, 1, 0.05, selection="max-rate")
    assert r.feasible and r.excursion_e == 1
    assert r.ser == pytest.approx(0.03)
    assert r.key_rate == pytest.approx(1.0)


def test_design_for_target_independent_infeasible():
    r = design_for_target(independent(4), 1, 1e-2, e_max=6)
    assert not r.feasible
    assert r.key_rate == 0.0


def test_design_for_target_too_few_points():
    P = JointDistribution.from_samples([0.0, 1.0], [0.0, 1.0])
    r = design_for_target(P, 2, 1e-2)
    assert not r.feasible and r.quantizer is None


def test_design_for_target_asqgsk_10db():
    cfg = ExperimentConfig(blocks=100000, seed=3)
    triple, A, _ = simulate_cell(cfg, 10.0, 4)
    s = node_samples(triple)
    r = design_for_target(design_pmf(s, "23", A.levels), 1, 1e-2)
    assert r.feasible and r.excursion_e >= 1
    g = cons.group_consensus(*s, r.quantizer, r.excursion_e)
    assert g.mismatch <= 1e-2


def test_max_rate_selection_not_worse_than_min_ser():
    P = csr_gaussian_pair(15)
    a = design_for_target(P, 1, 1e-3, selection="min-ser")
    b = design_for_target(P, 1, 1e-3, selection="max-rate")
    assert b.feasible and b.key_rate >= a.key_rate - 1e-15


def test_min_key_length_rule():
    P = csr_gaussian_pair(15)
    r = design_for_target(P, 1, 1e-3, selection="max-rate", n_samples=20000)
    if r.feasible:
        e = r.excursion_e
        pc = r.excursion_p_c if e > 1 else r.p_c
        assert 20000 * pc / e >= 10 / 1e-3


# -------------------------------------------------------------- baselines


def test_lloyd_max_gaussian_4_levels():
    ref = lloyd_max_gaussian(4)
    np.testing.assert_allclose(np.abs(ref), [1.510, 0.4528, 0.4528, 1.510], atol=1e-3)
    # discrete Lloyd stalls once threshold updates fall below the grid
    # spacing, so the grid must be much finer than the tolerance
    x = np.linspace(-8, 8, 40001)
    w = stats.norm.pdf(x)
    reps, _ = lloyd_max(x, w / w.sum(), 4)
    np.testing.assert_allclose(reps, ref, atol=1e-3)


def test_two_point_baselines_coincide():
    P = JointDistribution([-1.0, 1.0], [-1.0, 1.0], [[0.45, 0.05], [0.05, 0.45]])
    cuts = set()
    for f in (baseline_uniform, baseline_max_lloyd, baseline_marginal_maxent):
        cuts.add(f(P, 1, target_ser=0.5).quantizer.upper[0])
    cuts.add(em_em(P, 1, 0.5).quantizer.upper[0])
    assert cuts == {0.0}


def test_uniform_baseline_higher_pc_lower_entropy():
    P = csr_gaussian_pair(20)
    em = design_for_target(P, 2, 1e-3, e_max=1)
    uni = baseline_uniform(P, 2, target_ser=1e-3)
    assert uni.p_c >= em.p_c
    assert uni.conditional_entropy_bits < 2.0


# ------------------------------------------------------ property tests


@st.composite
def gaussian_and_quantizer(draw):
    rho = draw(st.floats(0.5, 0.995))
    b = draw(st.integers(1, 2))
    seed = draw(st.integers(0, 2**32 - 1))
    P = bivariate_gaussian(1.0, rho, bins=48)
    Q = random_quantizer(np.random.default_rng(seed), b, -2.5, 2.5)
    i = draw(st.integers(0, 2**b - 2))
    step = draw(st.floats(0.01, 0.5))
    return P, Q, i, step


def widen(Q, i, step):
    lower, upper = Q.lower.copy(), Q.upper.copy()
    upper[i] -= step
    lower[i + 1] += step
    if upper[i] <= lower[i] or lower[i + 1] >= upper[i + 1]:
        return None
    reps = np.clip(Q.representatives, np.nextafter(lower, INF), upper)
    return MultiLevelQuantizer(Q.b, lower, upper, reps)


def translate(Q, j, step):
    lower, upper = Q.lower.copy(), Q.upper.copy()
    upper[j] += step
    lower[j + 1] += step
    if upper[j] <= lower[j] or lower[j + 1] >= upper[j + 1]:
        return None
    reps = np.clip(Q.representatives, np.nextafter(lower, INF), upper)
    return MultiLevelQuantizer(Q.b, lower, upper, reps)


@settings(max_examples=200, deadline=None)
@given(gaussian_and_quantizer())
def test_widening_never_increases_delta(case):
    P, Q, i, step = case
    W = widen(Q, i, step)
    assume(W is not None)
    assert metrics(W, P).delta[i] <= metrics(Q, P).delta[i] + 1e-15


@settings(max_examples=200, deadline=None)
@given(gaussian_and_quantizer(), st.booleans())
def test_translation_monotone_in_g_tilde(case, right):
    P, Q, j, step = case
    T = translate(Q, j, step if right else -step)
    assume(T is not None)
    before, after = metrics(Q, P).g_tilde[j], metrics(T, P).g_tilde[j]
    assume(np.isfinite(before) and np.isfinite(after))
    if right:
        assert after >= before - 1e-15
    else:
        assert after <= before + 1e-15


@settings(max_examples=40, deadline=None)
@given(st.floats(0.8, 0.999), st.integers(1, 3), st.sampled_from([1e-4, 1e-3, 1e-2]))
def test_em_em_output_is_valid_quantizer(rho, b, eta):
    P = bivariate_gaussian(1.0, rho, bins=64)
    r = em_em(P, b, eta)
    Q = r.quantizer
    assert Q.lower[0] == -INF and Q.upper[-1] == INF
    assert np.all(Q.lower < Q.upper) and np.all(Q.upper[:-1] <= Q.lower[1:])
    if r.feasible:
        assert r.p_cm <= eta * (1 + 1e-9)
