from __future__ import annotations

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from churnforge.profiling import ProfilingRules, label_cohort
from churnforge.simulator import Archetype, SimConfig, simulate_cohort
from churnforge.survival import (
    SurvivalSample,
    event_table,
    kaplan_meier,
    km_stratified,
    nelson_aalen,
    to_survival_samples,
    write_km_csv,
)

from conftest import day, make_cohort, make_timeline

RULES = ProfilingRules(login_window=9, purchase_window=50)
Z = 1.959963984540054


def km_oracle(times, events):
    """Product-limit loop with Greenwood log-log limits at each distinct time."""
    out = {}
    s, var = 1.0, 0.0
    for t in sorted(set(times)):
        n = sum(1 for x in times if x >= t)
        d = sum(1 for x, e in zip(times, events) if x == t and e)
        s *= 1 - d / n
        if d and n > d:
            var += d / (n * (n - d))
        if 0 < s < 1 and var > 0:
            se = math.sqrt(var) / abs(math.log(s))
            lo, hi = s ** math.exp(Z * se), s ** math.exp(-Z * se)
        else:
            lo = hi = s
        out[t] = (s, lo, hi, n, d)
    return out


def test_km_hand_values():
    km = kaplan_meier(([1, 2, 3], [True, False, True]))
    assert km.at([0, 1, 2, 2.5, 3, 10]).tolist() == pytest.approx([1, 2 / 3, 2 / 3, 2 / 3, 0, 0], abs=1e-12)
    assert km.t[0] == 0 and km.surv[0] == 1


def test_km_no_censoring_is_empirical():
    km = kaplan_meier(([1, 2, 3], [True, True, True]))
    assert km.at([1, 2, 3]).tolist() == pytest.approx([2 / 3, 1 / 3, 0], abs=1e-12)


def test_km_all_censored():
    km = kaplan_meier(([1, 4, 9], [False] * 3))
    assert (km.surv == 1).all() and (km.ci_low == 1).all() and (km.ci_high == 1).all()


def test_km_ties_events_before_censoring():
    km = kaplan_meier(([2, 2, 2, 5], [True, False, False, True]))
    # all four are at risk at t=2 and the event counts before the censorings
    assert km.at(2) == pytest.approx(3 / 4)
    assert km.n_at_risk[1] == 4
    assert km.at(5) == 0


def test_km_needs_samples():
    with pytest.raises(ValueError):
        kaplan_meier(([], []))


def test_km_accepts_sample_objects():
    samples = [SurvivalSample("a", "lifetime", 1, True), SurvivalSample("b", "lifetime", 2, False)]
    assert kaplan_meier(samples).at(1) == 0.5
    with pytest.raises(ValueError):
        SurvivalSample("a", "lifetime", -1, True)


fixtures = st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=1, max_size=10)


@settings(max_examples=300, deadline=None)
@given(fixtures)
def test_km_matches_product_limit_loop(data):
    times = [float(t) for t, _ in data]
    events = [e for _, e in data]
    km = kaplan_meier((times, events))
    ref = km_oracle(times, events)
    for t, (s, lo, hi, n, d) in ref.items():
        i = int(np.flatnonzero(km.t == t)[0])
        assert km.surv[i] == pytest.approx(s, abs=1e-12)
        assert km.ci_low[i] == pytest.approx(lo, abs=1e-12)
        assert km.ci_high[i] == pytest.approx(hi, abs=1e-12)
        assert (km.n_at_risk[i], km.n_events[i]) == (n, d)
    assert km.at(0.0) == (ref[0.0][0] if 0.0 in ref else 1.0)
    assert (np.diff(km.surv) <= 0).all()
    assert ((km.ci_low <= km.surv + 1e-15) & (km.surv <= km.ci_high + 1e-15)).all()
    assert ((km.ci_low >= 0) & (km.ci_high <= 1)).all()
    # jumps only at event times
    jumps = km.t[1:][np.diff(km.surv) < 0]
    assert set(jumps) <= {t for t, e in zip(times, events) if e}


def test_nelson_aalen_examples():
    na = nelson_aalen(([1, 2, 3], [True, True, False]))
    assert na.at([1, 2, 3]).tolist() == pytest.approx([1 / 3, 5 / 6, 5 / 6], abs=1e-12)
    assert (nelson_aalen(([1, 2], [False, False])).hazard == 0).all()
    assert nelson_aalen(([1], [True])).at(1) == 1.0


@settings(max_examples=100, deadline=None)
@given(fixtures)
def test_km_and_na_share_the_event_table(data):
    times = [float(t) for t, _ in data]
    events = [e for _, e in data]
    km, na = kaplan_meier((times, events)), nelson_aalen((times, events))
    t, n, d = event_table(times, events)
    assert np.array_equal(na.n_at_risk, n) and np.array_equal(na.n_events, d)
    assert np.allclose(km.at(t), np.cumprod(1 - d / n))
    assert np.allclose(na.hazard, np.cumsum(d / n))


@pytest.mark.slow
def test_ci_coverage_on_exponential_replicates():
    rng = np.random.default_rng(2024)
    t_med = math.log(2)
    covered = 0
    for _ in range(1000):
        event_t = rng.exponential(1.0, 100)
        cens_t = rng.exponential(3.0, 100)
        km = kaplan_meier((np.minimum(event_t, cens_t), event_t <= cens_t))
        i = np.searchsorted(km.t, t_med, side="right") - 1
        covered += km.ci_low[i] <= 0.5 <= km.ci_high[i]
    assert 930 <= covered <= 970


# cohort -> samples ----------------------------------------------------


def churner_timeline():
    act = {}
    for d in range(101):
        act[d] = {"playtime": 3600 if d < 55 else 0, "sessions": 1, "levelups": 1 if 1 <= d <= 39 else 0}
    return make_timeline("c", act, 130)


def test_samples_on_three_axes():
    tl = churner_timeline()
    c = make_cohort([tl], 130)
    states = label_cohort(c, RULES)
    got = {axis: to_survival_samples(c, states, axis, "login")[0] for axis in ("lifetime", "level", "playtime")}
    assert [(s.time, s.event) for s in got.values()] == [(100, True), (40, True), (55, True)]


def test_censored_at_cutoff():
    tl = make_timeline("a", list(range(250)), 250)
    c = make_cohort([tl], 250)
    (s,) = to_survival_samples(c, label_cohort(c, RULES), "lifetime", "login", day(200))
    assert (s.time, s.event) == (200, False)


def test_annulled_churn_is_skipped():
    active = [d for d in range(91) if not 51 <= d <= 65]
    tl = make_timeline("a", active, 120)
    c = make_cohort([tl], 120)
    states = label_cohort(c, RULES)
    assert states["a"].episodes[0].kind == "genuine_false_churn"
    (s,) = to_survival_samples(c, states, "lifetime", "login")
    assert (s.time, s.event) == (90, True)


def test_churn_not_yet_detected_is_censored():
    tl = make_timeline("a", [0, 1, 2], 40)
    c = make_cohort([tl], 40)
    states = label_cohort(c, RULES)
    (s,) = to_survival_samples(c, states, "lifetime", "login", day(8))
    assert (s.time, s.event) == (8, False)
    (s,) = to_survival_samples(c, states, "lifetime", "login", day(12))
    assert (s.time, s.event) == (2, True)


def test_purchase_samples_skip_never_paid():
    payer = make_timeline("p", {0: {"purchases": 1, "spend_cents": 100}, 1: {}}, 80)
    c = make_cohort([payer, make_timeline("n", [0, 1], 80)], 80)
    samples = to_survival_samples(c, label_cohort(c, RULES), "lifetime", "purchase")
    assert [(s.player_id, s.time, s.event) for s in samples] == [("p", 0, True)]
    empty = make_cohort([make_timeline("n", [0, 1], 80)], 80)
    with pytest.raises(ValueError):
        to_survival_samples(empty, label_cohort(empty, RULES), "lifetime", "purchase")


def test_samples_argument_checks():
    c = make_cohort([make_timeline("a", [0], 5)], 5)
    states = label_cohort(c, RULES)
    with pytest.raises(ValueError):
        to_survival_samples(c, states, "weeks", "login")
    with pytest.raises(ValueError):
        to_survival_samples(c, states, "lifetime", "login", day(10))


def test_single_stratum_equals_pooled_km():
    tls = [make_timeline(f"p{i}", list(range(i + 1)), 40) for i in range(12)]
    c = make_cohort(tls, 40)
    states = label_cohort(c, RULES)
    curves = km_stratified(c, states, "lifetime", "login")
    assert list(curves) == ["normal"]
    pooled = kaplan_meier(to_survival_samples(c, states, "lifetime", "login"))
    assert np.array_equal(curves["normal"].curve.surv, pooled.surv)
    assert not curves["normal"].low_confidence


def test_pooled_curve_lies_between_disjoint_strata(default_sim):
    cohort, _ = default_sim
    states = label_cohort(cohort, RULES)
    half = lambda st_: "a" if int(st_.player_id[1:]) % 2 else "b"
    curves = km_stratified(cohort, states, "lifetime", "login", strata=half)
    pooled = kaplan_meier(to_survival_samples(cohort, states, "lifetime", "login"))
    grid = np.linspace(0, 500, 501)
    a, b, p = curves["a"].curve.at(grid), curves["b"].curve.at(grid), pooled.at(grid)
    assert (p >= np.minimum(a, b) - 1e-12).all() and (p <= np.maximum(a, b) + 1e-12).all()


def test_planted_zombie_hazard_curve_below_normal():
    normal = Archetype(weight=0.5, churn_hazard=((0, 0.003),))
    zombie = Archetype(weight=0.5, churn_hazard=((0, 0.003),), zombie_prob=0.5, zombie_duration=(400, 500),
                       zombie_hazard_mult=3.0)
    cfg = SimConfig(n_players=2000, archetypes={"normal": normal, "zombie": zombie})
    cohort, truth = simulate_cohort(cfg, seed=5)
    states = label_cohort(cohort, RULES)
    curves = km_stratified(cohort, states, "lifetime", "login", strata=lambda st_: truth.archetype_of(st_.player_id))
    z, n = curves["zombie"].curve, curves["normal"].curve
    t0 = max(z.t[np.cumsum(z.n_events) >= 5][0], n.t[np.cumsum(n.n_events) >= 5][0])
    grid = np.arange(t0, 500)
    assert (z.at(grid) <= n.at(grid)).all()


def test_label_strata_on_default_cohort(default_sim):
    cohort, _ = default_sim
    curves = km_stratified(cohort, label_cohort(cohort, RULES), "lifetime", "login")
    assert list(curves) == ["p_resurrected", "resurrected", "zombie", "normal"]
    assert sum(c.n for c in curves.values()) == len(cohort)


def test_small_stratum_flagged():
    tls = [make_timeline("z", {d: {"playtime": 60} for d in range(40)}, 40)]
    tls += [make_timeline(f"p{i:02d}", list(range(40)), 40) for i in range(11)]
    c = make_cohort(tls, 40)
    curves = km_stratified(c, label_cohort(c, RULES), "lifetime", "login")
    assert curves["zombie"].low_confidence and curves["zombie"].n == 1
    assert not curves["normal"].low_confidence


def test_km_csv_columns():
    buf = io.StringIO()
    write_km_csv(kaplan_meier(([1, 2], [True, False])), buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "t,S,ci_low,ci_high,n_risk,n_event,stratum"
    assert lines[2].startswith("1.0,0.5,") and lines[2].endswith(",2,1,all")
