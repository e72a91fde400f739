from __future__ import annotations

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from churnforge.events import activity_gaps
from churnforge.profiling import (
    ProfilingRules,
    label_cohort,
    label_states,
    segment_cohort,
    stratum_of,
    write_episodes,
    write_states,
)

from conftest import day, make_cohort, make_timeline

RULES = ProfilingRules(login_window=9, purchase_window=50)


def oracle(tl, rules):
    """Literal day loop over the rules; returns (login, engagement, purchase, labels)."""
    n = tl.n_days
    d = tl.daily
    login = []
    last = None
    for i in range(n):
        if d.active[i]:
            last = i
        login.append(i - last > rules.login_window)
    # annul resolved gaps shorter than the resurrection threshold
    labels = {}
    i = 0
    while i < n:
        if not d.active[i]:
            j = i
            while j < n and not d.active[j]:
                j += 1
            gap = j - i
            if j < n and gap > rules.login_window:
                if gap < rules.resurrect_min_gap:
                    for k in range(i, j):
                        login[k] = False
                else:
                    labels.setdefault("resurrected", j)
            i = j
        else:
            i += 1
    paid = [i for i in range(n) if d.paid[i]]
    purchase = []
    for i in range(n):
        before = [p for p in paid if p <= i]
        if not before:
            purchase.append("never-paid")
        else:
            purchase.append("purchase-churned" if i - before[-1] > rules.purchase_window else "paying-active")
    for a, b in zip(paid, paid[1:]):
        if b - a - 1 > rules.purchase_window:
            labels.setdefault("p_resurrected", b)
            break
    lb = rules.zombie_lookback
    engagement = []
    for i in range(n):
        lo = i - lb + 1
        ok = (
            lo >= 0
            and not login[i]
            and d.playtime[lo : i + 1].sum() < rules.zombie_max_playtime
            and d.levelups[lo : i + 1].sum() <= rules.zombie_max_levelups
            and d.purchases[lo : i + 1].sum() <= rules.zombie_max_purchases
            and not any(login[lo : i + 1])
        )
        engagement.append(ok)
        if ok:
            labels.setdefault("zombie", i)
    return login, engagement, purchase, labels


def test_fully_engaged_player_is_normal():
    act = {d: {"playtime": 7200, "levelups": 1, "purchases": 1, "spend_cents": 99} for d in range(60)}
    st_ = label_states(make_timeline("a", act, 60), RULES)
    assert not st_.login.any() and not st_.engagement.any()
    assert st_.episodes == () and st_.ever_labels == frozenset()


def test_35_day_gap_is_a_resurrection():
    tl = make_timeline("a", [0, 36, 37], 40)
    st_ = label_states(tl, RULES)
    (ep,) = st_.episodes
    assert (ep.kind, ep.start, ep.end, ep.gap_length) == ("resurrection", day(0), day(36), 35)
    assert ep.detected == day(10)
    assert list(np.flatnonzero(st_.login)) == list(range(10, 36))
    assert st_.ever_label_dates == {"resurrected": day(36)}
    assert st_.labels_as_of(day(35)) == frozenset()
    assert st_.labels_as_of(day(36)) == {"resurrected"}


def test_15_day_gap_is_annulled():
    tl = make_timeline("a", [0, 16, 17], 20)
    st_ = label_states(tl, RULES)
    (ep,) = st_.episodes
    assert (ep.kind, ep.gap_length) == ("genuine_false_churn", 15)
    assert not st_.login.any()
    assert "resurrected" not in st_.ever_labels


def test_open_gap_stays_churned():
    st_ = label_states(make_timeline("a", [0, 1], 30), RULES)
    (ep,) = st_.episodes
    assert ep.kind == "churn" and ep.end is None and ep.gap_length == 28
    assert st_.states_on(day(11)) == ("churned", "normal", "never-paid")
    assert st_.states_on(day(10)) == ("active", "normal", "never-paid")


def test_churn_flips_the_day_after_window():
    st_ = label_states(make_timeline("a", [0], 12), ProfilingRules(login_window=3, purchase_window=50))
    assert list(st_.login) == [0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1]


def test_multiple_resurrections_each_recorded():
    st_ = label_states(make_timeline("a", [0, 40, 80], 95), RULES)
    assert [e.kind for e in st_.episodes] == ["resurrection", "resurrection", "churn"]
    assert st_.ever_label_dates["resurrected"] == day(40)


def test_purchase_resurrection_has_no_minimum_gap():
    act = {d: {} for d in range(0, 120, 3)}
    act[0] = act[60] = {"purchases": 1, "spend_cents": 100}
    st_ = label_states(make_timeline("a", act, 120), RULES)
    kinds = [e.kind for e in st_.episodes]
    assert kinds == ["purchase_resurrection", "purchase_churn"]
    assert st_.ever_label_dates == {"p_resurrected": day(60)}
    assert st_.states_on(day(51))[2] == "purchase-churned"
    assert st_.states_on(day(50))[2] == "paying-active"


def test_optional_purchase_minimum_gap():
    act = {d: {} for d in range(0, 120, 3)}
    act[0] = act[60] = {"purchases": 1, "spend_cents": 100}
    rules = ProfilingRules(login_window=9, purchase_window=50, purchase_resurrect_min_gap=70)
    st_ = label_states(make_timeline("a", act, 120), rules)
    assert st_.episodes[0].kind == "genuine_false_purchase_churn"
    assert "p_resurrected" not in st_.ever_labels
    assert st_.states_on(day(55))[2] == "paying-active"


def test_never_paid():
    st_ = label_states(make_timeline("a", list(range(30)), 30), RULES)
    assert set(st_.purchase.tolist()) == {2}


def test_zombie_needs_full_lookback_and_low_engagement():
    # 5 minutes a day, no level-ups or purchases
    act = {d: {"playtime": 300} for d in range(60)}
    st_ = label_states(make_timeline("a", act, 60), RULES)
    assert np.flatnonzero(st_.engagement)[0] == 29
    assert st_.ever_label_dates["zombie"] == day(29)
    busy = {d: {"playtime": 600} for d in range(60)}
    assert not label_states(make_timeline("b", busy, 60), RULES).engagement.any()


def test_zombie_window_includes_current_day():
    act = {d: {"playtime": 60} for d in range(40)}
    act[35] = {"playtime": 60, "levelups": 1}
    st_ = label_states(make_timeline("a", act, 40), RULES)
    assert st_.engagement[34] and not st_.engagement[35]


def test_rules_validation():
    with pytest.raises(ValueError):
        ProfilingRules(login_window=30, resurrect_min_gap=30)
    with pytest.raises(KeyError):
        ProfilingRules.from_dict({"login_windw": 3})
    assert ProfilingRules.from_dict(RULES.to_dict()) == RULES


def test_segment_single_active_player():
    c = make_cohort([make_timeline("a", list(range(30)), 30)], 30)
    rep = segment_cohort(c, RULES, day(29))
    assert rep.fractions["churned"] == 0 and rep.fractions["normal"] == 1.0


def test_segment_single_resurrected_player():
    c = make_cohort([make_timeline("a", [0, 41, 42, 43], 45)], 45)
    rep = segment_cohort(c, RULES, day(44))
    assert rep.fractions["ever_resurrected"] == 1.0 and rep.counts["normal"] == 0
    # before the return only the ongoing churn is known
    early = segment_cohort(c, RULES, day(30))
    assert early.counts["churned"] == 1 and early.counts["ever_resurrected"] == 0


def test_segment_as_of_bounds():
    c = make_cohort([make_timeline("a", [0], 10)], 10)
    with pytest.raises(ValueError):
        segment_cohort(c, RULES, day(20))


def test_stratum_priority():
    assert stratum_of({"zombie", "resurrected", "p_resurrected"}) == "p_resurrected"
    assert stratum_of({"zombie", "resurrected"}) == "resurrected"
    assert stratum_of({"zombie"}) == "zombie"
    assert stratum_of(()) == "normal"


def test_state_and_episode_csv():
    c = make_cohort([make_timeline("a", [0, 16], 20), make_timeline("b", [0], 20)], 20)
    states = label_cohort(c, RULES)
    buf = io.StringIO()
    write_states(states, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "player_id,date,login_state,engagement_state,purchase_state"
    assert len(lines) == 1 + 40
    buf = io.StringIO()
    write_episodes(states, buf)
    assert buf.getvalue().splitlines()[1:] == [
        "a,genuine_false_churn,2020-01-01,2020-01-17,15",
        "b,churn,2020-01-01,,19",
    ]


small_rules = ProfilingRules(login_window=3, purchase_window=5, resurrect_min_gap=8, zombie_lookback=5,
                             zombie_max_playtime=200)

day_strategy = st.fixed_dictionaries({
    "playtime": st.sampled_from([0, 0, 30, 60, 500]),
    "levelups": st.sampled_from([0, 0, 0, 1]),
    "purchases": st.sampled_from([0, 0, 0, 1]),
})


def timeline_from(days, pid="h"):
    act = {0: {}}
    for i, f in enumerate(days):
        if f["playtime"] or f["purchases"]:
            act[i] = {"playtime": f["playtime"], "sessions": 1, "levelups": f["levelups"],
                      "purchases": f["purchases"], "spend_cents": 100 * f["purchases"]}
    return make_timeline(pid, act, len(days))


@settings(max_examples=200, deadline=None)
@given(st.lists(day_strategy, min_size=1, max_size=90))
def test_label_states_matches_day_loop(days):
    tl = timeline_from(days)
    st_ = label_states(tl, small_rules)
    login, engagement, purchase, labels = oracle(tl, small_rules)
    assert st_.login.astype(bool).tolist() == login
    assert st_.engagement.astype(bool).tolist() == engagement
    assert [st_.states_on(day(i))[2] for i in range(len(days))] == purchase
    assert {k: (v - tl.first_login).days for k, v in st_.ever_label_dates.items()} == labels
    assert label_states(tl, small_rules) == st_


@settings(max_examples=100, deadline=None)
@given(st.lists(day_strategy, min_size=2, max_size=90), st.integers(0, 89))
def test_labels_as_of_never_use_the_future(days, cut):
    tl = timeline_from(days)
    cut = day(min(cut, len(days) - 1))
    full = label_states(tl, small_rules)
    known = label_states(tl.truncate(cut), small_rules)
    as_of = full.labels_as_of(cut)
    # annulment can only turn churned days into active ones, which can only add zombie days
    assert known.ever_labels <= as_of
    assert known.ever_labels - {"zombie"} == as_of - {"zombie"}


def check_partition(tl, st_, rules):
    n = tl.n_days
    assert len(st_.login) == len(st_.engagement) == len(st_.purchase) == n
    assert set(np.unique(st_.login)) <= {0, 1}
    assert set(np.unique(st_.engagement)) <= {0, 1}
    assert set(np.unique(st_.purchase)) <= {0, 1, 2}
    # zombie implies active
    assert not (st_.engagement.astype(bool) & st_.login.astype(bool)).any()
    # no resolved gap shorter than the resurrection threshold is left churned
    for g in activity_gaps(tl):
        s = g.start.toordinal() - tl.start
        if g.resolved and g.length < rules.resurrect_min_gap:
            assert not st_.login[s : s + g.length].any()
    # login churners are purchase churners once the purchase gap is long enough
    paid = tl.daily.paid
    if paid.any():
        last_paid = np.maximum.accumulate(np.where(paid, np.arange(n), -1))
        since = np.arange(n) - last_paid
        late = st_.login.astype(bool) & (since > rules.purchase_window) & (last_paid >= 0)
        assert (st_.purchase[late] == 1).all()


@settings(max_examples=100, deadline=None)
@given(st.lists(day_strategy, min_size=1, max_size=90))
def test_partition_properties_random(days):
    tl = timeline_from(days)
    check_partition(tl, label_states(tl, small_rules), small_rules)


def test_partition_on_simulated_cohort(small_sim):
    cohort, _ = small_sim
    for tl, st_ in zip(cohort, label_cohort(cohort, RULES).values()):
        check_partition(tl, st_, RULES)
