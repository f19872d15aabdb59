import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from palmpipe.errors import EmptyManifest, MissingClass, ParseError
from palmpipe.evaluation import (
    ScoreRecord,
    age_breakdown,
    compute_roc,
    eer,
    export_report,
    generate_pairs,
    read_scores,
    roc_from_scores,
    tar_at_far,
    write_scores,
)
from palmpipe.manifest import ManifestRow

from oracles import brute_eer, brute_tar_at_far, brute_tar_far


def rows(n, k):
    return [ManifestRow(f"s{i}", f"s{i}_c{j}", "right", 12, f"{i}{j}.png", "") for i in range(n) for j in range(k)]


def records(genuine, impostor):
    out = [ScoreRecord(f"g{k}", f"h{k}", float(s), True, "a", "a") for k, s in enumerate(genuine)]
    out += [ScoreRecord(f"i{k}", f"j{k}", float(s), False, "a", "b") for k, s in enumerate(impostor)]
    return out


def test_pair_counts():
    pairs = generate_pairs(rows(2, 2))
    assert sum(p.genuine for p in pairs) == 2
    assert sum(not p.genuine for p in pairs) == 1
    for n, k in ((5, 3), (7, 4)):
        pairs = generate_pairs(rows(n, k))
        assert sum(p.genuine for p in pairs) == n * k * (k - 1) // 2
        assert sum(not p.genuine for p in pairs) == n * (n - 1) // 2
    full = generate_pairs(rows(4, 3), policy="all")
    assert sum(not p.genuine for p in full) == 6 * 9


def test_pairs_deterministic_and_capped():
    a = generate_pairs(rows(30, 2), policy="all", cap=100, seed=4)
    b = generate_pairs(rows(30, 2), policy="all", cap=100, seed=4)
    c = generate_pairs(rows(30, 2), policy="all", cap=100, seed=5)
    assert a == b
    assert sum(not p.genuine for p in a) == 100
    assert a != c
    for p in a:
        assert p.genuine == (p.probe.subject_id == p.gallery.subject_id)
        assert p.probe.capture_id != p.gallery.capture_id


def test_pair_errors():
    with pytest.raises(EmptyManifest):
        generate_pairs([])
    with pytest.raises(EmptyManifest):
        generate_pairs(rows(1, 3))
    with pytest.raises(ValueError):
        generate_pairs(rows(3, 2), policy="random")


def test_score_record_genuine_consistency():
    with pytest.raises(ValueError):
        ScoreRecord("a", "b", 0.5, True, "s1", "s2")
    with pytest.raises(ValueError):
        ScoreRecord("a", "a", 0.5, True, "s1", "s1")


def test_perfect_separation():
    roc = compute_roc(records([0.9] * 5, [0.1] * 5))
    assert np.all(roc.tar[roc.far < 1] == 1)
    assert tar_at_far(roc, 0.001)[0] == 1.0
    assert eer(roc) == 0.0


def test_identical_distributions():
    vals = [0.1, 0.2, 0.2, 0.5, 0.7, 0.9]
    roc = compute_roc(records(vals, vals))
    assert np.array_equal(roc.tar, roc.far)
    assert eer(roc) == pytest.approx(0.5)


def test_hand_counted_operating_points():
    impostor = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95]
    genuine = [0.92, 0.93, 0.5]
    roc = roc_from_scores(genuine, impostor)
    assert tar_at_far(roc, 0.10) == (0.0, 0.95)
    tar, thr = tar_at_far(roc, 0.20)
    assert thr == 0.9 and tar == pytest.approx(2 / 3)


def test_target_below_resolution():
    rng = np.random.default_rng(0)
    imp = rng.random(50)
    gen = rng.random(20) + 0.5
    tar, thr = tar_at_far(roc_from_scores(gen, imp), 0.5 / 50)
    assert thr > imp.max()
    no_gap = roc_from_scores([0.1], [0.5, 0.6])
    assert tar_at_far(no_gap, 0.1) == (0.0, math.inf)


def test_missing_class():
    with pytest.raises(MissingClass):
        compute_roc(records([0.5], []))
    with pytest.raises(ValueError):
        tar_at_far(compute_roc(records([0.5], [0.4])), 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 300), st.integers(1, 300))
def test_roc_matches_brute_force(seed, ng, ni):
    rng = np.random.default_rng(seed)
    g = np.round(rng.normal(0.7, 0.15, ng), 2)  # ties are deliberate
    i = np.round(rng.normal(0.4, 0.15, ni), 2)
    roc = roc_from_scores(g, i)
    assert np.all(np.diff(roc.thresholds) > 0)
    assert np.all(np.diff(roc.far) <= 0) and np.all(np.diff(roc.tar) <= 0)
    for t, far, tar in zip(roc.thresholds, roc.far, roc.tar):
        assert (tar, far) == brute_tar_far(g, i, t)
    for target in (0.001, 0.01, 0.1, 0.5):
        assert tar_at_far(roc, target) == brute_tar_at_far(list(g), list(i), target)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_tar_at_far_monotone(seed):
    rng = np.random.default_rng(seed)
    roc = roc_from_scores(rng.normal(0.6, 0.2, 100), rng.normal(0.4, 0.2, 100))
    tars = [tar_at_far(roc, f)[0] for f in (0.005, 0.01, 0.05, 0.1, 0.3, 0.9)]
    assert tars == sorted(tars)


def test_adding_genuine_above_threshold():
    rng = np.random.default_rng(1)
    g, i = list(rng.normal(0.6, 0.2, 50)), list(rng.normal(0.4, 0.2, 200))
    tar, thr = tar_at_far(roc_from_scores(g, i), 0.05)
    tar2, far2 = brute_tar_far(g + [thr + 0.01], i, thr)
    assert tar2 > tar
    assert far2 == brute_tar_far(g, i, thr)[1]


def test_eer_gaussians_match_sweep():
    rng = np.random.default_rng(7)
    g, i = rng.normal(0.7, 0.1, 10_000), rng.normal(0.3, 0.1, 10_000)
    assert abs(eer(roc_from_scores(g, i)) - brute_eer(g, i)) < 0.005


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 0.5))
def test_eer_bounded_under_dominance(seed, shift):
    rng = np.random.default_rng(seed)
    base = rng.random(200)
    e = eer(roc_from_scores(base + shift, base))
    assert 0.0 <= e <= 0.5 + 1e-12


def test_report_files(tmp_path):
    rng = np.random.default_rng(3)
    recs = records(rng.normal(0.7, 0.1, 40), rng.normal(0.4, 0.1, 90))
    s1 = export_report(recs, tmp_path / "a")
    s2 = export_report(recs, tmp_path / "b")
    assert s1 == s2
    for name in ("scores.csv", "roc.csv", "histogram.csv", "summary.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    hist = np.loadtxt(tmp_path / "a" / "histogram.csv", delimiter=",", skiprows=1)
    assert len(hist) == 100
    assert hist[:, 2].sum() == 40 and hist[:, 3].sum() == 90
    with pytest.raises(MissingClass):
        export_report([], tmp_path / "c")
    assert not (tmp_path / "c").exists()


def test_score_csv_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    recs = records(rng.random(10), rng.random(10))
    write_scores(recs, tmp_path / "s.csv")
    back = read_scores(tmp_path / "s.csv")
    assert [(r.probe_id, r.gallery_id, r.score, r.genuine) for r in back] == [(r.probe_id, r.gallery_id, r.score, r.genuine) for r in recs]
    assert b"\r" not in (tmp_path / "s.csv").read_bytes()
    (tmp_path / "bad.csv").write_text("a,b,c\n")
    with pytest.raises(ParseError):
        read_scores(tmp_path / "bad.csv")
    (tmp_path / "nan.csv").write_text("probe_id,gallery_id,genuine,score\np,g,1,nan\n")
    with pytest.raises(ParseError):
        read_scores(tmp_path / "nan.csv")


def test_age_breakdown_groups():
    ages = {"a1": 8, "a2": 8, "b1": 30, "b2": 30, "c1": 9}
    recs = [
        ScoreRecord("a1", "a2", 0.9, True),
        ScoreRecord("a1", "c1", 0.2, False),
        ScoreRecord("b1", "b2", 0.8, True),
    ]
    out = age_breakdown(recs, ages.get)
    assert out["age_6-12mo.n_genuine"] == 1 and out["age_6-12mo.n_impostor"] == 1
    assert not any(k.startswith("age_24-48mo") for k in out)  # no impostors there
