import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualtask.errors import FormatError, UndefinedMetricError
from dualtask.evaluation import (
    JudgmentSet,
    Stratum,
    average_precision,
    concept_recall_at_k,
    inferred_ap,
    mean_metric,
    random_ranking_ap,
    randomization_test,
    read_judgments,
    read_run,
    read_strata,
    sample_judgments,
    write_judgments,
    write_run,
    write_strata,
)
from dualtask.index import RankedList


def brute_force_ap(ranked, relevant):
    """Definition: mean over relevant videos of precision at their rank (0 if not retrieved)."""
    precisions = []
    for v in sorted(relevant, key=lambda u: ranked.index(u) if u in ranked else len(ranked)):
        if v in ranked:
            r = ranked.index(v) + 1
            prefix = ranked[:r]
            precisions.append(sum(1 for u in prefix if u in relevant) / r)
        else:
            precisions.append(0.0)
    return sum(precisions) / len(relevant)


def _ranked_with_bias(rng, n=1000, n_rel=100, boost=0.5):
    ids = [f"v{i:04d}" for i in range(n)]
    rel = set(rng.choice(ids, n_rel, replace=False))
    scores = rng.random(n) + np.array([boost if v in rel else 0.0 for v in ids])
    return [ids[i] for i in np.argsort(-scores, kind="stable")], rel


def test_ap_trivial_values():
    assert average_precision(["a", "b", "c"], {"a", "b"}) == 1.0
    assert average_precision(["x", "a", "y"], {"a"}) == 0.5
    assert average_precision(["x", "y"], {"a"}) == 0.0
    with pytest.raises(UndefinedMetricError):
        average_precision(["a"], set())


def test_ap_matches_brute_force_on_1000_random_lists():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        pool = [f"v{i}" for i in range(n + 5)]
        ranked = list(rng.permutation(pool)[:n])
        relevant = set(rng.choice(pool, int(rng.integers(1, min(8, len(pool)))), replace=False))
        assert average_precision(ranked, relevant) == brute_force_ap(ranked, relevant)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=30).filter(any), st.randoms())
def test_ap_invariant_under_relabeling(rel_flags, rnd):
    ids = [f"v{i}" for i in range(len(rel_flags))]
    new = list(ids)
    rnd.shuffle(new)
    mapping = dict(zip(ids, new))
    rel = {v for v, f in zip(ids, rel_flags) if f}
    assert average_precision(ids, rel) == average_precision([mapping[v] for v in ids], {mapping[v] for v in rel})


def test_random_ranking_ap_matches_enumeration():
    for n, R in ((4, 1), (5, 2), (6, 3)):
        ids = list(range(n))
        aps = [brute_force_ap(list(p), set(range(R))) for p in itertools.permutations(ids)]
        assert random_ranking_ap(n, R) == pytest.approx(np.mean(aps), abs=1e-12)
    assert random_ranking_ap(1, 1) == 1.0


def test_inferred_ap_equals_ap_at_full_rate():
    rng = np.random.default_rng(1)
    for _ in range(20):
        ranked, rel = _ranked_with_bias(rng, n=300, n_rel=30)
        strata = {"a": Stratum(1, 100, 1.0), "b": Stratum(101, 1000, 1.0)}
        js = sample_judgments("q", ranked, rel, strata, rng)
        assert inferred_ap(ranked, js) == pytest.approx(average_precision(ranked, rel), abs=1e-9)
        assert inferred_ap(ranked, JudgmentSet.complete("q", {v: v in rel for v in ranked})) == pytest.approx(
            average_precision(ranked, rel), abs=1e-9)


def test_inferred_ap_unbiased_at_half_rate():
    rng = np.random.default_rng(2)
    ranked, rel = _ranked_with_bias(rng)
    truth = average_precision(ranked, rel)
    strata = {"a": Stratum(1, 1000, 0.5)}
    est = np.array([inferred_ap(ranked, sample_judgments("q", ranked, rel, strata, rng)) for _ in range(1000)])
    se = est.std(ddof=1) / np.sqrt(len(est))
    assert abs(est.mean() - truth) <= 2 * se


def test_inferred_ap_all_nonrelevant_and_empty_stratum_warning():
    js = JudgmentSet("q", {"a": False, "b": False}, {"a": "s", "b": "s"},
                     {"s": Stratum(1, 10, 0.5), "t": Stratum(11, 20, 0.2)})
    with pytest.warns(UserWarning, match="'t'"):
        assert inferred_ap(["a", "b", "c"], js) == 0.0


def test_judgment_set_validation():
    with pytest.raises(ValueError):
        JudgmentSet("q", {}, {}, {"a": Stratum(1, 10, 1.0), "b": Stratum(10, 20, 1.0)})
    with pytest.raises(ValueError):
        Stratum(1, 10, 0.0)
    with pytest.raises(ValueError):
        Stratum(5, 4, 0.5)


def test_concept_recall_oracle_and_monotone_once_k_covers_truth():
    assert concept_recall_at_k(["a", "b", "c"], {"a", "b"}, 3) == 1.0
    assert concept_recall_at_k(["x", "y"], {"a"}, 2) == 0.0
    rng = np.random.default_rng(3)
    vocab = [f"t{i}" for i in range(30)]
    for _ in range(200):
        decoded = list(rng.permutation(vocab))
        truth = set(rng.choice(vocab, int(rng.integers(1, 15)), replace=False))
        prev_hits, prev = -1, -1.0
        for k in range(1, 31):
            got = concept_recall_at_k(decoded, truth, k)
            hits = len(set(decoded[:k]) & truth)
            assert got == hits / min(k, len(truth))
            assert hits >= prev_hits
            if k > len(truth):
                # fixed denominator from here on, so recall cannot drop
                assert got >= prev
            prev_hits, prev = hits, got
    with pytest.raises(UndefinedMetricError):
        concept_recall_at_k(["a"], set(), 1)


def _exact_p(a, b):
    d = np.asarray(a) - np.asarray(b)
    obs = abs(d.mean())
    hits = sum(abs((np.array(s) * d).mean()) >= obs - 1e-12 for s in itertools.product((1, -1), repeat=len(d)))
    return hits / 2 ** len(d)


def test_randomization_matches_exact_enumeration_for_five_queries():
    a = [0.31, 0.52, 0.18, 0.44, 0.27]
    b = [0.25, 0.40, 0.20, 0.30, 0.26]
    exact = _exact_p(a, b)
    assert exact == 6 / 32  # hand count: flips with sum of abs(d) <= 0.02, both signs
    iters = 10000
    p = randomization_test(a, b, iters, seed=0)
    assert abs(p - exact) <= 4 * np.sqrt(exact * (1 - exact) / iters)


def test_randomization_identical_dominated_and_symmetric():
    a = np.linspace(0.2, 0.6, 30)
    assert randomization_test(a, a) == 1.0
    assert randomization_test(a + 0.3, a, 10000) <= 0.01
    rng = np.random.default_rng(4)
    x, y = rng.random(12), rng.random(12)
    assert randomization_test(x, y, 2000, seed=5) == randomization_test(y, x, 2000, seed=5)
    p = randomization_test(x, y, 2000, seed=5)
    assert 0.0 < p <= 1.0
    with pytest.raises(ValueError):
        randomization_test([1.0], [0.0])
    with pytest.raises(ValueError):
        randomization_test([1.0, 2.0], [0.0])


def test_mean_metric():
    assert mean_metric([0.5, 1.0]) == 0.75
    assert np.isnan(mean_metric([]))


def test_run_file_round_trip(tmp_path):
    lists = [RankedList.from_scores(["a", "b", "c"], [0.1, 0.3, 0.2], "q1"),
             RankedList.from_scores(["d", "e"], [1.0, 1.0], "q2")]
    write_run(tmp_path / "r.txt", lists, "tag", depth=2)
    back = read_run(tmp_path / "r.txt")
    assert back["q1"].video_ids == ["b", "c"] and back["q2"].video_ids == ["d", "e"]
    assert back["q1"].scorer == "tag"
    (tmp_path / "bad.txt").write_text("q1 Q0 a 1\n")
    with pytest.raises(FormatError):
        read_run(tmp_path / "bad.txt")


def test_strata_and_judgment_round_trip(tmp_path):
    strata = {"s1": Stratum(1, 10, 1.0), "s2": Stratum(11, 100, 0.25)}
    write_strata(tmp_path / "s.txt", strata)
    assert read_strata(tmp_path / "s.txt") == strata
    js = JudgmentSet("q", {"a": True, "b": False}, {"a": "s1", "b": "s2"}, strata)
    write_judgments(tmp_path / "j.txt", [js])
    back = read_judgments(tmp_path / "j.txt", strata)["q"]
    assert back.judgments == js.judgments and back.stratum_of == js.stratum_of
    assert back.rate("b") == 0.25
    complete = read_judgments(tmp_path / "j.txt")["q"]
    assert complete.rate("a") == complete.rate("b") == 1.0
    with pytest.raises(FormatError):
        read_judgments(tmp_path / "j.txt", {"s1": Stratum(1, 10, 1.0)})


def test_sample_judgments_respects_strata():
    rng = np.random.default_rng(6)
    ranked = [f"v{i}" for i in range(200)]
    strata = {"top": Stratum(1, 50, 1.0), "tail": Stratum(51, 150, 0.3)}
    js = sample_judgments("q", ranked, {"v1", "v60"}, strata, rng)
    assert all(f"v{i}" in js.judgments for i in range(50))
    assert not any(f"v{i}" in js.judgments for i in range(150, 200))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        inferred_ap(ranked, js)
