import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hrvkit.analysis import (ScorerError, WeakeningCurve, area_between, cosine_matrix, default_ks,
                             logit_scale, per_timestep_hrvs, random_order, timestep_vectors,
                             to_tsv, weakening_curve)
from hrvkit.core import HRVMatrix, RawHRVTensor
from hrvkit.errors import PreconditionError


def test_default_ks():
    assert default_ks(12) == [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12]
    ks = default_ks(128)
    assert ks[0] == 0 and ks[-1] == 128 and len(ks) == 13


def test_random_order_is_seeded_permutation():
    assert random_order(10, 1) == random_order(10, 1)
    assert sorted(random_order(10, 2)) == list(range(10))


def test_area_by_hand():
    le = WeakeningCurve([0, 2, 4], [1.0, 1.0, 1.0], "lerhf", "c")
    mo = WeakeningCurve([0, 2, 4], [1.0, 0.0, 0.0], "morhf", "c")
    # difference 0, 1, 1 over x = 0, .5, 1 -> trapezoid .25 + .5
    assert area_between(le, mo, 4) == pytest.approx(75.0)
    assert area_between(mo, le, 4) == pytest.approx(-75.0)


def test_area_grid_mismatch():
    with pytest.raises(PreconditionError):
        area_between(WeakeningCurve([0, 1], [0, 0], "lerhf", "c"),
                     WeakeningCurve([0, 2], [0, 0], "morhf", "c"))


def test_weakening_curve_k0_is_baseline(toy):
    hrv = HRVMatrix(toy.vocab.names, np.ones((3, toy.config.H)))
    scorer = lambda run: toy.score_planted(run, "Color")
    prompts = [["a", "red"]]
    c = weakening_curve(toy, hrv, "Color", "morhf", [0], scorer, prompts, seed=4)
    from hrvkit.adapter import derive_seed

    base = toy.generate_with_hooks(prompts[0], derive_seed(4, 0))
    assert c.scores == [toy.score_planted(base, "Color")]


def test_scorer_failure_is_wrapped(toy):
    hrv = HRVMatrix(toy.vocab.names, np.ones((3, toy.config.H)))

    def bad(run):
        raise RuntimeError("boom")

    with pytest.raises(ScorerError, match="boom"):
        weakening_curve(toy, hrv, "Color", "morhf", [0], bad, [["a"]], seed=0)


def test_per_timestep_hrvs_rows():
    counts = np.zeros((2, 3, 4), dtype=np.int64)
    counts[0, :, :] = [[2, 0, 0, 2], [1, 1, 1, 1], [0, 0, 0, 0]]
    per = per_timestep_hrvs(RawHRVTensor(["a", "b"], counts, 0))
    np.testing.assert_array_equal(per[0, 0], [2.0, 0.0, 0.0, 2.0])
    np.testing.assert_array_equal(per[0, 1], [1.0] * 4)
    assert not per[0, 2].any() and not per[1].any()


def test_raw_timestep_vectors_are_constant_under_conservation():
    rng = np.random.default_rng(1)
    N, T, H, U = 3, 4, 5, 6
    counts = np.zeros((N, T, H), dtype=np.int64)
    for _ in range(U):
        for t in range(T):
            for h in range(H):
                counts[rng.integers(N), t, h] += 1
    _, per_t = timestep_vectors(RawHRVTensor(["a", "b", "c"], counts, U))
    np.testing.assert_allclose(per_t, U / N)
    _, norm_t = timestep_vectors(RawHRVTensor(["a", "b", "c"], counts, U), normalize=True)
    assert not np.allclose(norm_t, norm_t[0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-100, 100)).filter(lambda a: (np.abs(a).sum(axis=1) > 1e-3).all()))
def test_cosine_properties(v):
    m, keep = cosine_matrix(v)
    assert keep == list(range(len(v)))
    assert np.array_equal(m, m.T)
    assert np.all(np.abs(np.diag(m) - 1) < 1e-9)
    assert np.all(np.abs(m) <= 1 + 1e-9)


def test_cosine_skips_zero_vectors():
    m, keep = cosine_matrix([[1.0, 0.0], [0.0, 0.0], [0.0, 2.0]])
    assert keep == [0, 2]
    np.testing.assert_allclose(m, np.eye(2))
    with pytest.raises(PreconditionError):
        cosine_matrix([[0.0, 0.0]])


def test_logit_scale_by_hand():
    Q = np.array([[1.0, -2.0]])
    K = np.array([[1.0, 0.0], [0.0, 1.0]])
    # logits 1/sqrt2 and -2/sqrt2
    assert logit_scale(Q, K, 2) == pytest.approx(1.5 / np.sqrt(2), rel=1e-12)


def test_to_tsv():
    text = to_tsv(["a", "b"], [[1, 0.5]], "seed=1")
    assert text == "# seed=1\na\tb\n1\t0.5\n"
