import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fusedseg import metrics
from fusedseg.exceptions import ConfigurationError

from .oracles import dice_bruteforce, iou_bruteforce, nsd_bruteforce, random_masks, surface_bruteforce

masks16 = arrays(np.bool_, (8, 8))


def _pairs(n=200, seed=0):
    rng = np.random.default_rng(seed)
    return [(random_masks(rng), random_masks(rng)) for _ in range(n)]


def test_dice_examples():
    g = np.zeros((4, 4), bool)
    g[0, :4] = g[1, :2] = True  # |G| = 6
    p = np.zeros((4, 4), bool)
    p[0, :4] = True  # overlap 4
    p[2, :2] = True  # |P| = 6
    assert metrics.dice(p, g) == pytest.approx(8 / 12)
    assert metrics.dice(g, g) == 1.0


def test_iou_example():
    p = np.zeros((4, 4), bool)
    g = np.zeros((4, 4), bool)
    p[0, :] = True
    p[1, :2] = True
    g[0, :] = True
    g[2, :2] = True
    assert metrics.iou(p, g) == 0.5


def test_empty_conventions():
    z = np.zeros((5, 5), bool)
    one = z.copy()
    one[2, 2] = True
    assert metrics.dice(z, z) == metrics.iou(z, z) == metrics.nsd(z, z) == 1.0
    assert metrics.nsd(z, one) == 0.0 and metrics.nsd(one, z) == 0.0
    assert metrics.dice(one, z) == 0.0


def test_shape_mismatch():
    with pytest.raises(ConfigurationError):
        metrics.dice(np.zeros((2, 2)), np.zeros((3, 3)))


@pytest.mark.parametrize("metric, oracle", [(metrics.dice, dice_bruteforce), (metrics.iou, iou_bruteforce)])
def test_overlap_matches_bruteforce(metric, oracle):
    for p, g in _pairs():
        assert metric(p, g) == oracle(p, g)


def test_dice_iou_identity():
    for p, g in _pairs(seed=1):
        i = metrics.iou(p, g)
        assert abs(metrics.dice(p, g) - 2 * i / (1 + i)) <= 1e-12


def test_surface_examples():
    full = np.ones((5, 6), bool)
    s = metrics.surface(full)
    assert s.sum() == 2 * 5 + 2 * 6 - 4 and not s[1:-1, 1:-1].any()
    single = np.zeros((5, 5), bool)
    single[2, 2] = True
    assert (metrics.surface(single) == single).all()
    sq = np.zeros((7, 7), bool)
    sq[2:5, 2:5] = True
    assert metrics.surface(sq).sum() == 8


def test_surface_matches_bruteforce():
    for p, _ in _pairs(50, seed=2):
        ys, xs = np.nonzero(metrics.surface(p))
        assert sorted(zip(ys.tolist(), xs.tolist())) == sorted(surface_bruteforce(p))


def test_nsd_shifted_square():
    a = np.zeros((16, 16), bool)
    a[4:12, 4:12] = True
    b = np.roll(a, 1, axis=1)
    assert metrics.nsd(a, b, 2.0) == 1.0
    assert metrics.nsd(a, a, 2.0) == 1.0


@pytest.mark.parametrize("tau", [1.0, 2.0, 3.5])
def test_nsd_matches_bruteforce(tau):
    for p, g in _pairs(seed=3):
        assert metrics.nsd(p, g, tau) == nsd_bruteforce(p, g, tau)


@settings(max_examples=60, deadline=None)
@given(masks16, masks16)
def test_symmetry_and_range(p, g):
    for f in (metrics.dice, metrics.iou, metrics.nsd):
        a, b = f(p, g), f(g, p)
        assert a == b
        assert 0.0 <= a <= 1.0


@settings(max_examples=60, deadline=None)
@given(masks16, masks16, st.floats(0.5, 4.0), st.floats(0.0, 3.0))
def test_nsd_monotone_in_tau(p, g, tau, extra):
    assert metrics.nsd(p, g, tau) <= metrics.nsd(p, g, tau + extra)


def test_aggregate_basic():
    recs = [{"g": "a", "dice": 0.5, "iou": 0.5, "nsd": 0.5}, {"g": "a", "dice": 0.7, "iou": 0.7, "nsd": 0.7},
            {"g": "b", "dice": 0.9, "iou": 0.9, "nsd": 0.9}]
    rows = metrics.aggregate(recs, "g")
    assert [r["g"] for r in rows] == ["a", "b"]
    assert rows[0]["dice_mean"] == pytest.approx(0.6)
    assert rows[0]["dice_std"] == pytest.approx(0.1414213562, abs=1e-9)
    assert rows[1]["dice_std"] == 0.0 and rows[1]["n"] == 1


def test_aggregate_matches_hand_rolled_grouping():
    rng = np.random.default_rng(4)
    recs = [
        {"dataset": f"d{rng.integers(3)}", "degradation": f"k{rng.integers(4)}",
         "dice": float(rng.random()), "iou": float(rng.random()), "nsd": float(rng.random())}
        for _ in range(50)
    ]
    rows = metrics.aggregate(recs, ("dataset", "degradation"))
    for row in rows:
        vals = [r["dice"] for r in recs if r["dataset"] == row["dataset"] and r["degradation"] == row["degradation"]]
        n = len(vals)
        mean = sum(vals) / n
        std = 0.0 if n == 1 else (sum((v - mean) ** 2 for v in vals) / (n - 1)) ** 0.5
        assert row["n"] == n
        assert row["dice_mean"] == pytest.approx(mean, abs=1e-12)
        assert row["dice_std"] == pytest.approx(std, abs=1e-12)
    assert sum(r["n"] for r in rows) == 50


def test_empirical_cdf():
    assert metrics.empirical_cdf([0.2, 0.4, 0.4, 0.8]) == [(0.2, 0.25), (0.4, 0.75), (0.8, 1.0)]
    assert metrics.empirical_cdf([0.3] * 5) == [(0.3, 1.0)]
    with pytest.raises(ValueError):
        metrics.empirical_cdf([])


def test_empirical_cdf_matches_sorted_oracle():
    rng = np.random.default_rng(5)
    base = rng.random(40).round(2)
    sup = np.concatenate([base, rng.random(25).round(2)])
    for values in (base, sup):
        srt = np.sort(values)
        for v, f in metrics.empirical_cdf(values):
            assert f == pytest.approx(np.searchsorted(srt, v, side="right") / len(srt))
        fr = [f for _, f in metrics.empirical_cdf(values)]
        assert fr == sorted(fr) and fr[-1] == 1.0
