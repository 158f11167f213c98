import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from utrack import tracking as trk
from utrack.tracking import RangeMeasurement as RM


def test_slant_to_horizontal():
    assert trk.slant_to_horizontal(100, 0) == (100.0, False)
    assert trk.slant_to_horizontal(50, 30) == (pytest.approx(40.0), False)
    assert trk.slant_to_horizontal(10, 20) == (0.0, True)


def test_pf_init_examples():
    ps = trk.pf_init((0, 0), 10.0, 4, 1.0, seed=1)
    assert np.all(ps.w == 0.25)
    ps = trk.pf_init((3, -2), 10.0, 2000, 1.0, seed=2)
    assert np.all(np.hypot(ps.x - 3, ps.y + 2) <= 10.0)
    assert np.all(np.hypot(ps.vx, ps.vy) <= 1.0)
    again = trk.pf_init((3, -2), 10.0, 2000, 1.0, seed=2)
    assert np.array_equal(ps.x, again.x) and np.array_equal(ps.vy, again.vy)
    with pytest.raises(ValueError):
        trk.pf_init((0, 0), 10.0, 0, 1.0)


def _with(ps, **kw):
    from dataclasses import replace
    return replace(ps, **kw)


def test_pf_predict_examples():
    ps = trk.pf_init((0, 0), 10.0, 64, 2.0, seed=0)
    still = _with(ps, vx=np.zeros(64), vy=np.zeros(64))
    out = trk.pf_predict(still, 30.0, 0.0, 0.0)
    assert np.array_equal(out.x, still.x) and np.array_equal(out.y, still.y)
    moving = _with(ps, vx=np.ones(64), vy=np.zeros(64))
    out = trk.pf_predict(moving, 30.0, 0.0, 0.0)
    assert np.allclose(out.x - moving.x, 30.0)
    noisy = trk.pf_predict(ps, 30.0)
    assert np.array_equal(noisy.w, ps.w)
    assert np.all(np.hypot(noisy.vx, noisy.vy) <= 2.0 + 1e-12)


def test_predict_fused_matches_reference():
    from utrack import rng
    gen = np.random.default_rng(0)
    x, y, vx, vy = (gen.normal(size=(3, 2, 50)) for _ in range(4))
    keys = rng.derive(rng.seed_key(9), np.arange(3, dtype=np.uint64))
    ref = trk.predict_arrays(x, y, vx, vy, 30.0, rng.normal(keys, 5, 16, (2, 50, 4)), 1.0, 0.05, 1.1)
    fx, fy, fvx, fvy = (np.ascontiguousarray(a) for a in (x, y, vx, vy))
    trk.predict_inplace(fx, fy, fvx, fvy, keys, 5, 16, 30.0, 1.0, 0.05, 1.1)
    for a, b in zip(ref, (fx, fy, fvx, fvy)):
        assert np.array_equal(a, b)


def test_predict_turns_match_reference():
    from utrack import rng
    gen = np.random.default_rng(1)
    x, y, vx, vy = (gen.normal(size=(3, 2, 50)) for _ in range(4))
    keys = rng.derive(rng.seed_key(4), np.arange(3, dtype=np.uint64))
    M = 100
    u = rng.uniform(keys, 5, 16, (6 * M,))[:, 4 * M:].reshape(3, 2, 50, 2)
    ref = trk.predict_arrays(x, y, vx, vy, 30.0, rng.normal(keys, 5, 16, (2, 50, 4)), 1.0, 0.05, 1.1, u, 0.3)
    fx, fy, fvx, fvy = (a.copy() for a in (x, y, vx, vy))
    trk.predict_inplace(fx, fy, fvx, fvy, keys, 5, 16, 30.0, 1.0, 0.05, 1.1, 0.3)
    for a, b in zip(ref, (fx, fy, fvx, fvy)):
        np.testing.assert_allclose(b, a, rtol=1e-12, atol=1e-12)
    # turned particles keep their speed but point somewhere new
    turned = u[..., 0] < 0.3
    assert 0.2 < turned.mean() < 0.4
    no_turn = trk.predict_arrays(x, y, vx, vy, 30.0, rng.normal(keys, 5, 16, (2, 50, 4)), 1.0, 0.05, 1.1)
    np.testing.assert_allclose(np.hypot(fvx, fvy), np.hypot(no_turn[2], no_turn[3]), rtol=1e-12)
    assert np.all(fvx[~turned] == no_turn[2][~turned])


def test_pf_update_examples():
    base = trk.pf_init((0, 0), 10.0, 3, 1.0)
    # collinear particles at distance 9, 10, 11 from the origin; range 10
    ps = _with(base, x=np.array([9.0, 10.0, 11.0]), y=np.zeros(3))
    out = trk.pf_update(ps, [RM((0, 0), 10.0, 1.0)])
    assert np.argmax(out.w) == 1
    assert out.w[0] == pytest.approx(out.w[2])
    assert out.w.sum() == pytest.approx(1.0, abs=1e-12)


def test_pf_update_underflow_resets_uniform():
    base = trk.pf_init((0, 0), 1.0, 8, 1.0)
    out = trk.pf_update(base, [RM((0, 0), 1e6, 1.0)])
    assert out.degenerate
    assert np.allclose(out.w, 1 / 8)


def test_pf_resample_examples():
    ps = trk.pf_init((0, 0), 10.0, 100, 1.0)
    assert trk.effective_sample_size(ps.w) == pytest.approx(100)
    assert trk.pf_resample(ps) is ps
    w = np.zeros(100)
    w[17] = 1.0
    out = trk.pf_resample(_with(ps, w=w))
    assert np.all(out.x == ps.x[17]) and np.allclose(out.w, 0.01)


def test_systematic_expected_counts():
    gen = np.random.default_rng(0)
    n = 10
    w = gen.dirichlet(np.ones(n))
    counts = np.zeros(n)
    reps = 10_000
    u = gen.random(reps)
    idx = trk.systematic_indices(np.broadcast_to(w, (reps, n)).copy(), u)
    for j in range(n):
        counts[j] = np.mean(np.sum(idx == j, axis=1))
    assert np.all(np.abs(counts - n * w) < 1)
    # per-draw counts are within one of n*w (systematic property)
    per = np.stack([np.sum(idx == j, axis=1) for j in range(n)], axis=1)
    assert np.all(np.abs(per - n * w) < 1 + 1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=40), st.floats(0.0, 0.999999))
def test_systematic_batch_independent(ws, u):
    w = np.asarray(ws) + 1e-3
    w /= w.sum()
    one = trk.systematic_indices(w[None], np.array([u]))[0]
    two = trk.systematic_indices(np.stack([w[::-1], w]), np.array([0.3, u]))[1]
    assert np.array_equal(one, two)
    assert len(one) == len(w) and one.min() >= 0 and one.max() < len(w)


def test_pf_estimate_examples():
    base = trk.pf_init((0, 0), 1.0, 2, 1.0)
    e = trk.pf_estimate(_with(base, x=np.array([5.0, 5.0]), y=np.array([5.0, 5.0])))
    assert np.allclose(e.position_xy, [5, 5]) and e.spread == 0
    e = trk.pf_estimate(_with(base, x=np.array([0.0, 2.0]), y=np.zeros(2)))
    assert np.allclose(e.position_xy, [1, 0]) and e.spread == pytest.approx(1.0)
    e = trk.pf_estimate(_with(base, x=np.array([0.0, 9.0]), y=np.array([0.0, 9.0]), w=np.array([1.0, 0.0])))
    assert np.allclose(e.position_xy, [0, 0])


def test_ls_trilaterate_examples():
    meas = [RM((0, 0), 5.0, 1.0), RM((10, 0), math.sqrt(65), 1.0), RM((0, 10), math.sqrt(45), 1.0)]
    p, resid = trk.ls_trilaterate(meas, return_residual=True)
    assert np.allclose(p, [3, 4], atol=1e-6)
    assert resid < 1e-9
    with pytest.raises(trk.RankDeficiencyError):
        trk.ls_trilaterate(meas[:2])
    with pytest.raises(trk.RankDeficiencyError):
        trk.ls_trilaterate([RM((0, 0), 5, 1), RM((1, 0), 5, 1), RM((2, 0), 5, 1)])


def static_target_run(seed, sigma, noiseless=False, n_meas=8, target=(120.0, -40.0), radius=200.0):
    """Ranges to a static target from ``n_meas`` evenly spread bearings, 30 s
    apart.  The filter uses a static motion model (max particle speed 0) and
    is seeded on the first range circle."""
    gen = np.random.default_rng(seed)
    ang0 = gen.uniform(0, 2 * math.pi)
    ps = None
    meas_all = []
    for k in range(n_meas):
        a = ang0 + 2 * math.pi * k / n_meas
        o = (target[0] + radius * math.cos(a), target[1] + radius * math.sin(a))
        r = radius if noiseless else radius + gen.normal(0, sigma)
        m = RM(o, max(r, 0.0), sigma)
        meas_all.append(m)
        ps = trk.pf_init_ring(m, 1024, 0.0, seed=seed) if ps is None else trk.pf_predict(ps, 30.0)
        ps = trk.pf_resample(trk.pf_update(ps, [m]))
    est = trk.pf_estimate(ps).position_xy
    return math.hypot(est[0] - target[0], est[1] - target[1]), ps, meas_all


def test_pf_consistency_under_noise():
    errs = [static_target_run(s, 3.0)[0] for s in range(20)]
    assert np.median(errs) < 6.0


def test_pf_convergence_noiseless():
    errs = np.array([static_target_run(s, 3.0, noiseless=True)[0] for s in range(20)])
    assert np.mean(errs < 2.0) >= 0.95


def test_ls_matches_pf_limit():
    err, ps, meas = static_target_run(0, 0.5, noiseless=True)
    p = trk.ls_trilaterate(meas)
    est = trk.pf_estimate(ps).position_xy
    assert np.hypot(*(p - est)) < 1.0


def test_pf_determinism():
    a = static_target_run(4, 3.0)[1]
    b = static_target_run(4, 3.0)[1]
    for f in ("x", "y", "vx", "vy", "w"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
