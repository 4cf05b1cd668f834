import warnings

import numpy as np
import pytest

from ocra.errors import DataError, DimensionMismatch, FlowTooLarge, InsufficientTexture
from ocra.synth import TactileModel, gen_tactile_pair, render_pads
from ocra.tactile import (DisParams, FlowField, ForceCalibration, GrayImage, build_pyramid,
                          contact_force_magnitude, dis_flow, divergence, flow_to_force,
                          mean_contact_force, warp_back)

INNER = np.s_[16:-16, 16:-16]


def flow_error(spec, seed=3, **kw):
    ref, cur, truth = gen_tactile_pair(seed, spec)
    est = dis_flow(ref, cur, DisParams(**kw)).vectors
    return np.linalg.norm(est - truth, axis=-1)[INNER]


def test_generator_matches_flow_convention():
    ref, cur, flow = gen_tactile_pair(1, {"kind": "uniform", "shift": [2.0, 1.0]}, 48, 64)
    back = warp_back(cur.pixels, flow)
    np.testing.assert_allclose(back[4:-4, 4:-4], ref.pixels[4:-4, 4:-4], atol=1e-12)


def test_generator_rejects_large_flow():
    with pytest.raises(FlowTooLarge):
        gen_tactile_pair(0, {"kind": "uniform", "shift": [40.0, 0.0]})


@pytest.mark.parametrize("shift", [(1, 0), (0, -2), (3, 2), (-4, 5)])
def test_integer_shift_recovered(shift):
    assert np.median(flow_error({"kind": "uniform", "shift": list(shift)})) < 0.2


def test_zero_motion():
    assert np.max(flow_error({"kind": "uniform", "shift": [0, 0]})) < 0.05


def test_large_shift_needs_pyramid():
    spec = {"kind": "uniform", "shift": [12, 0]}
    assert np.median(flow_error(spec, levels=1)) > 5.0
    assert np.median(flow_error(spec, levels=3)) < 0.5


def test_smooth_deformations():
    assert np.median(flow_error({"kind": "radial", "rate": 0.03})) < 0.2
    assert np.median(flow_error({"kind": "shear", "rate": 0.03})) < 0.2


def test_flat_image_warns():
    flat = GrayImage(np.full((64, 64), 0.5))
    with pytest.warns(InsufficientTexture):
        f = dis_flow(flat, flat)
    assert f.insufficient_texture
    assert np.all(np.isfinite(f.vectors))


def test_input_validation():
    ref, cur, _ = gen_tactile_pair(0, {"kind": "uniform", "shift": [0, 0]}, 48, 64)
    with pytest.raises(DimensionMismatch):
        dis_flow(ref, GrayImage(np.zeros((48, 32))))
    with pytest.raises(DimensionMismatch):
        dis_flow(GrayImage(np.zeros((50, 64))), GrayImage(np.zeros((50, 64))), DisParams(levels=3))
    with pytest.raises(DataError):
        GrayImage(np.full((4, 4), 1.5))
    with pytest.raises(DataError):
        FlowField(np.zeros((4, 4, 3)))


def test_pyramid_shapes():
    pyr = build_pyramid(np.zeros((48, 64)), 4)
    assert [p.shape for p in pyr] == [(48, 64), (24, 32), (12, 16), (6, 8)]


def test_divergence_of_radial_field():
    h, w, r = 20, 30, 0.05
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    flow = r * np.stack([xx, yy], -1)
    div = divergence(flow)
    np.testing.assert_allclose(div[1:-1, 1:-1], 2 * r, atol=1e-12)
    assert np.all(div[0] == 0) and np.all(div[:, -1] == 0)


def test_flow_to_force_linear():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((10, 12, 2)), rng.standard_normal((10, 12, 2))
    cal = ForceCalibration(np.array([[2.0, 0.1], [0.0, 1.5]]), 3.0)
    np.testing.assert_allclose(flow_to_force(a + 2 * b, cal),
                               flow_to_force(a, cal) + 2 * flow_to_force(b, cal), atol=1e-12)
    f = flow_to_force(np.tile([1.0, 2.0], (5, 5, 1)), cal)
    np.testing.assert_allclose(f[2, 2], [2.2, 3.0, 0.0])
    with pytest.raises(DataError):
        ForceCalibration(np.zeros((2, 2)))


def test_mean_contact_force():
    left = np.zeros((4, 4, 3))
    right = np.zeros((4, 4, 3))
    right[..., 2] = 2.0
    np.testing.assert_allclose(mean_contact_force(left, right), [0, 0, 1.0])
    assert contact_force_magnitude(left, right) == 1.0
    with pytest.raises(DataError):
        mean_contact_force(np.zeros((4, 4, 2)), right)


def test_tactile_model_round_trip():
    """Grip and weight are recovered from rendered pads through the matching calibration."""
    model = TactileModel()
    cal = model.calibration()
    (lr, lc), (rr, rc) = render_pads(model, (11, 12), grip=2.0, weight=1.5)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fl = flow_to_force(dis_flow(lr, lc, DisParams(levels=3)), cal)
        fr = flow_to_force(dis_flow(rr, rc, DisParams(levels=3)), cal)
    inner = np.s_[8:-8, 8:-8]
    f = mean_contact_force(fl[inner], fr[inner])
    assert abs(f[1] - 1.5) < 0.1          # weight -> shear
    assert abs(f[2] - 2.0) < 0.2          # grip -> normal
