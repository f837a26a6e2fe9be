import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from veinsynth.fingermodel import build_finger_model
from veinsynth.renderer import convolve
from veinsynth.seeding import make_rng
from veinsynth.variations import (
    Blur,
    DegenerateSampleError,
    VariationError,
    VariationParams,
    apply_geometric,
    apply_photometric,
    blur_kernel,
    build_plan,
    forward_points,
    inverse_maps,
    motion_kernel,
    out_of_frame_fraction,
    optical_kernel,
    scattering_kernel,
)


def iou(a, b):
    a, b = a.astype(bool), b.astype(bool)
    union = (a | b).sum()
    return 1.0 if union == 0 else (a & b).sum() / union


@pytest.fixture(scope="module")
def model():
    return build_finger_model(123)


# -- plan ------------------------------------------------------------------------

EXPECTED = {
    "shift": 5,
    "scale": 5,
    "roll": 9,
    "rotation": 11,
    "exposure": 5,
    "motion": 5,
    "optical": 5,
    "scattering": 5,
    "combination": 50,
}


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**64 - 1))
def test_plan_composition_and_ranges(seed):
    plan = build_plan(seed)
    assert len(plan) == 100
    assert plan.counts() == EXPECTED
    for p in plan:
        assert abs(p.shift_x) <= 20 and abs(p.rotation) <= 20 and abs(p.roll) <= 20
        assert 0.85 <= p.scale <= 1.15
        if p.combo:
            kinds = p.category.split("+")
            assert len(kinds) in (2, 3)
            assert sum(k in ("shift", "scale", "roll", "rotation") for k in kinds) == len(kinds) - 1


def test_single_effect_magnitudes():
    plan = build_plan(5)
    by = lambda cat, attr: [getattr(p, attr) for p in plan if p.category == cat and not p.combo]
    assert by("rotation", "rotation") == [-20, -16, -12, -8, -4, 0, 4, 8, 12, 16, 20]
    assert by("roll", "roll") == [-20, -15, -10, -5, 0, 5, 10, 15, 20]
    assert by("shift", "shift_x") == [-20, -10, 0, 10, 20]
    assert by("scale", "scale") == [0.85, 0.925, 1.0, 1.075, 1.15]
    gains = by("under", "exposure") + by("over", "exposure")
    assert gains == [0.55, 0.8, 1.25, 1.5, 1.75]
    assert [p.blur.magnitude for p in plan if p.category == "motion"] == [3, 6, 9, 12, 15]
    assert [p.blur.magnitude for p in plan if p.category == "optical"] == [1, 2, 3, 4, 5]


def test_plan_deterministic_and_seed_dependent():
    assert build_plan(9).samples == build_plan(9).samples
    assert build_plan(9).samples != build_plan(10).samples


def test_plan_values_survive_six_digit_format():
    for p in build_plan(77):
        for v in (p.shift_x, p.rotation, p.scale, p.roll, p.exposure or 1.0):
            assert float("%.6g" % v) == v
        if p.blur is not None:
            assert float("%.6g" % p.blur.angle) == p.blur.angle
            assert float("%.6g" % p.blur.magnitude) == p.blur.magnitude


def test_out_of_range_params_rejected():
    with pytest.raises(VariationError):
        VariationParams(rotation=45)
    with pytest.raises(VariationError):
        VariationParams(scale=1.3)
    with pytest.raises(VariationError):
        VariationParams(exposure=1.0001 + 0.1)
    with pytest.raises(VariationError):
        Blur("motion", 4.5)
    with pytest.raises(VariationError):
        Blur("smear", 3)


def test_custom_counts_fill_remainder():
    counts = (("shift", 5), ("under", 5), ("over", 5))
    plan = build_plan(1, single_counts=counts, size=20)
    assert plan.counts() == {"shift": 5, "exposure": 10, "combination": 5}
    with pytest.raises(VariationError):
        build_plan(1, single_counts=(("shift", 30),), size=20)


# -- geometric -------------------------------------------------------------------


def test_identity_params_bit_identical(model):
    img = make_rng(0).random((200, 600)).astype(np.float32)
    masks = {"shape": model.shape.mask, "veins": (img > 0.9).astype(np.uint8)}
    r = apply_geometric(img, masks, VariationParams(), model.shape, roi=model.roi, joints=model.joints)
    assert r.image.tobytes() == img.tobytes()
    for k in masks:
        assert np.array_equal(r.masks[k], masks[k])
    assert r.roi == model.roi


def test_shift_round_trip(model):
    img = model.field.values.astype(np.float32)
    masks = {"shape": model.shape.mask}
    c = (model.roi.cx, model.roi.cy)
    a = apply_geometric(img, masks, VariationParams(shift_x=20), model.shape, center=c)
    b = apply_geometric(a.image, a.masks, VariationParams(shift_x=-20), model.shape, center=c)
    untouched = np.zeros((200, 600), bool)
    untouched[:, 20:580] = True
    assert iou(b.masks["shape"] & untouched, model.shape.mask & untouched) >= 0.98
    assert np.allclose(b.image[:, 20:580], img[:, 20:580], atol=1e-6)


def test_rotation_preserves_centred_disc(model):
    yy, xx = np.mgrid[:200, :600]
    disc = ((xx - 300) ** 2 + (yy - 100) ** 2 <= 60**2).astype(np.uint8)
    r = apply_geometric(
        disc.astype(np.float32), {"disc": disc}, VariationParams(rotation=20), model.shape, center=(300, 100)
    )
    assert iou(r.masks["disc"], disc) >= 0.98


def test_shift_moves_annotations(model):
    r = apply_geometric(
        model.field.values, {"shape": model.shape.mask}, VariationParams(shift_x=-12.5),
        model.shape, joints=model.joints, roi=model.roi,
    )
    assert np.allclose(r.joints.centers, model.joints.centers + [-12.5, 0])
    assert r.roi.cx == pytest.approx(model.roi.cx - 12.5, abs=1e-9) or r.roi.x0 == 0.0
    assert np.allclose(r.joints.radii, model.joints.radii)


def test_scale_about_roi_centre(model):
    p = VariationParams(scale=1.1)
    pts, vis = forward_points([[model.roi.cx, model.roi.cy], [model.roi.cx + 100, model.roi.cy]], p, model.shape, (model.roi.cx, model.roi.cy))
    assert np.allclose(pts[0], [model.roi.cx, model.roi.cy])
    assert np.allclose(pts[1], [model.roi.cx + 110, model.roi.cy])
    assert vis.all()


@pytest.mark.parametrize("p", [
    VariationParams(roll=15),
    VariationParams(roll=-20, rotation=8, scale=0.9),
    VariationParams(shift_x=11, rotation=-13.5, scale=1.12),
])
def test_forward_and_inverse_agree(model, p):
    c = (model.roi.cx, model.roi.cy)
    rng = make_rng(4)
    ys, xs = np.nonzero(model.shape.mask)
    idx = rng.choice(len(xs), 400, replace=False)
    src = np.column_stack([xs[idx], ys[idx]]).astype(float)
    # keep away from the silhouette edge where the roll is undefined
    src = src[np.abs(src[:, 1] - model.shape.mid_at(src[:, 0])) < 0.7 * model.shape.half_at(src[:, 0])]
    dst, visible = forward_points(src, p, model.shape, c)
    mx, my, valid = inverse_maps(p, model.shape, c)
    ok = visible & (dst[:, 0] >= 0) & (dst[:, 0] <= 598) & (dst[:, 1] >= 0) & (dst[:, 1] <= 198)
    for (x, y), (sx, sy) in zip(dst[ok], src[ok]):
        # bilinear lookup of the inverse map at the forward image
        x0, y0 = int(x), int(y)
        fx, fy = x - x0, y - y0
        def look(m):
            return (m[y0, x0] * (1 - fx) * (1 - fy) + m[y0, x0 + 1] * fx * (1 - fy)
                    + m[y0 + 1, x0] * (1 - fx) * fy + m[y0 + 1, x0 + 1] * fx * fy)
        assert abs(look(mx) - sx) < 0.05
        assert abs(look(my) - sy) < 0.6


def test_roll_keeps_silhouette_and_clears_hidden_surface(model):
    veins = np.zeros((200, 600), np.uint8)
    cols = slice(150, 450)
    mid = model.shape.midline
    half = model.shape.halfwidth
    for x in range(150, 450):
        y_edge = int(mid[x] - 0.97 * half[x])
        veins[y_edge, x] = 1  # a line close to the upper edge
        veins[int(mid[x]), x] = 1  # a line on the midline
    r = apply_geometric(
        model.field.values, {"shape": model.shape.mask, "veins": veins},
        VariationParams(roll=20), model.shape, roi=model.roi,
    )
    assert iou(r.masks["shape"], model.shape.mask) >= 0.99
    # the midline moves down by R sin(20deg), the upper line stays visible,
    # and surface from behind the upper edge is empty
    moved = r.masks["veins"][:, cols]
    assert moved.sum() > 0
    top_band = np.zeros_like(veins)
    for x in range(150, 450):
        top_band[int(mid[x] - half[x]) + 1 : int(mid[x] - 0.93 * half[x]), x] = 1
    assert (r.masks["veins"] & top_band).sum() == 0
    expect = (mid[300] + half[300] * math.sin(math.radians(20)))
    rows = np.nonzero(r.masks["veins"][:, 300])[0]
    assert np.min(np.abs(rows - expect)) <= 1.5


def test_degenerate_sample_raises(model):
    p = VariationParams(rotation=20, scale=1.15)
    with pytest.raises(DegenerateSampleError):
        apply_geometric(model.field.values, {}, p, model.shape, roi=model.roi, max_outside=0.05)


def test_worst_case_plan_stays_in_frame():
    for s in range(10):
        m = build_finger_model(s)
        for p in build_plan(s):
            assert out_of_frame_fraction(m.shape, p, (m.roi.cx, m.roi.cy)) <= 0.3


# -- photometric -------------------------------------------------------------------


def test_gain_one_no_blur_identical():
    img = make_rng(2).random((50, 60)).astype(np.float32)
    out = apply_photometric(img, VariationParams(exposure=1.0))
    assert out.tobytes() == img.tobytes()
    assert apply_photometric(img, VariationParams()).tobytes() == img.tobytes()


@pytest.mark.parametrize("blur", [
    Blur("motion", 15, 33.0), Blur("motion", 4, 90.0), Blur("optical", 5.0),
    Blur("optical", 1.7), Blur("scattering", 9.0), Blur("scattering", 4.5),
])
def test_kernels_preserve_flux_and_constants(blur):
    k = blur_kernel(blur)
    assert abs(k.sum() - 1.0) <= 1e-9
    assert np.all(k >= 0)
    img = np.full((80, 120), 0.42, np.float32)
    out = apply_photometric(img, VariationParams(blur=blur))
    h = k.shape[0] // 2 + 1
    assert np.allclose(out[h:-h, h:-h], 0.42, atol=1e-6)


def test_motion_impulse_response():
    k = motion_kernel(9, 0.0)
    img = np.zeros((31, 31))
    img[15, 15] = 1.0
    out = convolve(img, k)
    nz = np.argwhere(out > 1e-12)
    assert len(nz) == 9
    assert set(nz[:, 0]) == {15} and sorted(nz[:, 1]) == list(range(11, 20))
    assert np.allclose(out[out > 1e-12], 1 / 9)
    assert abs(out.sum() - 1.0) <= 1e-9
    vert = convolve(img, motion_kernel(9, 90.0))
    nz = np.argwhere(vert > 1e-12)
    assert len(nz) == 9 and set(nz[:, 1]) == {15}


def test_motion_kernel_centred_at_any_angle():
    for a in np.linspace(0, 180, 13):
        k = motion_kernel(7, a)
        c = k.shape[0] // 2
        yy, xx = np.mgrid[: k.shape[0], : k.shape[1]]
        assert abs((k * xx).sum() - c) < 1e-9 and abs((k * yy).sum() - c) < 1e-9


def test_optical_and_scattering_symmetric():
    for k in (optical_kernel(3.3), scattering_kernel(6.0)):
        assert np.allclose(k, k[::-1]) and np.allclose(k, k.T)


def test_photometric_range_and_determinism():
    img = make_rng(3).random((100, 100)).astype(np.float32)
    for p in build_plan(4):
        if p.is_photometric_identity:
            continue
        out = apply_photometric(img, p, seed=1)
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert out.tobytes() == apply_photometric(img, p, seed=1).tobytes()


def test_exposure_gain_applied():
    img = np.full((10, 10), 0.5, np.float32)
    assert np.allclose(apply_photometric(img, VariationParams(exposure=0.6)), 0.3)
    assert np.allclose(apply_photometric(img, VariationParams(exposure=1.75)), 0.875)
    assert np.allclose(apply_photometric(np.full((4, 4), 0.9, np.float32), VariationParams(exposure=1.5)), 1.0)


def test_nan_motion_angle_comes_from_seed():
    img = make_rng(5).random((40, 40)).astype(np.float32)
    p = VariationParams(blur=Blur("motion", 9, float("nan")))
    assert np.array_equal(apply_photometric(img, p, 3), apply_photometric(img, p, 3))
    assert not np.array_equal(apply_photometric(img, p, 3), apply_photometric(img, p, 4))
