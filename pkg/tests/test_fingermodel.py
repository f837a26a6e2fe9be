import cv2
import numpy as np
import pytest

from veinsynth.fingermodel import (
    FRAME,
    FingerModelError,
    JointCavities,
    RoiBox,
    brightness_field,
    build_finger_model,
    compute_roi,
    finger_params,
    place_joints,
    sample_finger,
    shape_from_params,
)
from veinsynth.renderer import joint_specs, region_margin
from veinsynth.seeding import derive_seed

N_SEEDS = 1000


def _one_component(mask):
    n, _ = cv2.connectedComponents(mask.astype(np.uint8), connectivity=4)
    return n - 1 == 1


@pytest.fixture(scope="module")
def population():
    out = []
    for i in range(N_SEEDS):
        shape = sample_finger(derive_seed(7, i, "shape"))
        joints = place_joints(shape, derive_seed(7, i, "joints"))
        out.append((shape, joints, compute_roi(shape, joints)))
    return out


# -- shape -----------------------------------------------------------------


def test_same_seed_same_mask():
    assert np.array_equal(sample_finger(11).mask, sample_finger(11).mask)


def test_zero_perturbation_capsule_is_symmetric():
    shape = sample_finger(5, perturbation=0.0)
    m = shape.mask.astype(bool)
    assert m.shape == FRAME
    # symmetric about the horizontal midline (y = 99.5) within one pixel
    for c in np.nonzero(m.any(axis=0))[0]:
        rows = np.nonzero(m[:, c])[0]
        centre = (rows[0] + rows[-1]) / 2
        assert abs(centre - (FRAME[0] - 1) / 2) <= 1.0


def test_population_shape_invariants(population):
    contours = set()
    widths = []
    for shape, _, _ in population:
        assert _one_component(shape.mask)
        assert shape.convex_deficiency() <= 0.1
        contours.add(shape.contour.astype(np.int16).tobytes())
        widths.append(shape.mean_width())
    assert len(contours) == N_SEEDS
    assert 90 <= min(widths) and max(widths) <= 160


def test_contour_traces_mask_border():
    shape = sample_finger(3)
    c = shape.contour.astype(int)
    assert np.all(shape.mask[c[:, 1], c[:, 0]] == 1)


# -- joints ----------------------------------------------------------------


def test_joints_on_midline_of_capsule():
    shape = sample_finger(9, perturbation=0.0, taper=False)
    joints = place_joints(shape, 4)
    for x, y in joints.centers:
        assert abs(y - shape.mid_at(x)) <= 1.0


def test_joint_invariants(population):
    fracs = []
    for shape, joints, _ in population:
        (x0, y0), (x1, y1) = joints.centers
        assert x0 < x1
        assert x1 - x0 >= 0.25 * shape.length
        for x, y in joints.centers:
            assert shape.mask[int(round(y)), int(round(x))] == 1
        assert np.all((joints.radii >= 12) & (joints.radii <= 20))
        fracs.append((joints.centers[:, 0] - shape.base_x) / shape.length)
    fracs = np.array(fracs)
    # placements stay in and cover the configured ranges
    assert fracs[:, 0].min() >= 0.30 and fracs[:, 0].max() <= 0.40
    assert fracs[:, 1].min() >= 0.60 and fracs[:, 1].max() <= 0.72
    for col, (lo, hi) in enumerate(((0.30, 0.40), (0.60, 0.72))):
        hist, _ = np.histogram(fracs[:, col], bins=5, range=(lo, hi))
        assert np.all(hist > 0)
        assert fracs[:, col].min() < lo + 0.02 and fracs[:, col].max() > hi - 0.02


def test_place_joints_deterministic():
    shape = sample_finger(2)
    a, b = place_joints(shape, 77), place_joints(shape, 77)
    assert np.array_equal(a.centers, b.centers) and np.array_equal(a.radii, b.radii)


def test_short_finger_rejected():
    p = finger_params(1)
    short = shape_from_params(
        type(p)(base_x=200, tip_x=260, mid_offset=0, bend=0, width_base=130, width_tip=130)
    )
    with pytest.raises(FingerModelError):
        place_joints(short, 1)


# -- ROI -------------------------------------------------------------------


def test_capsule_roi_centred_on_centroid():
    shape = sample_finger(12, perturbation=0.0, taper=False)
    joints = place_joints(shape, 12)
    roi = compute_roi(shape, joints)
    ys, xs = np.nonzero(shape.mask)
    assert abs(roi.cx - xs.mean()) <= 2.0
    assert abs(roi.cy - ys.mean()) <= 2.0


def test_roi_expands_for_joints_near_ends():
    shape = sample_finger(12, perturbation=0.0, taper=False)
    x_near = shape.base_x + 0.05 * shape.length
    joints = JointCavities(
        np.array([[x_near, shape.mid_at(x_near)], [shape.base_x + 0.7 * shape.length, 99.5]]),
        np.array([15.0, 15.0]),
    )
    roi = compute_roi(shape, joints)
    assert roi.x0 <= x_near - 15.0 + 1e-9
    assert roi.contains(*joints.centers[0], r=15.0 - 1e-9)


def test_roi_population(population):
    for shape, joints, roi in population:
        ys, xs = np.nonzero(shape.mask)
        assert roi.x0 >= xs.min() - 1e-9 and roi.x1 <= xs.max() + 1e-9
        assert roi.y0 >= ys.min() - 1e-9 and roi.y1 <= ys.max() + 1e-9
        for (cx, cy), r in zip(joints.centers, joints.radii):
            assert roi.contains(cx, cy, r)


def test_roi_from_bounds_roundtrip():
    roi = RoiBox.from_bounds(10, 20, 110, 70)
    assert (roi.x0, roi.y0, roi.x1, roi.y1) == (10, 20, 110, 70)


# -- brightness field --------------------------------------------------------


def _smoothness(values):
    return max(np.abs(np.diff(values, axis=0)).max(), np.abs(np.diff(values, axis=1)).max())


def test_field_without_joints_is_tissue_only():
    shape = sample_finger(4)
    joints = place_joints(shape, 4)
    f = brightness_field(shape, joints, 4, amplitude=0.0)
    assert np.array_equal(f.values, f.tissue)
    inner = cv2.erode(shape.mask, np.ones((61, 61), np.uint8)).astype(bool)
    assert np.allclose(f.values[inner], 0.55)
    assert np.all(f.values[shape.mask == 0] == 0)


def test_field_deterministic():
    shape = sample_finger(4)
    joints = place_joints(shape, 4)
    a, b = brightness_field(shape, joints, 9), brightness_field(shape, joints, 9)
    assert np.array_equal(a.values, b.values)


def test_field_population():
    for i in range(200):
        m = build_finger_model(derive_seed(3, i, "model"))
        v = m.field.values
        assert v.min() >= 0.0 and v.max() <= 1.0
        assert _smoothness(v) <= 0.05
        for (cx, cy), a in zip(m.joints.centers, m.field.amplitudes):
            peak = v[int(round(cy)), int(round(cx))] - m.field.tissue[int(round(cy)), int(round(cx))]
            assert peak >= 0.15
        for spec in joint_specs(m.joints, m.shape.mask, 0.1):
            assert region_margin(v, spec) >= 0.1
