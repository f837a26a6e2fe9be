"""Intra-class variation plan and the transforms that realise it.

Each identity gets 100 samples: 50 single-effect samples with magnitudes
evenly spaced over their ranges, followed by 50 random combinations.

Geometric variations act in the 200 x 600 finger frame. The forward map of
a base-frame point is

    roll (cylindrical surface rotation about the finger axis)
    then scale and rotate about the ROI centre
    then shift along x.

Rotation follows the OpenCV convention: positive angles turn the image
counter-clockwise as displayed (y pointing down). Positive roll moves the
finger surface towards +y.

Roll treats each column of the finger as the cross-section of a cylinder
with radius equal to the local half-width ``R`` centred on the midline
``c``: a surface point at ``y = c + R sin(a)`` moves to ``c + R sin(a + roll)``.
Surface that rolls past the silhouette edge disappears, and surface that
was hidden in the base view has no content (masks are cleared there).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import cv2
import numpy as np

from .fingermodel import FingerShape, JointCavities, RoiBox
from .renderer import convolve, exponential_psf
from .seeding import make_rng

logger = logging.getLogger(__name__)

SHIFT_RANGE = 20.0
ROTATION_RANGE = 20.0
ROLL_RANGE = 20.0
SCALE_RANGE = (0.85, 1.15)
UNDER_GAIN = (0.55, 0.8)
OVER_GAIN = (1.25, 1.75)
MOTION_LENGTH = (3, 15)
OPTICAL_RADIUS = (1.0, 5.0)
SCATTER_SCALE = (4.5, 9.0)

GEOMETRIC_KINDS = ("shift", "scale", "roll", "rotation")
PHOTOMETRIC_KINDS = ("under", "over", "motion", "optical", "scattering")
BLUR_KINDS = ("motion", "optical", "scattering")

# (category, count) in plan order; the remainder of the 100 are combinations.
# The five exposure samples are split over the two gain bands.
SINGLE_COUNTS = (
    ("shift", 5),
    ("scale", 5),
    ("roll", 9),
    ("rotation", 11),
    ("under", 2),
    ("over", 3),
    ("motion", 5),
    ("optical", 5),
    ("scattering", 5),
)
PLAN_SIZE = 100


class VariationError(ValueError):
    pass


class DegenerateSampleError(VariationError):
    """A transform pushes too much of the finger out of the frame."""


@dataclass(frozen=True)
class Blur:
    """One blur effect; ``magnitude`` is the length, radius or scale in px."""

    kind: str
    magnitude: float
    angle: float = 0.0

    def __post_init__(self):
        if self.kind not in BLUR_KINDS:
            raise VariationError(f"unknown blur kind {self.kind!r}")
        lo, hi = {
            "motion": MOTION_LENGTH,
            "optical": OPTICAL_RADIUS,
            "scattering": SCATTER_SCALE,
        }[self.kind]
        if not lo - 1e-9 <= self.magnitude <= hi + 1e-9:
            raise VariationError(f"{self.kind} blur magnitude {self.magnitude} outside [{lo}, {hi}]")
        if self.kind == "motion" and int(self.magnitude) != self.magnitude:
            raise VariationError("motion blur length must be a whole number of pixels")


@dataclass(frozen=True)
class VariationParams:
    """Variation of one sample relative to the centre view."""

    shift_x: float = 0.0
    rotation: float = 0.0
    scale: float = 1.0
    roll: float = 0.0
    exposure: float | None = None
    blur: Blur | None = None
    combo: bool = False
    category: str = "center"

    def __post_init__(self):
        check_ranges(self)

    @property
    def is_geometric_identity(self) -> bool:
        return self.shift_x == 0 and self.rotation == 0 and self.scale == 1 and self.roll == 0

    @property
    def is_photometric_identity(self) -> bool:
        return (self.exposure is None or self.exposure == 1.0) and self.blur is None

    @property
    def geometric_only(self) -> bool:
        return self.is_photometric_identity


def check_ranges(p: VariationParams) -> None:
    eps = 1e-9
    if abs(p.shift_x) > SHIFT_RANGE + eps:
        raise VariationError(f"shift_x {p.shift_x} outside ±{SHIFT_RANGE}")
    if abs(p.rotation) > ROTATION_RANGE + eps:
        raise VariationError(f"rotation {p.rotation} outside ±{ROTATION_RANGE}")
    if abs(p.roll) > ROLL_RANGE + eps:
        raise VariationError(f"roll {p.roll} outside ±{ROLL_RANGE}")
    if not SCALE_RANGE[0] - eps <= p.scale <= SCALE_RANGE[1] + eps:
        raise VariationError(f"scale {p.scale} outside {SCALE_RANGE}")
    if p.exposure is not None and p.exposure != 1.0:
        under = UNDER_GAIN[0] - eps <= p.exposure <= UNDER_GAIN[1] + eps
        over = OVER_GAIN[0] - eps <= p.exposure <= OVER_GAIN[1] + eps
        if not (under or over):
            raise VariationError(f"exposure gain {p.exposure} outside the under/over bands")


@dataclass
class VariationPlan:
    seed: int
    samples: list[VariationParams] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def counts(self) -> dict[str, int]:
        """Samples per category; under and over exposure count as ``exposure``."""
        out: dict[str, int] = {}
        for p in self.samples:
            key = "combination" if p.combo else p.category
            if key in ("under", "over"):
                key = "exposure"
            out[key] = out.get(key, 0) + 1
        return out


# ---------------------------------------------------------------------------
# plan


def _q(v: float, digits: int = 4) -> float:
    """Round so that six significant digits reproduce the value exactly."""
    return float(round(float(v), digits))


def _single(kind: str, value: float, angle: float = 0.0) -> VariationParams:
    value, angle = _q(value), _q(angle, 3)
    if kind == "shift":
        return VariationParams(shift_x=value, category=kind)
    if kind == "scale":
        return VariationParams(scale=value, category=kind)
    if kind == "roll":
        return VariationParams(roll=value, category=kind)
    if kind == "rotation":
        return VariationParams(rotation=value, category=kind)
    if kind in ("under", "over"):
        return VariationParams(exposure=value, category=kind)
    return VariationParams(blur=Blur(kind, value, angle), category=kind)


def _single_values(kind: str, n: int) -> np.ndarray:
    if kind == "shift":
        return np.linspace(-SHIFT_RANGE, SHIFT_RANGE, n)
    if kind == "scale":
        return np.linspace(*SCALE_RANGE, n)
    if kind == "roll":
        return np.linspace(-ROLL_RANGE, ROLL_RANGE, n)
    if kind == "rotation":
        return np.linspace(-ROTATION_RANGE, ROTATION_RANGE, n)
    if kind == "under":
        return np.linspace(*UNDER_GAIN, n)
    if kind == "over":
        return np.linspace(*OVER_GAIN, n)
    if kind == "motion":
        return np.rint(np.linspace(*MOTION_LENGTH, n))
    if kind == "optical":
        return np.linspace(*OPTICAL_RADIUS, n)
    return np.linspace(*SCATTER_SCALE, n)


def _draw_effect(kind: str, rng: np.random.Generator) -> dict:
    if kind == "shift":
        return {"shift_x": _q(rng.uniform(-SHIFT_RANGE, SHIFT_RANGE))}
    if kind == "scale":
        return {"scale": _q(rng.uniform(*SCALE_RANGE))}
    if kind == "roll":
        return {"roll": _q(rng.uniform(-ROLL_RANGE, ROLL_RANGE))}
    if kind == "rotation":
        return {"rotation": _q(rng.uniform(-ROTATION_RANGE, ROTATION_RANGE))}
    if kind == "under":
        return {"exposure": _q(rng.uniform(*UNDER_GAIN))}
    if kind == "over":
        return {"exposure": _q(rng.uniform(*OVER_GAIN))}
    if kind == "motion":
        length = int(rng.integers(MOTION_LENGTH[0], MOTION_LENGTH[1] + 1))
        return {"blur": Blur("motion", float(length), _q(rng.uniform(0, 180), 3))}
    if kind == "optical":
        return {"blur": Blur("optical", _q(rng.uniform(*OPTICAL_RADIUS)))}
    return {"blur": Blur("scattering", _q(rng.uniform(*SCATTER_SCALE)))}


def build_plan(
    seed: int, p_single_geometric: float = 0.7, single_counts=SINGLE_COUNTS, size: int = PLAN_SIZE
) -> VariationPlan:
    """The 100-sample plan for one identity; deterministic in ``seed``.

    Single-effect magnitudes are evenly spaced over their ranges. Motion
    blur angles and every combination parameter come from ``seed``. Values
    are rounded (4 decimals, angles 3) so the 6-significant-digit
    annotation format stores them exactly. A
    combination holds one geometric and one photometric effect with
    probability ``p_single_geometric``, otherwise two distinct geometric
    effects and one photometric effect.
    """
    if sum(n for _, n in single_counts) > size:
        raise VariationError("single-effect counts exceed the plan size")
    rng = make_rng(seed)
    samples: list[VariationParams] = []
    for kind, n in single_counts:
        values = _single_values(kind, n)
        for v in values:
            angle = float(rng.uniform(0, 180)) if kind == "motion" else 0.0
            samples.append(_single(kind, float(v), angle))
    while len(samples) < size:
        n_geo = 1 if rng.random() < p_single_geometric else 2
        geo = rng.choice(len(GEOMETRIC_KINDS), size=n_geo, replace=False)
        photo = PHOTOMETRIC_KINDS[int(rng.integers(len(PHOTOMETRIC_KINDS)))]
        kinds = [GEOMETRIC_KINDS[int(i)] for i in sorted(geo)] + [photo]
        kw: dict = {}
        for k in kinds:
            kw.update(_draw_effect(k, rng))
        samples.append(VariationParams(combo=True, category="+".join(kinds), **kw))
    return VariationPlan(seed, samples)


# ---------------------------------------------------------------------------
# geometric transforms


def affine_matrix(p: VariationParams, center) -> np.ndarray:
    """2x3 forward affine: scale and rotate about ``center``, then shift x."""
    M = cv2.getRotationMatrix2D((float(center[0]), float(center[1])), float(p.rotation), float(p.scale))
    M[0, 2] += p.shift_x
    return M


def _roll_forward(x, y, shape: FingerShape, roll_deg: float):
    """Forward roll of points; returns new y and a visibility flag."""
    c = shape.mid_at(x)
    R = shape.half_at(x)
    on = R > 0.5
    y = np.asarray(y, dtype=float)
    t = np.where(on, (y - c) / np.where(on, R, 1.0), 0.0)
    a = np.arcsin(np.clip(t, -1.0, 1.0)) + math.radians(roll_deg)
    visible = ~on | (np.abs(a) <= math.pi / 2)
    y_new = np.where(on, c + R * np.sin(np.clip(a, -math.pi / 2, math.pi / 2)), y)
    return y_new, visible


def forward_points(points, p: VariationParams, shape: FingerShape, center) -> tuple[np.ndarray, np.ndarray]:
    """Map base-frame ``(x, y)`` points into the sample frame.

    Returns the mapped points and a boolean array that is False where the
    roll carried the point onto the hidden side of the finger.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    x = pts[:, 0]
    y, visible = _roll_forward(x, pts[:, 1], shape, p.roll) if p.roll else (pts[:, 1], np.ones(len(pts), bool))
    M = affine_matrix(p, center)
    out = np.column_stack([x, y]) @ M[:, :2].T + M[:, 2]
    return out, visible


def inverse_maps(p: VariationParams, shape: FingerShape, center, frame=None):
    """Per-pixel source coordinates for warping a base-frame raster.

    Returns ``(map_x, map_y, valid)``: float32 maps for :func:`cv2.remap`
    and a mask that is False where the sample shows surface hidden in the
    base view. Outside the silhouette the roll is the identity.
    """
    H, W = frame or shape.mask.shape
    Minv = cv2.invertAffineTransform(affine_matrix(p, center))
    yy, xx = np.mgrid[:H, :W].astype(np.float64)
    sx = Minv[0, 0] * xx + Minv[0, 1] * yy + Minv[0, 2]
    sy = Minv[1, 0] * xx + Minv[1, 1] * yy + Minv[1, 2]
    valid = np.ones((H, W), bool)
    if p.roll:
        c = shape.mid_at(sx)
        R = shape.half_at(sx)
        t = (sy - c) / np.maximum(R, 1e-9)
        inside = (R > 0.5) & (np.abs(t) <= 1.0)
        a = np.arcsin(np.clip(t, -1.0, 1.0)) - math.radians(p.roll)
        valid = ~inside | (np.abs(a) <= math.pi / 2)
        # hidden surface samples the silhouette edge, half a pixel inside so
        # nearest-neighbour lookups stay on the finger
        y_roll = np.where(
            valid, c + R * np.sin(np.clip(a, -math.pi / 2, math.pi / 2)),
            c + np.sign(a) * np.maximum(R - 0.5, 0.0),
        )
        sy = np.where(inside, y_roll, sy)
    return sx.astype(np.float32), sy.astype(np.float32), valid


@dataclass
class GeometricResult:
    image: np.ndarray
    masks: dict[str, np.ndarray]
    joints: JointCavities | None
    roi: RoiBox | None
    outside_fraction: float = 0.0


def out_of_frame_fraction(shape: FingerShape, p: VariationParams, center) -> float:
    """Fraction of silhouette pixels mapped outside the frame."""
    ys, xs = np.nonzero(shape.mask)
    if len(xs) == 0:
        raise VariationError("empty shape mask")
    pts, _ = forward_points(np.column_stack([xs, ys]), p, shape, center)
    H, W = shape.mask.shape
    inside = (pts[:, 0] >= -0.5) & (pts[:, 0] < W - 0.5) & (pts[:, 1] >= -0.5) & (pts[:, 1] < H - 0.5)
    return float(1.0 - inside.mean())


def transform_joints(joints: JointCavities, p, shape, center) -> JointCavities:
    pts, _ = forward_points(joints.centers, p, shape, center)
    return JointCavities(pts, joints.radii * p.scale)


def transform_roi(roi: RoiBox, p, shape, center, frame=None) -> RoiBox:
    """Move the ROI centre with the sample and scale its extent; clip to the frame."""
    H, W = frame or shape.mask.shape
    pts, _ = forward_points([[roi.cx, roi.cy]], p, shape, center)
    cx, cy = pts[0]
    box = RoiBox(float(cx), float(cy), roi.width * p.scale, roi.height * p.scale)
    x0, y0 = max(box.x0, 0.0), max(box.y0, 0.0)
    x1, y1 = min(box.x1, float(W)), min(box.y1, float(H))
    return RoiBox.from_bounds(x0, y0, x1, y1)


def apply_geometric(
    img: np.ndarray,
    masks: Mapping[str, np.ndarray],
    p: VariationParams,
    shape: FingerShape,
    *,
    joints: JointCavities | None = None,
    roi: RoiBox | None = None,
    center=None,
    max_outside: float = 0.3,
    surface_masks=("veins", "pattern"),
) -> GeometricResult:
    """Warp an image and its masks by ``p`` and move the annotations with them.

    ``img`` may have up to four channels and is sampled bilinearly; masks use
    nearest-neighbour sampling. Masks named in ``surface_masks`` are cleared
    where the roll exposes surface hidden in the base view. ``center``
    defaults to the ROI centre.
    """
    if center is None:
        if roi is None:
            raise VariationError("need an ROI or an explicit transform centre")
        center = (roi.cx, roi.cy)
    if p.is_geometric_identity:
        return GeometricResult(
            img.copy(), {k: v.copy() for k, v in masks.items()}, joints, roi, 0.0
        )
    outside = out_of_frame_fraction(shape, p, center)
    if outside > max_outside:
        raise DegenerateSampleError(
            f"{outside:.1%} of the finger leaves the frame (limit {max_outside:.0%})"
        )
    H, W = img.shape[:2]
    warped = {}
    if p.roll:
        mx, my, valid = inverse_maps(p, shape, center, (H, W))
        out = cv2.remap(img, mx, my, cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
        for name, m in masks.items():
            w = cv2.remap(m.astype(np.uint8), mx, my, cv2.INTER_NEAREST, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
            if name in surface_masks:
                w &= valid.astype(np.uint8)
            warped[name] = w
    else:
        # pure affine: the direct warp is equivalent and cheaper than a remap
        M = affine_matrix(p, center)
        out = cv2.warpAffine(img, M, (W, H), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
        for name, m in masks.items():
            warped[name] = cv2.warpAffine(
                m.astype(np.uint8), M, (W, H), flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_CONSTANT, borderValue=0
            )
    return GeometricResult(
        out,
        warped,
        transform_joints(joints, p, shape, center) if joints is not None else None,
        transform_roi(roi, p, shape, center, (H, W)) if roi is not None else None,
        outside,
    )


def aligned_roi(
    img: np.ndarray, p: VariationParams, shape: FingerShape, center, base_roi: RoiBox, out_shape=(200, 600)
) -> np.ndarray:
    """Crop the centre-view ROI out of a posed sample.

    Each output pixel is placed in the base frame exactly as
    :func:`veinsynth.renderer.crop_roi` would place it in ``base_roi``,
    carried into the sample by the forward pose map and sampled bilinearly.
    This undoes shift, rotation, scale and roll using only the recorded
    parameters; surface that the roll hid stays unrecoverable.
    """
    oh, ow = out_shape
    xs = base_roi.x0 + (np.arange(ow) + 0.5) * (base_roi.width / ow) - 0.5
    ys = base_roi.y0 + (np.arange(oh) + 0.5) * (base_roi.height / oh) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    pts, _ = forward_points(np.column_stack([gx.ravel(), gy.ravel()]), p, shape, center)
    mx = pts[:, 0].reshape(oh, ow).astype(np.float32)
    my = pts[:, 1].reshape(oh, ow).astype(np.float32)
    src = np.asarray(img, dtype=np.float32)
    return cv2.remap(src, mx, my, cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0)


# ---------------------------------------------------------------------------
# photometric transforms


def motion_kernel(length: int, angle_deg: float) -> np.ndarray:
    """Normalised line kernel: ``length`` unit-spaced taps along the angle.

    Each tap carries weight ``1/length`` and is split bilinearly over its
    neighbouring pixels, so horizontal and vertical kernels have exactly
    ``length`` equal non-zero weights.
    """
    length = int(length)
    if length < 1:
        raise VariationError("motion blur length must be >= 1")
    half = (length - 1) / 2
    size = 2 * int(math.ceil(half)) + 3
    k = np.zeros((size, size))
    c = size // 2
    a = math.radians(angle_deg)
    ca, sa = math.cos(a), math.sin(a)
    # snap tiny trig residue so axis-aligned kernels land on pixel centres
    ca, sa = round(ca, 12), round(sa, 12)
    for i in range(length):
        s = i - half
        x, y = c + s * ca, c - s * sa
        x0, y0 = math.floor(x), math.floor(y)
        fx, fy = x - x0, y - y0
        w = 1.0 / length
        k[y0, x0] += w * (1 - fx) * (1 - fy)
        k[y0, x0 + 1] += w * fx * (1 - fy)
        k[y0 + 1, x0] += w * (1 - fx) * fy
        k[y0 + 1, x0 + 1] += w * fx * fy
    return k / k.sum()


def optical_kernel(radius: float) -> np.ndarray:
    """Normalised uniform disc (defocus) kernel."""
    r = int(math.ceil(radius))
    ax = np.arange(-r, r + 1, dtype=float)
    xx, yy = np.meshgrid(ax, ax)
    k = (np.hypot(xx, yy) <= radius + 1e-9).astype(float)
    return k / k.sum()


def scattering_kernel(scale: float) -> np.ndarray:
    """The renderer's exponential PSF at a larger scale."""
    return exponential_psf(int(math.ceil(3 * scale)), scale)


def blur_kernel(blur: Blur) -> np.ndarray:
    if blur.kind == "motion":
        return motion_kernel(int(blur.magnitude), blur.angle)
    if blur.kind == "optical":
        return optical_kernel(blur.magnitude)
    return scattering_kernel(blur.magnitude)


def apply_photometric(img: np.ndarray, p: VariationParams, seed: int = 0) -> np.ndarray:
    """Blur then exposure gain, clipped to [0, 1].

    A motion blur whose angle is NaN takes its angle from ``seed``; all
    other effects are fully specified by ``p``.
    """
    out = np.asarray(img, dtype=np.float32)
    if p.blur is not None:
        blur = p.blur
        if blur.kind == "motion" and math.isnan(blur.angle):
            blur = replace(blur, angle=float(make_rng(seed).uniform(0, 180)))
        out = convolve(out, blur_kernel(blur).astype(np.float32))
    if p.exposure is not None and p.exposure != 1.0:
        out = out * np.float32(p.exposure)
    if p.blur is None and (p.exposure is None or p.exposure == 1.0):
        return out.copy()
    return np.clip(out, 0.0, 1.0)
