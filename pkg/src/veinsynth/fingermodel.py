"""Procedural finger anatomy: silhouette, joint cavities, ROI and brightness.

The finger lies along ``x`` (base on the left, tip on the right) in a
200 x 600 frame. Its silhouette is a tapered capsule whose half-width
profile is perturbed by a few low-frequency sinusoids and whose midline may
bend slightly. Both ends are closed by elliptical caps.

Joint cavities are two discs on the midline. The brightness field is a flat
tissue level that falls off smoothly towards the silhouette edge, plus one
flat-topped radial bump per joint.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from scipy import ndimage

from .seeding import derive_seed, make_rng

FRAME = (200, 600)


class FingerModelError(ValueError):
    pass


@dataclass(frozen=True)
class FingerParams:
    base_x: float
    tip_x: float
    mid_offset: float
    bend: float
    width_base: float
    width_tip: float
    amps: tuple[float, ...] = ()
    phases: tuple[float, ...] = ()
    cap_fraction: float = 0.8

    @property
    def length(self) -> float:
        return self.tip_x - self.base_x


@dataclass
class FingerShape:
    """Binary silhouette ``mask`` plus its per-column midline and half-width."""

    mask: np.ndarray
    params: FingerParams
    midline: np.ndarray
    halfwidth: np.ndarray
    seed: int = 0

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "FingerShape":
        """Recover midline and half-width per column from a stored silhouette.

        Mask rows satisfy ``|y - mid| <= half``, so the first and last row of
        a column give ``mid`` exactly and ``half`` to within half a pixel.
        """
        m = np.asarray(mask).astype(bool)
        H, W = m.shape
        cols = m.any(axis=0)
        top = m.argmax(axis=0)
        bottom = H - 1 - m[::-1].argmax(axis=0)
        mid = np.where(cols, (top + bottom) / 2.0, np.nan)
        half = np.where(cols, (bottom - top) / 2.0 + 0.5, 0.0)
        idx = np.nonzero(cols)[0]
        if len(idx) == 0:
            raise FingerModelError("empty shape mask")
        mid = np.interp(np.arange(W), idx, mid[idx])
        params = FingerParams(
            base_x=float(idx[0]), tip_x=float(idx[-1]), mid_offset=0.0, bend=0.0,
            width_base=float(2 * half[idx[0]]), width_tip=float(2 * half[idx[-1]]),
        )
        return cls(m.astype(np.uint8), params, mid, half)

    @property
    def length(self) -> float:
        return self.params.length

    @property
    def base_x(self) -> float:
        return self.params.base_x

    @property
    def tip_x(self) -> float:
        return self.params.tip_x

    def mid_at(self, x) -> np.ndarray:
        cols = np.arange(self.mask.shape[1])
        return np.interp(x, cols, self.midline)

    def half_at(self, x) -> np.ndarray:
        cols = np.arange(self.mask.shape[1])
        return np.interp(x, cols, self.halfwidth)

    @property
    def contour(self) -> np.ndarray:
        """Closed outline: top edge base-to-tip, then bottom edge tip-to-base."""
        cols = np.nonzero(self.mask.any(axis=0))[0]
        top = self.mask[:, cols].argmax(axis=0)
        bottom = self.mask.shape[0] - 1 - self.mask[::-1, cols].argmax(axis=0)
        return np.vstack(
            [np.column_stack([cols, top]), np.column_stack([cols[::-1], bottom[::-1]])]
        ).astype(float)

    def mean_width(self) -> float:
        counts = self.mask.sum(axis=0)
        return float(counts[counts > 0].mean())

    def convex_deficiency(self) -> float:
        pts = np.argwhere(self.mask)[:, ::-1].astype(np.int32)
        hull = cv2.convexHull(pts)
        hull_area = cv2.contourArea(hull)
        return float(max(hull_area - self.mask.sum(), 0.0) / max(hull_area, 1.0))


@dataclass
class JointCavities:
    centers: np.ndarray  # (2, 2) as (x, y)
    radii: np.ndarray  # (2,)

    def discs(self, shape=FRAME) -> list[np.ndarray]:
        yy, xx = np.ogrid[: shape[0], : shape[1]]
        return [
            (xx - c[0]) ** 2 + (yy - c[1]) ** 2 <= r * r
            for c, r in zip(self.centers, self.radii)
        ]

    def annuli(self, shape=FRAME) -> list[np.ndarray]:
        """Rings of equal area to the discs: radius r to r*sqrt(2)."""
        yy, xx = np.ogrid[: shape[0], : shape[1]]
        out = []
        for c, r in zip(self.centers, self.radii):
            d2 = (xx - c[0]) ** 2 + (yy - c[1]) ** 2
            out.append((d2 > r * r) & (d2 <= 2 * r * r))
        return out


@dataclass(frozen=True)
class RoiBox:
    cx: float
    cy: float
    width: float
    height: float

    @property
    def x0(self) -> float:
        return self.cx - self.width / 2

    @property
    def x1(self) -> float:
        return self.cx + self.width / 2

    @property
    def y0(self) -> float:
        return self.cy - self.height / 2

    @property
    def y1(self) -> float:
        return self.cy + self.height / 2

    @classmethod
    def from_bounds(cls, x0, y0, x1, y1) -> "RoiBox":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def contains(self, x, y, r=0.0) -> bool:
        return (
            self.x0 <= x - r and x + r <= self.x1 and self.y0 <= y - r and y + r <= self.y1
        )

    def mask(self, shape=FRAME) -> np.ndarray:
        yy, xx = np.ogrid[: shape[0], : shape[1]]
        return (xx >= self.x0) & (xx <= self.x1) & (yy >= self.y0) & (yy <= self.y1)


@dataclass
class BrightnessField:
    values: np.ndarray
    tissue: np.ndarray
    amplitudes: np.ndarray


@dataclass
class FingerModel:
    shape: FingerShape
    joints: JointCavities
    roi: RoiBox
    field: BrightnessField


# ---------------------------------------------------------------------------


def finger_params(seed: int, perturbation: float = 1.0, taper: bool = True) -> FingerParams:
    rng = make_rng(seed)
    base_x = rng.uniform(4, 16)
    tip_x = rng.uniform(575, 592)
    width_base = rng.uniform(125, 150)
    width_tip = rng.uniform(95, 120) if taper else width_base
    mid_offset = rng.uniform(-4, 4)
    bend = rng.uniform(-8, 8)
    amps = tuple(rng.uniform(-0.04, 0.04, 3))
    phases = tuple(rng.uniform(0, 2 * np.pi, 3))
    return FingerParams(
        base_x=base_x,
        tip_x=tip_x,
        mid_offset=mid_offset * perturbation,
        bend=bend * perturbation,
        width_base=width_base,
        width_tip=width_tip,
        amps=tuple(a * perturbation for a in amps),
        phases=phases,
    )


def shape_from_params(params: FingerParams, seed: int = 0, frame=FRAME) -> FingerShape:
    H, W = frame
    x = np.arange(W, dtype=float)
    L = params.length
    t = np.clip((x - params.base_x) / L, 0.0, 1.0)
    half = 0.5 * (params.width_base + (params.width_tip - params.width_base) * t)
    wobble = np.ones_like(t)
    for k, (a, ph) in enumerate(zip(params.amps, params.phases), start=1):
        wobble += a * np.sin(k * np.pi * t + ph)
    half *= wobble
    # elliptical caps at both ends
    for end, sign in ((params.base_x, 1.0), (params.tip_x, -1.0)):
        cap = params.cap_fraction * 0.5 * (
            params.width_base if sign > 0 else params.width_tip
        )
        d = sign * (x - end)
        inside = (d >= 0) & (d < cap)
        half[inside] *= np.sqrt(np.clip(1.0 - ((cap - d[inside]) / cap) ** 2, 0.0, 1.0))
    half[(x < params.base_x) | (x > params.tip_x)] = 0.0
    mid = (H - 1) / 2 + params.mid_offset + params.bend * ((t - 0.5) ** 2 - 0.25)
    yy = np.arange(H, dtype=float)[:, None]
    mask = (np.abs(yy - mid[None, :]) <= half[None, :]) & (half[None, :] > 0)
    return FingerShape(mask.astype(np.uint8), params, mid, half, seed)


def sample_finger(
    seed: int, *, perturbation: float = 1.0, taper: bool = True, frame=FRAME
) -> FingerShape:
    """Draw a finger silhouette; deterministic in ``seed``."""
    return shape_from_params(finger_params(seed, perturbation, taper), seed, frame)


def place_joints(
    shape: FingerShape,
    seed: int,
    *,
    fractions=((0.30, 0.40), (0.60, 0.72)),
    radius=(12.0, 20.0),
    min_separation: float = 0.25,
    max_draws: int = 1000,
) -> JointCavities:
    """Two joint discs on the midline at sampled fractions of finger length.

    Pairs closer than ``min_separation`` of the finger length are redrawn.
    """
    L = shape.length
    rng = make_rng(seed)
    for _ in range(max_draws):
        f = np.array([rng.uniform(*fractions[0]), rng.uniform(*fractions[1])])
        r = rng.uniform(radius[0], radius[1], 2)
        if f[1] - f[0] >= min_separation:
            break
    else:
        raise FingerModelError("could not satisfy joint separation")
    xs = shape.base_x + f * L
    ys = shape.mid_at(xs)
    if (f[1] - f[0]) * L < r.sum():
        raise FingerModelError(f"finger length {L:.1f} px too short to separate joints")
    half = shape.half_at(xs)
    if np.any(half < r * np.sqrt(2)):
        raise FingerModelError("joint discs do not fit inside the finger")
    return JointCavities(np.column_stack([xs, ys]), r)


def compute_roi(
    shape: FingerShape, joints: JointCavities, span=(0.10, 0.90)
) -> RoiBox:
    """Inscribed finger rectangle over ``span`` of the length, grown to hold the joints."""
    x0 = shape.base_x + span[0] * shape.length
    x1 = shape.base_x + span[1] * shape.length
    cols = np.arange(int(np.ceil(x0)), int(np.floor(x1)) + 1)
    col_mask = shape.mask[:, cols]
    top = col_mask.argmax(axis=0)
    bottom = shape.mask.shape[0] - 1 - col_mask[::-1].argmax(axis=0)
    y0, y1 = float(top.max()), float(bottom.min())
    for (cx, cy), r in zip(joints.centers, joints.radii):
        x0, x1 = min(x0, cx - r), max(x1, cx + r)
        y0, y1 = min(y0, cy - r), max(y1, cy + r)
    return RoiBox.from_bounds(x0, y0, x1, y1)


def smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def joint_bumps(joints: JointCavities, amplitudes, frame=FRAME, edge: float = 12.0) -> np.ndarray:
    """Flat-topped radial bumps, one per joint.

    Each bump is ``a`` inside the disc and falls to zero with a smoothstep of
    width ``edge`` pixels centred on the disc boundary, so the steepest slope
    is ``1.5 * a / edge`` per pixel.
    """
    yy, xx = np.mgrid[: frame[0], : frame[1]]
    out = np.zeros(frame)
    for (cx, cy), r, a in zip(joints.centers, joints.radii, amplitudes):
        d = np.hypot(xx - cx, yy - cy)
        out += a * smoothstep((r - d) / edge + 0.5)
    return out


def brightness_field(
    shape: FingerShape,
    joints: JointCavities,
    seed: int,
    *,
    base: float = 0.55,
    amplitude: tuple[float, float] | float | None = (0.28, 0.36),
    ramp: float = 20.0,
) -> BrightnessField:
    """Tissue level with edge fall-off plus a radial bump per joint.

    The fall-off is a smoothstep of the distance to the silhouette edge over
    ``ramp`` pixels, so the field reaches zero at the edge without a step;
    its steepest slope is ``1.5 * base / ramp`` per pixel.
    """
    rng = make_rng(seed)
    if amplitude is None or np.isscalar(amplitude):
        amps = np.full(len(joints.radii), 0.0 if amplitude is None else float(amplitude))
    else:
        amps = rng.uniform(amplitude[0], amplitude[1], len(joints.radii))
    dist = ndimage.distance_transform_edt(shape.mask).astype(np.float32)
    tissue = base * smoothstep(dist / ramp)
    values = np.clip(tissue + joint_bumps(joints, amps, shape.mask.shape), 0.0, 1.0)
    return BrightnessField(values, tissue, amps)


def build_finger_model(seed: int, *, frame=FRAME) -> FingerModel:
    shape = sample_finger(derive_seed(seed, 0, "shape"), frame=frame)
    joints = place_joints(shape, derive_seed(seed, 0, "joints"))
    roi = compute_roi(shape, joints)
    field = brightness_field(shape, joints, derive_seed(seed, 0, "field"))
    return FingerModel(shape, joints, roi, field)
