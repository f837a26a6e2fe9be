"""Procedural finger-vein image renderer and region-margin measurements.

A rendered image is built as::

    transmitted = tissue * (1 - attenuation) + (1 + boost) * joint glow
    image       = clip(PSF * transmitted + noise, 0, 1) * shape mask

where ``tissue`` is the brightness field without its joint bumps, ``joint
glow`` is the bump part, ``attenuation = min(k * local stroke width, a_max)``
on vein pixels and zero elsewhere, and ``PSF`` is a normalized radially
symmetric exponential kernel modelling light scattering in tissue. The glow
is added after attenuation: light leaking through a cavity washes out the
veins crossing it instead of being absorbed by them.

Two brightness priors are measured on every render and enforced after it:

* joints: mean(joint discs) - mean(equal-area annuli) >= ``margin_joint``
* veins: mean(ROI tissue away from veins) - mean(vein pixels) >= ``margin_vein``

A failing render is repeated with the vein attenuation and/or the joint
boost scaled by ``repair_factor``, at most ``max_attempts`` times.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import cv2
import numpy as np
from scipy import ndimage

from .fingermodel import FingerModel, FingerShape, JointCavities, RoiBox
from .seeding import make_rng

logger = logging.getLogger(__name__)

SHAPED = (200, 600)
FULL = (300, 600)


class RegionError(ValueError):
    """A margin region is empty inside the image."""


class MarginError(RuntimeError):
    """Brightness priors still violated after the repair loop."""

    def __init__(self, margins: dict[str, float], attempts: int):
        self.margins = margins
        self.attempts = attempts
        text = ", ".join(f"{k}={v:.4f}" for k, v in margins.items())
        super().__init__(f"margin post-condition failed after {attempts} attempts: {text}")


@dataclass
class VeinImage:
    pixels: np.ndarray
    variant: str = "shaped"  # full | shaped | roi
    margins: dict[str, float] = field(default_factory=dict)
    attempts: int = 1

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class RegionSpec:
    """Pixel sets ``a`` and ``b`` (boolean masks or ``(row, col)`` arrays)."""

    a: np.ndarray
    b: np.ndarray
    margin: float = 0.0


@dataclass(frozen=True)
class RenderConfig:
    attenuation: float = 0.3
    max_attenuation: float = 0.95
    psf_radius: int = 9
    psf_scale: float = 0.8
    noise_sigma: float = 0.01
    margin_joint: float = 0.1
    margin_vein: float = 0.3
    repair_factor: float = 1.2
    max_attempts: int = 5
    vein_dilation: int = 3
    template_fill: float = 0.85
    strict: bool = True


# ---------------------------------------------------------------------------
# kernels


def exponential_psf(radius: int = 9, scale: float = 3.0) -> np.ndarray:
    """Normalized kernel ``exp(-r / scale)`` on a disc of the given radius."""
    ax = np.arange(-radius, radius + 1, dtype=float)
    xx, yy = np.meshgrid(ax, ax)
    r = np.hypot(xx, yy)
    k = np.exp(-r / scale)
    k[r > radius + 0.5] = 0.0
    return k / k.sum()


def convolve(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size convolution with reflected borders (kernel flipped for cv2)."""
    return cv2.filter2D(
        img, -1, np.ascontiguousarray(kernel[::-1, ::-1]), borderType=cv2.BORDER_REFLECT
    )


# ---------------------------------------------------------------------------
# measurements


def _pixels(img: np.ndarray, region) -> np.ndarray:
    region = np.asarray(region)
    if region.dtype == bool and region.shape == img.shape:
        return img[region]
    pts = region.reshape(-1, 2).astype(int)
    ok = (
        (pts[:, 0] >= 0) & (pts[:, 0] < img.shape[0]) & (pts[:, 1] >= 0) & (pts[:, 1] < img.shape[1])
    )
    pts = pts[ok]
    return img[pts[:, 0], pts[:, 1]]


def region_margin(img, spec: RegionSpec) -> float:
    """Mean intensity over ``spec.a`` minus mean intensity over ``spec.b``."""
    pixels = img.pixels if isinstance(img, VeinImage) else np.asarray(img)
    a = _pixels(pixels, spec.a)
    b = _pixels(pixels, spec.b)
    if a.size == 0 or b.size == 0:
        raise RegionError("region A or B is empty inside the image")
    return float(a.mean(dtype=np.float64) - b.mean(dtype=np.float64))


def margin_penalty(imgs: Sequence, spec_for: Sequence[RegionSpec]) -> float:
    """Mean hinge ``max(0, margin - (mean_A - mean_B))`` over the images."""
    if len(imgs) == 0:
        raise ValueError("need at least one image")
    if len(imgs) != len(spec_for):
        raise ValueError("one region spec per image is required")
    total = 0.0
    for img, spec in zip(imgs, spec_for):
        total += max(0.0, spec.margin - region_margin(img, spec))
    return total / len(imgs)


def joint_specs(joints: JointCavities, shape_mask: np.ndarray, margin: float = 0.1) -> list[RegionSpec]:
    """One disc-vs-annulus spec per joint, restricted to the finger."""
    inside = shape_mask.astype(bool)
    return [
        RegionSpec(d & inside, a & inside, margin)
        for d, a in zip(joints.discs(inside.shape), joints.annuli(inside.shape))
    ]


def vein_spec(
    pattern: np.ndarray, shape_mask: np.ndarray, roi, margin: float = 0.3, dilation: int = 3
) -> RegionSpec | None:
    """ROI tissue (excluding a dilated vein band) vs vein pixels; None without veins.

    ``roi`` is a :class:`RoiBox` or a boolean region mask (for example the
    base ROI carried through a rotation).
    """
    region = roi.mask(shape_mask.shape) if isinstance(roi, RoiBox) else np.asarray(roi, bool)
    inside = shape_mask.astype(bool) & region
    veins = pattern.astype(bool) & inside
    if not veins.any():
        return None
    k = 2 * dilation + 1
    near = cv2.dilate(pattern.astype(np.uint8), np.ones((k, k), np.uint8)).astype(bool)
    return RegionSpec(inside & ~near, veins, margin)


# ---------------------------------------------------------------------------
# rendering


def template_to_shape_affine(shape, template_shape=(300, 600), fill: float = 0.85) -> np.ndarray:
    """2x3 affine from template pixels to the finger frame.

    ``x`` is kept; ``y`` is scaled so the template height covers ``fill`` of
    the finger's median width and centred on the mean midline.
    """
    cols = shape.halfwidth > 0
    mid = float(shape.midline[cols].mean())
    half = float(np.median(shape.halfwidth[cols]))
    s = 2 * fill * half / template_shape[0]
    ty = mid - s * (template_shape[0] - 1) / 2
    return np.array([[1.0, 0.0, 0.0], [0.0, s, ty]])


def pattern_to_shape_frame(pattern: np.ndarray, shape, fill: float = 0.85) -> np.ndarray:
    H, W = shape.mask.shape
    M = template_to_shape_affine(shape, pattern.shape, fill)
    return cv2.warpAffine(
        pattern.astype(np.uint8), M, (W, H), flags=cv2.INTER_NEAREST, borderValue=0
    )


def pattern_in_finger_frame(graph, shape: FingerShape, fill: float = 0.85) -> np.ndarray:
    """Rasterize a template-frame vein graph directly in the finger frame.

    Node positions go through :func:`template_to_shape_affine` while stroke
    widths stay in pixels, so veins keep their thickness instead of being
    squashed by the vertical scale.
    """
    from .veinpattern import PatternTemplate, rasterize, transform_graph

    H, W = shape.mask.shape
    M = template_to_shape_affine(shape, (300, 600), fill)
    if len(graph.nodes) == 0:
        return np.zeros((H, W), np.uint8)
    return rasterize(transform_graph(graph, M), PatternTemplate(W, H), plausible=None).mask


def stroke_width_map(pattern: np.ndarray, masked: bool = True) -> np.ndarray:
    """Approximate local stroke width at every vein pixel.

    Twice the largest distance-to-background within a 7 x 7 neighbourhood,
    which carries the centre-line half-width out to the stroke border. With
    ``masked=False`` the map also covers a 3 px band around each stroke, so
    it can be resampled with the image and masked afterwards.
    """
    m = pattern.astype(np.uint8)
    if not m.any():
        return np.zeros(m.shape, np.float32)
    # cv2's precise L2 transform is not repeatable call to call; scipy's is exact
    dist = ndimage.distance_transform_edt(m).astype(np.float32)
    wide = 2.0 * cv2.dilate(dist, np.ones((7, 7), np.uint8))
    return (wide * m if masked else wide).astype(np.float32)


def _compose(tissue, glow, width_map, shape_mask, psf, noise, attenuation, boost, cfg):
    atten = np.minimum(attenuation * width_map, cfg.max_attenuation)
    transmitted = tissue * (1.0 - atten) + (1.0 + boost) * glow
    img = convolve(transmitted, psf) + noise
    np.clip(img, 0.0, 1.0, out=img)
    img *= shape_mask
    return img


def render(
    pattern,
    model: FingerModel,
    seed: int,
    cfg: RenderConfig | None = None,
    *,
    width_map: np.ndarray | None = None,
    roi_region: np.ndarray | None = None,
    log_failures: bool = True,
) -> VeinImage:
    """Render a finger-shaped image and enforce the brightness margins.

    ``pattern`` is a binary vein mask either in the finger frame or in the
    300 x 600 template frame (mapped with :func:`template_to_shape_affine`).
    ``width_map`` supplies stroke widths measured before a pose change (a
    scaled or rolled view does not change how thick the vessels are);
    ``roi_region`` replaces the axis-aligned ROI box in the vein margin.
    """
    cfg = cfg or RenderConfig()
    pat = getattr(pattern, "mask", pattern)
    shape_mask = model.shape.mask
    if pat.shape != shape_mask.shape:
        pat = pattern_to_shape_frame(pat, model.shape, cfg.template_fill)
    pat = pat.astype(bool) & shape_mask.astype(bool)

    tissue = model.field.tissue.astype(np.float32)
    glow = (model.field.values - model.field.tissue).astype(np.float32)
    width_map = stroke_width_map(pat) if width_map is None else np.asarray(width_map, np.float32) * pat
    psf = exponential_psf(cfg.psf_radius, cfg.psf_scale).astype(np.float32)
    noise = make_rng(seed).normal(0.0, cfg.noise_sigma, tissue.shape).astype(np.float32)
    smask = shape_mask.astype(np.float32)

    jspecs = joint_specs(model.joints, shape_mask, cfg.margin_joint)
    vspec = vein_spec(
        pat, shape_mask, model.roi if roi_region is None else roi_region, cfg.margin_vein, cfg.vein_dilation
    )

    attenuation = cfg.attenuation
    boost = 0.0
    margins: dict[str, float] = {}
    for attempt in range(1, cfg.max_attempts + 1):
        img = _compose(tissue, glow, width_map, smask, psf, noise, attenuation, boost, cfg)
        margins = {f"joint{i}": region_margin(img, s) for i, s in enumerate(jspecs)}
        if vspec is not None:
            margins["vein"] = region_margin(img, vspec)
        joint_ok = all(margins[f"joint{i}"] >= s.margin for i, s in enumerate(jspecs))
        vein_ok = vspec is None or margins["vein"] >= vspec.margin
        if joint_ok and vein_ok:
            return VeinImage(img, "shaped", margins, attempt)
        if not vein_ok:
            attenuation *= cfg.repair_factor
        if not joint_ok:
            boost = (1.0 + boost) * cfg.repair_factor - 1.0
    if cfg.strict:
        raise MarginError(margins, cfg.max_attempts)
    if log_failures:
        logger.warning("margin repair exhausted (seed %d): %s", seed, margins)
    return VeinImage(img, "shaped", margins, cfg.max_attempts)


def crop_roi(img, roi: RoiBox, out_shape=SHAPED) -> VeinImage:
    """Axis-aligned ROI crop resampled bilinearly to ``out_shape``.

    Output pixel ``(i, j)`` samples the source at
    ``x = x0 + (j + 0.5) * w / W_out - 0.5`` and the analogous ``y``, so a
    crop with no scaling at integer offsets copies pixels exactly.
    """
    pixels = img.pixels if isinstance(img, VeinImage) else np.asarray(img)
    H, W = pixels.shape
    if roi.x0 < -1e-9 or roi.y0 < -1e-9 or roi.x1 > W + 1e-9 or roi.y1 > H + 1e-9:
        raise RegionError(f"ROI {roi} exceeds image bounds {W}x{H}")
    oh, ow = out_shape
    xs = roi.x0 + (np.arange(ow) + 0.5) * (roi.width / ow) - 0.5
    ys = roi.y0 + (np.arange(oh) + 0.5) * (roi.height / oh) - 0.5
    mx = np.broadcast_to(np.clip(xs, 0, W - 1)[None, :], (oh, ow)).astype(np.float32)
    my = np.broadcast_to(np.clip(ys, 0, H - 1)[:, None], (oh, ow)).astype(np.float32)
    src = pixels if pixels.dtype in (np.float32, np.float64) else pixels.astype(np.float32)
    out = cv2.remap(src, mx, my, cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
    return VeinImage(out.astype(pixels.dtype, copy=False), "roi")


def compose_full(img, seed: int, jitter: int = 10, out_shape=FULL) -> tuple[VeinImage, int]:
    """Place a finger-shaped image on a dark 300 x 600 canvas.

    Returns the image and the row offset used (vertical jitter from ``seed``).
    """
    pixels = img.pixels if isinstance(img, VeinImage) else np.asarray(img)
    H, W = out_shape
    h = pixels.shape[0]
    centre = (H - h) // 2
    offset = centre + int(make_rng(seed).integers(-jitter, jitter + 1))
    offset = min(max(offset, 0), H - h)
    canvas = np.zeros(out_shape, dtype=pixels.dtype)
    canvas[offset : offset + h] = pixels
    return VeinImage(canvas, "full"), offset


def quantize(pixels: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit with round-half-to-even."""
    return np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
