"""Annotation I/O: per-sample XML records, 1-bit masks and the dataset manifest.

Layout under a dataset root::

    manifest.jsonl                     header line + one line per entry
    <identity:05d>/<sample:03d>.png    finger-shaped image (200 x 600)
    <identity:05d>/<sample:03d>_full.png
    <identity:05d>/<sample:03d>_roi.png
    <identity:05d>/<sample:03d>.xml    annotation record
    <identity:05d>/masks/pattern.png   vein template, 300 x 600
    <identity:05d>/masks/veins.png     veins in the finger frame, 200 x 600
    <identity:05d>/masks/shape.png     finger silhouette, 200 x 600

Masks are stored once per identity in the base (centre-view) frame. Each
record carries the variation parameters and the transform centre, so the
per-sample masks can be derived exactly with :func:`derive_sample_masks`.

XML schema (units: pixels and degrees, origin top-left, y down; numbers are
written with 6 significant digits)::

    <annotation version="1">
      <identity>7</identity>
      <sample>42</sample>
      <seed>1234</seed>
      <image width="600" height="200">00007/042.png</image>
      <files><file kind="full" offset_y="53">00007/042_full.png</file> ...</files>
      <masks><mask kind="shape">00007/masks/shape.png</mask> ...</masks>
      <joints>
        <joint index="0" x="..." y="..." radius="..."/>
        <joint index="1" x="..." y="..." radius="..."/>
      </joints>
      <roi cx="..." cy="..." width="..." height="..."/>
      <variation category="roll+over" combo="1">
        <center x="..." y="..."/>
        <base_roi cx="..." cy="..." width="..." height="..."/>   (ROI of the centre view)
        <shift_x>0</shift_x> <rotation>0</rotation> <scale>1</scale> <roll>-7.5</roll>
        <exposure gain="1.3"/>            (gain="none" when absent)
        <blur kind="motion" magnitude="9" angle="31.4"/>   (kind="none")
      </variation>
      <margins ok="1" vein="0.34" joint0="0.15" joint1="0.18" attempts="1"/>
    </annotation>
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image

from .variations import Blur, VariationError, VariationParams

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1"
MANIFEST_NAME = "manifest.jsonl"
HASH_NAME = "sha256"


class AnnotationError(Exception):
    pass


class MalformedAnnotationError(AnnotationError):
    """The file is not well-formed XML."""


class SchemaError(AnnotationError):
    """Well-formed XML that does not follow the annotation schema."""


class RangeError(AnnotationError):
    """A value is outside its allowed range."""


class ManifestError(AnnotationError):
    pass


def fmt(v: float) -> str:
    """Fixed 6-significant-digit number format (``-0`` written as ``0``)."""
    s = "%.6g" % float(v)
    return "0" if s == "-0" else s


def _q(v: float) -> float:
    return float(fmt(v))


@dataclass(frozen=True)
class AnnotationRecord:
    identity: int
    sample: int
    params: VariationParams
    joints: tuple[tuple[float, float, float], ...]  # (x, y, radius)
    roi: tuple[float, float, float, float]  # (cx, cy, width, height)
    center: tuple[float, float]  # transform origin in the base frame
    image: str
    frame: tuple[int, int] = (600, 200)  # (width, height)
    seed: int = 0
    files: tuple[tuple[str, str, int], ...] = ()  # (kind, path, offset_y)
    masks: tuple[tuple[str, str], ...] = ()  # (kind, path)
    margins: tuple[tuple[str, float], ...] = ()
    margins_ok: bool = True
    attempts: int = 1
    base_roi: tuple[float, float, float, float] | None = None  # centre-view ROI (cx, cy, width, height)

    def normalized(self) -> "AnnotationRecord":
        """Round every real number to what the XML format stores."""
        return replace(
            self,
            joints=tuple(tuple(_q(v) for v in j) for j in self.joints),
            roi=tuple(_q(v) for v in self.roi),
            center=tuple(_q(v) for v in self.center),
            base_roi=None if self.base_roi is None else tuple(_q(v) for v in self.base_roi),
            margins=tuple((k, _q(v)) for k, v in self.margins),
        )

    def file(self, kind: str) -> str | None:
        for k, path, _ in self.files:
            if k == kind:
                return path
        return None

    def mask(self, kind: str) -> str | None:
        return dict(self.masks).get(kind)


def validate_record(rec: AnnotationRecord, max_samples: int = 100) -> None:
    if rec.identity < 0:
        raise RangeError(f"identity {rec.identity} is negative")
    if not 0 <= rec.sample < max_samples:
        raise RangeError(f"sample index {rec.sample} outside 0..{max_samples - 1}")
    W, H = rec.frame
    for x, y, r in rec.joints:
        if not (0 <= x <= W and 0 <= y <= H) or r <= 0:
            raise RangeError(f"joint ({x}, {y}, r={r}) outside the {W}x{H} image")
    cx, cy, w, h = rec.roi
    eps = 1e-3
    if w <= 0 or h <= 0 or cx - w / 2 < -eps or cy - h / 2 < -eps or cx + w / 2 > W + eps or cy + h / 2 > H + eps:
        raise RangeError(f"ROI {rec.roi} outside the {W}x{H} image")


# ---------------------------------------------------------------------------
# XML


def _sub(parent, tag, text=None, **attrs):
    el = ET.SubElement(parent, tag, {k: str(v) for k, v in attrs.items()})
    if text is not None:
        el.text = str(text)
    return el


def record_to_xml(rec: AnnotationRecord) -> bytes:
    root = ET.Element("annotation", {"version": SCHEMA_VERSION})
    _sub(root, "identity", rec.identity)
    _sub(root, "sample", rec.sample)
    _sub(root, "seed", rec.seed)
    _sub(root, "image", rec.image, width=rec.frame[0], height=rec.frame[1])
    files = _sub(root, "files")
    for kind, path, off in rec.files:
        _sub(files, "file", path, kind=kind, offset_y=off)
    masks = _sub(root, "masks")
    for kind, path in rec.masks:
        _sub(masks, "mask", path, kind=kind)
    joints = _sub(root, "joints")
    for i, (x, y, r) in enumerate(rec.joints):
        _sub(joints, "joint", index=i, x=fmt(x), y=fmt(y), radius=fmt(r))
    cx, cy, w, h = rec.roi
    _sub(root, "roi", cx=fmt(cx), cy=fmt(cy), width=fmt(w), height=fmt(h))
    p = rec.params
    var = _sub(root, "variation", category=p.category, combo=int(p.combo))
    _sub(var, "center", x=fmt(rec.center[0]), y=fmt(rec.center[1]))
    if rec.base_roi is not None:
        bx, by, bw, bh = rec.base_roi
        _sub(var, "base_roi", cx=fmt(bx), cy=fmt(by), width=fmt(bw), height=fmt(bh))
    for name in ("shift_x", "rotation", "scale", "roll"):
        _sub(var, name, fmt(getattr(p, name)))
    _sub(var, "exposure", gain="none" if p.exposure is None else fmt(p.exposure))
    if p.blur is None:
        _sub(var, "blur", kind="none")
    else:
        _sub(var, "blur", kind=p.blur.kind, magnitude=fmt(p.blur.magnitude), angle=fmt(p.blur.angle))
    m = _sub(root, "margins", ok=int(rec.margins_ok), attempts=rec.attempts)
    for k, v in rec.margins:
        m.set(k, fmt(v))
    ET.indent(root, space="  ")
    return ET.tostring(root, encoding="utf-8", xml_declaration=True) + b"\n"


def write_annotation(rec: AnnotationRecord, path: str | Path) -> Path:
    path = Path(path)
    data = record_to_xml(rec)
    try:
        path.write_bytes(data)
    except OSError as e:
        raise AnnotationError(f"cannot write annotation {path}: {e}") from e
    return path


def _req(el, tag):
    found = el.find(tag)
    if found is None:
        raise SchemaError(f"missing <{tag}> in <{el.tag}>")
    return found


def _num(text, what, kind=float):
    try:
        return kind(text)
    except (TypeError, ValueError):
        raise SchemaError(f"{what}: {text!r} is not a number") from None


def _attr(el, name, kind=float):
    if name not in el.attrib:
        raise SchemaError(f"<{el.tag}> lacks attribute {name!r}")
    return _num(el.attrib[name], f"{el.tag}@{name}", kind)


def xml_to_record(data: bytes, source: str = "<bytes>", max_samples: int = 100) -> AnnotationRecord:
    try:
        root = ET.fromstring(data)
    except ET.ParseError as e:
        raise MalformedAnnotationError(f"{source}: {e}") from e
    if root.tag != "annotation":
        raise SchemaError(f"{source}: root element is <{root.tag}>, expected <annotation>")
    if root.get("version") != SCHEMA_VERSION:
        raise SchemaError(f"{source}: unsupported schema version {root.get('version')!r}")
    image = _req(root, "image")
    var = _req(root, "variation")
    center = _req(var, "center")
    exp = _req(var, "exposure").get("gain")
    if exp is None:
        raise SchemaError("<exposure> lacks attribute 'gain'")
    blur_el = _req(var, "blur")
    kind = blur_el.get("kind")
    try:
        blur = None if kind == "none" else Blur(
            kind, _attr(blur_el, "magnitude"), _attr(blur_el, "angle")
        )
        params = VariationParams(
            shift_x=_num(_req(var, "shift_x").text, "shift_x"),
            rotation=_num(_req(var, "rotation").text, "rotation"),
            scale=_num(_req(var, "scale").text, "scale"),
            roll=_num(_req(var, "roll").text, "roll"),
            exposure=None if exp == "none" else _num(exp, "exposure gain"),
            blur=blur,
            combo=bool(_attr(var, "combo", int)),
            category=var.get("category", ""),
        )
    except VariationError as e:
        raise RangeError(f"{source}: {e}") from e
    base_el = var.find("base_roi")
    base_roi = None if base_el is None else tuple(_attr(base_el, k) for k in ("cx", "cy", "width", "height"))
    margins_el = root.find("margins")
    margins, ok, attempts = (), True, 1
    if margins_el is not None:
        ok = bool(_attr(margins_el, "ok", int))
        attempts = _attr(margins_el, "attempts", int)
        margins = tuple(
            (k, _num(v, f"margins@{k}")) for k, v in margins_el.attrib.items() if k not in ("ok", "attempts")
        )
    rec = AnnotationRecord(
        identity=_num(_req(root, "identity").text, "identity", int),
        sample=_num(_req(root, "sample").text, "sample", int),
        seed=_num(_req(root, "seed").text, "seed", int),
        params=params,
        joints=tuple(
            (_attr(j, "x"), _attr(j, "y"), _attr(j, "radius")) for j in _req(root, "joints").findall("joint")
        ),
        roi=tuple(_attr(_req(root, "roi"), k) for k in ("cx", "cy", "width", "height")),
        center=(_attr(center, "x"), _attr(center, "y")),
        image=image.text or "",
        frame=(_attr(image, "width", int), _attr(image, "height", int)),
        files=tuple(
            (f.get("kind", ""), f.text or "", _attr(f, "offset_y", int)) for f in _req(root, "files").findall("file")
        ),
        masks=tuple((m.get("kind", ""), m.text or "") for m in _req(root, "masks").findall("mask")),
        margins=margins,
        margins_ok=ok,
        attempts=attempts,
        base_roi=base_roi,
    )
    if len(rec.joints) != 2:
        raise SchemaError(f"{source}: expected 2 joints, found {len(rec.joints)}")
    try:
        validate_record(rec, max_samples)
    except RangeError as e:
        raise RangeError(f"{source}: {e}") from e
    return rec


def read_annotation(path: str | Path, max_samples: int = 100) -> AnnotationRecord:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise AnnotationError(f"cannot read annotation {path}: {e}") from e
    return xml_to_record(data, str(path), max_samples)


# ---------------------------------------------------------------------------
# masks


def write_bitmask(mask: np.ndarray, path: str | Path) -> Path:
    """Lossless 1-bit PNG."""
    path = Path(path)
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError("mask must be two-dimensional")
    try:
        Image.fromarray(m.astype(bool)).save(path, format="PNG")
    except OSError as e:
        raise AnnotationError(f"cannot write mask {path}: {e}") from e
    return path


def read_bitmask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 0).astype(np.uint8)


def write_masks(masks: Mapping[str, np.ndarray], directory: str | Path) -> dict[str, Path]:
    """Write named masks (for example pattern, veins, shape) as ``<name>.png``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = {}
    for name, m in masks.items():
        if name == "shape" and not np.asarray(m).any():
            raise AnnotationError("refusing to write an empty shape mask")
        out[name] = write_bitmask(m, directory / f"{name}.png")
    return out


def derive_sample_masks(root: str | Path, rec: AnnotationRecord, kinds=("shape", "veins")) -> dict[str, np.ndarray]:
    """Rebuild a sample's masks from the stored base masks and its record."""
    from .fingermodel import FingerShape
    from .variations import apply_geometric

    root = Path(root)
    base = {k: read_bitmask(root / rec.mask(k)) for k in kinds}
    shape = FingerShape.from_mask(read_bitmask(root / rec.mask("shape")))
    dummy = np.zeros(base[kinds[0]].shape, np.float32)
    res = apply_geometric(dummy, base, rec.params, shape, center=rec.center, max_outside=1.0)
    return res.masks


# ---------------------------------------------------------------------------
# manifest


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass
class Manifest:
    header: dict
    entries: list[dict] = field(default_factory=list)

    def lines(self) -> list[str]:
        return [json.dumps(self.header, sort_keys=True)] + [
            json.dumps(e, sort_keys=True) for e in self.entries
        ]

    def to_bytes(self) -> bytes:
        return ("\n".join(self.lines()) + "\n").encode()

    @property
    def sample_entries(self) -> list[dict]:
        return [e for e in self.entries if e["type"] == "sample"]

    def files(self) -> Iterable[tuple[str, str]]:
        for e in self.entries:
            for path, digest in sorted(e["files"].items()):
                yield path, digest


def build_manifest(
    entries: Iterable[dict],
    *,
    master_seed: int,
    config_hash: str,
    identities: Iterable[int],
    samples_per_identity: int = 100,
) -> Manifest:
    """Aggregate per-identity entries into a manifest sorted by identity and sample.

    ``entries`` are dicts with ``type`` (``identity`` or ``sample``),
    ``identity``, optionally ``sample``, and ``files`` mapping relative path
    to digest. Every listed identity must have all of its samples.
    """
    ids = sorted(set(identities))
    entries = sorted(entries, key=lambda e: (e["identity"], e["type"] != "identity", e.get("sample", -1)))
    have: dict[int, set[int]] = {i: set() for i in ids}
    for e in entries:
        if e["type"] == "sample":
            have.setdefault(e["identity"], set()).add(e["sample"])
    gaps = []
    for i in ids:
        missing = sorted(set(range(samples_per_identity)) - have.get(i, set()))
        if missing:
            gaps.append((i, missing))
    if gaps:
        text = "; ".join(f"identity {i}: samples {m[:10]}{'...' if len(m) > 10 else ''}" for i, m in gaps)
        raise ManifestError(f"missing samples: {text}")
    n_samples = sum(1 for e in entries if e["type"] == "sample")
    header = {
        "type": "header",
        "version": 1,
        "hash": HASH_NAME,
        "master_seed": int(master_seed),
        "config_hash": config_hash,
        "identities": len(ids),
        "identity_ids": ids,
        "samples_per_identity": samples_per_identity,
        "samples": n_samples,
    }
    return Manifest(header, list(entries))


def write_manifest(manifest: Manifest, root: str | Path) -> Path:
    path = Path(root) / MANIFEST_NAME
    tmp = path.with_suffix(".tmp")
    tmp.write_bytes(manifest.to_bytes())
    os.replace(tmp, path)
    return path


def read_manifest(root: str | Path) -> Manifest:
    path = Path(root) / MANIFEST_NAME
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    if not lines:
        raise ManifestError(f"{path} is empty")
    try:
        header = json.loads(lines[0])
        entries = [json.loads(x) for x in lines[1:] if x.strip()]
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: {e}") from e
    if header.get("type") != "header":
        raise ManifestError(f"{path}: first line is not a header")
    return Manifest(header, entries)


def verify_manifest(root: str | Path, manifest: Manifest | None = None) -> list[str]:
    """Re-hash every listed file; return the paths that are missing or differ."""
    root = Path(root)
    manifest = manifest or read_manifest(root)
    bad = []
    for rel, digest in manifest.files():
        p = root / rel
        if not p.is_file() or file_digest(p) != digest:
            bad.append(rel)
    return bad
