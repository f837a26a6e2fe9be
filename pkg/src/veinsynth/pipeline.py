"""Dataset orchestration: configuration, seeding, per-identity generation and I/O.

Every identity ``i`` of a run with master seed ``m`` is a pure function of
``(m, i, config)``. Its random streams are derived with
``derive_seed(m, i, tag)`` for the tags ``pattern``, ``finger`` and ``plan``;
sample ``j`` uses ``derive_seed(identity_seed, j, "sample")``. Identities
are the unit of parallel work, so the output bytes do not depend on the
number of workers.

Each finished identity leaves a ``_done.json`` summary with the digests of
its files. A resumed run skips identities whose summary is present and
whose files still match; the manifest is assembled from the summaries.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

import cv2
import numpy as np
import yaml

from .annotations import (
    AnnotationRecord,
    read_annotation,
    read_bitmask,
    Manifest,
    ManifestError,
    build_manifest,
    digest_bytes,
    file_digest,
    read_manifest,
    record_to_xml,
    verify_manifest,
    write_manifest,
)
from .fingermodel import BrightnessField, FingerModel, FingerModelError, FingerShape, RoiBox, build_finger_model
from .renderer import (
    MarginError,
    RenderConfig,
    compose_full,
    crop_roi,
    pattern_in_finger_frame,
    quantize,
    render,
    stroke_width_map,
)
from .metrics import EmbedConfig, Embedder, MetricConfig, MetricReport, evaluate_features
from .seeding import derive_seed, make_rng
from .variations import (
    VariationParams,
    VariationPlan,
    apply_geometric,
    aligned_roi,
    apply_photometric,
    build_plan,
)
from .veinpattern import CompositionConfig, DirectionProbs, PatternError, TurtleConfig, generate_pattern

logger = logging.getLogger(__name__)

VARIANTS = ("shaped", "full", "roi")
DONE_NAME = "_done.json"

__all__ = [
    "PipelineConfig",
    "ConfigError",
    "GenerationError",
    "IntegrityError",
    "derive_seed",
    "build_identity",
    "make_sample",
    "realize_identity",
    "generate_identity",
    "generate_dataset",
    "load_config",
    "verify_dataset",
    "EvalConfig",
    "evaluate_dataset",
    "evaluate_in_memory",
]


class ConfigError(ValueError):
    pass


class GenerationError(RuntimeError):
    """The failure rate exceeded the configured bound."""


class IntegrityError(RuntimeError):
    """Files on disk do not match the manifest."""

    def __init__(self, files: list[str]):
        self.files = files
        shown = ", ".join(files[:10]) + (" ..." if len(files) > 10 else "")
        super().__init__(f"{len(files)} file(s) fail checksum verification: {shown}")


@dataclass
class PipelineConfig:
    master_seed: int = 0
    identities: int = 10
    first_identity: int = 0
    samples_per_identity: int = 100
    out: str = "dataset"
    workers: int = 1
    variants: tuple[str, ...] = VARIANTS
    max_failure_rate: float = 0.001
    identity_retries: int = 8
    margin_retries: int = 3
    margin_headroom: float | None = 0.04
    p_single_geometric: float = 0.7
    template_fill: float = 0.85
    render: RenderConfig = field(default_factory=RenderConfig)
    turtle: TurtleConfig = field(default_factory=TurtleConfig)
    composition: CompositionConfig = field(default_factory=CompositionConfig)

    def __post_init__(self):
        if self.identities < 1:
            raise ConfigError("identity count must be at least 1")
        if self.samples_per_identity < 1 or self.samples_per_identity > 100:
            raise ConfigError("samples per identity must be in 1..100")
        if self.workers < 1:
            raise ConfigError("worker count must be at least 1")
        bad = set(self.variants) - set(VARIANTS)
        if bad or not self.variants:
            raise ConfigError(f"unknown output variants {sorted(bad)}; choose from {VARIANTS}")
        if not 0 <= self.max_failure_rate <= 1:
            raise ConfigError("max_failure_rate must lie in [0, 1]")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError("master seed must be an unsigned 64-bit value")

    @property
    def identity_ids(self) -> range:
        return range(self.first_identity, self.first_identity + self.identities)

    def content_dict(self) -> dict:
        """Everything that influences output bytes (not paths or worker count)."""
        d = dataclasses.asdict(self)
        for k in ("out", "workers", "identities", "first_identity", "max_failure_rate"):
            d.pop(k)
        d["variants"] = sorted(d["variants"])
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.content_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, doc, what):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ConfigError(f"{what} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    kw = {}
    for k, v in doc.items():
        if isinstance(v, list):
            v = tuple(v)
        if cls is CompositionConfig and k in ("upper", "middle", "lower"):
            v = DirectionProbs(**v) if isinstance(v, dict) else DirectionProbs(*v)
        kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {what}: {e}") from e


def config_from_dict(doc: dict | None, **overrides) -> PipelineConfig:
    doc = dict(doc or {})
    doc.update({k: v for k, v in overrides.items() if v is not None})
    subs = {
        "render": _build(RenderConfig, doc.pop("render", None), "render"),
        "turtle": _build(TurtleConfig, doc.pop("turtle", None), "turtle"),
        "composition": _build(CompositionConfig, doc.pop("composition", None), "composition"),
    }
    names = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if isinstance(doc.get("variants"), str):
        doc["variants"] = tuple(v.strip() for v in doc["variants"].split(",") if v.strip())
    elif "variants" in doc:
        doc["variants"] = tuple(doc["variants"])
    try:
        return PipelineConfig(**doc, **subs)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load_config(path: str | Path | None, **overrides) -> PipelineConfig:
    """YAML config file (optional) plus command-line overrides."""
    doc = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot load config {path}: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a mapping")
    return config_from_dict(doc, **overrides)


# ---------------------------------------------------------------------------
# identities and samples


@dataclass
class Identity:
    index: int
    seed: int
    graph: Any
    template_mask: np.ndarray  # 300 x 600 vein template
    model: FingerModel
    veins: np.ndarray  # veins in the finger frame
    plan: VariationPlan
    attempts: int = 1
    widths: np.ndarray | None = None  # unmasked stroke-width map of ``veins``


@dataclass
class Sample:
    index: int
    seed: int
    params: VariationParams
    shaped: np.ndarray
    joints: Any
    roi: Any
    masks: dict[str, np.ndarray]
    margins: dict[str, float]
    margins_ok: bool
    attempts: int
    pre_photometric: np.ndarray | None = None
    full: np.ndarray | None = None
    full_offset: int = 0
    roi_image: np.ndarray | None = None


def margin_headroom(ident: "Identity", cfg: PipelineConfig) -> dict[str, float]:
    """Centre-view vein margin at the strongest attenuation the repair loop can reach.

    Pose changes move the vein margin by a few hundredths at most, so an
    identity that clears ``margin_vein + headroom`` here renders every
    sample of its plan within the repair budget.
    """
    r = cfg.render
    strongest = dataclasses.replace(
        r, attenuation=r.attenuation * r.repair_factor ** (r.max_attempts - 1), max_attempts=1, strict=False
    )
    m = ident.model
    img = render(
        ident.veins, m, derive_seed(ident.seed, ident.attempts, "preflight"), strongest,
        width_map=ident.widths, roi_region=m.roi.mask(m.shape.mask.shape), log_failures=False,
    )
    return img.margins


def build_identity(master_seed: int, index: int, cfg: PipelineConfig | None = None) -> Identity:
    """Pattern, finger model and variation plan of one identity.

    A degenerate pattern or finger, or a vein pattern too dense to keep the
    vein margin with ``margin_headroom`` to spare, is redrawn from a fresh
    derived stream (tags ``pattern/retryK`` and ``finger/retryK``), at most
    ``identity_retries`` times.
    """
    cfg = cfg or PipelineConfig()
    seed = derive_seed(master_seed, index, "identity")
    last: Exception | str | None = None
    for attempt in range(cfg.identity_retries + 1):
        suffix = "" if attempt == 0 else f"/retry{attempt}"
        try:
            graph, pmask = generate_pattern(
                derive_seed(master_seed, index, "pattern" + suffix), None, cfg.turtle, cfg.composition
            )
            model = build_finger_model(derive_seed(master_seed, index, "finger" + suffix))
        except (PatternError, FingerModelError) as e:
            logger.warning("identity %d attempt %d degenerate: %s", index, attempt + 1, e)
            last = e
            continue
        veins = pattern_in_finger_frame(graph, model.shape, cfg.template_fill)
        widths = stroke_width_map(veins & model.shape.mask, masked=False)
        # Poses use the midline and half-width a reader recovers from the
        # stored silhouette, so annotations reproduce samples from files alone.
        stored = FingerShape.from_mask(model.shape.mask)
        shape = FingerShape(model.shape.mask, model.shape.params, stored.midline, stored.halfwidth, model.shape.seed)
        model = dataclasses.replace(model, shape=shape)
        plan = build_plan(derive_seed(master_seed, index, "plan"), cfg.p_single_geometric)
        ident = Identity(index, seed, graph, pmask.mask, model, veins, plan, attempt + 1, widths)
        if cfg.margin_headroom is not None:
            vein = margin_headroom(ident, cfg).get("vein")
            need = cfg.render.margin_vein + cfg.margin_headroom
            if vein is not None and vein < need:
                last = f"vein margin {vein:.4f} below {need:.4f} at full attenuation"
                logger.info("identity %d attempt %d redrawn: %s", index, attempt + 1, last)
                continue
        return ident
    raise PatternError(f"identity {index}: no valid pattern after {cfg.identity_retries + 1} attempts: {last}")


def realize_identity(
    master_seed: int,
    index: int,
    cfg: PipelineConfig | None = None,
    keep: Callable[["Identity", "Sample"], Any] | None = None,
    variants: Iterable[str] = VARIANTS,
    keep_pre_photometric: bool = False,
    samples: Iterable[int] | None = None,
) -> tuple[Identity, list]:
    """Build an identity and render its samples (all of the plan by default).

    Returns the identity and ``[keep(identity, sample), ...]``; ``keep``
    defaults to returning the sample itself.
    """
    cfg = cfg or PipelineConfig()
    keep = keep or (lambda ident, s: s)
    ident = build_identity(master_seed, index, cfg)
    js = range(cfg.samples_per_identity) if samples is None else samples
    return ident, [keep(ident, make_sample(ident, j, cfg, variants, keep_pre_photometric)) for j in js]


def transformed_model(ident: Identity, p: VariationParams):
    """Warp the identity's field, stroke widths and masks into the sample frame.

    The returned masks include ``roi``, the base ROI carried through the
    pose change, which is the region the vein margin is measured over.
    """
    m = ident.model
    widths = ident.widths if ident.widths is not None else stroke_width_map(ident.veins, masked=False)
    stack = np.dstack([m.field.values, m.field.tissue, widths]).astype(np.float32)
    g = apply_geometric(
        stack,
        {"shape": m.shape.mask, "veins": ident.veins, "roi": m.roi.mask(m.shape.mask.shape)},
        p,
        m.shape,
        joints=m.joints,
        roi=m.roi,
    )
    shape = FingerShape(g.masks["shape"], m.shape.params, m.shape.midline, m.shape.halfwidth, m.shape.seed)
    field_ = BrightnessField(g.image[..., 0], g.image[..., 1], m.field.amplitudes)
    masks = dict(g.masks)
    masks["widths"] = g.image[..., 2]
    return FingerModel(shape, g.joints, g.roi, field_), masks


def make_sample(
    ident: Identity,
    j: int,
    cfg: PipelineConfig | None = None,
    variants: Iterable[str] = VARIANTS,
    keep_pre_photometric: bool = False,
) -> Sample:
    """Render sample ``j`` of an identity in memory."""
    cfg = cfg or PipelineConfig()
    variants = set(variants)
    p = ident.plan[j]
    seed = derive_seed(ident.seed, j, "sample")
    model, masks = transformed_model(ident, p)
    strict = dataclasses.replace(cfg.render, strict=True)
    img = None
    for k in range(cfg.margin_retries + 1):
        try:
            img = render(
                masks["veins"], model, derive_seed(seed, k, "noise"), strict,
                width_map=masks["widths"], roi_region=masks["roi"],
            )
            break
        except MarginError as e:
            logger.warning("identity %d sample %d render attempt %d: %s", ident.index, j, k + 1, e)
    ok = img is not None
    if img is None:
        img = render(
            masks["veins"], model, derive_seed(seed, 0, "noise"), dataclasses.replace(strict, strict=False),
            width_map=masks["widths"], roi_region=masks["roi"],
        )
    shaped = apply_photometric(img.pixels, p, seed)
    out = Sample(
        j, seed, p, shaped, model.joints, model.roi, masks, img.margins, ok, img.attempts,
        img.pixels if keep_pre_photometric else None,
    )
    if "full" in variants:
        full, out.full_offset = compose_full(shaped, seed)
        out.full = full.pixels
    if "roi" in variants:
        out.roi_image = crop_roi(shaped, model.roi).pixels
    return out


# ---------------------------------------------------------------------------
# writing


def _png(pixels: np.ndarray) -> bytes:
    ok, buf = cv2.imencode(".png", quantize(pixels), [cv2.IMWRITE_PNG_COMPRESSION, 1])
    if not ok:
        raise OSError("PNG encoding failed")
    return buf.tobytes()


def _mask_png(mask: np.ndarray) -> bytes:
    from io import BytesIO

    from PIL import Image

    bio = BytesIO()
    Image.fromarray(mask.astype(bool)).save(bio, format="PNG")
    return bio.getvalue()


def _put(root: Path, rel: str, data: bytes, files: dict[str, str]) -> None:
    path = root / rel
    path.write_bytes(data)
    files[rel] = digest_bytes(data)


def sample_record(ident: Identity, s: Sample, rel_dir: str, variants) -> AnnotationRecord:
    files = []
    if "full" in variants:
        files.append(("full", f"{rel_dir}/{s.index:03d}_full.png", s.full_offset))
    if "roi" in variants:
        files.append(("roi", f"{rel_dir}/{s.index:03d}_roi.png", 0))
    c = ident.model.roi
    rec = AnnotationRecord(
        identity=ident.index,
        sample=s.index,
        seed=s.seed,
        params=s.params,
        joints=tuple((float(x), float(y), float(r)) for (x, y), r in zip(s.joints.centers, s.joints.radii)),
        roi=(s.roi.cx, s.roi.cy, s.roi.width, s.roi.height),
        center=(c.cx, c.cy),
        image=f"{rel_dir}/{s.index:03d}.png",
        frame=(s.shaped.shape[1], s.shaped.shape[0]),
        files=tuple(files),
        masks=tuple((k, f"{rel_dir}/masks/{k}.png") for k in ("pattern", "veins", "shape")),
        margins=tuple(sorted(s.margins.items())),
        margins_ok=s.margins_ok,
        attempts=s.attempts,
        base_roi=(c.cx, c.cy, c.width, c.height),
    )
    return rec.normalized()


def generate_identity(index: int, cfg: PipelineConfig) -> dict:
    """Generate and write one identity; returns its summary."""
    root = Path(cfg.out)
    rel_dir = f"{index:05d}"
    d = root / rel_dir
    (d / "masks").mkdir(parents=True, exist_ok=True)
    variants = set(cfg.variants)

    def encode(ident: Identity, s: Sample):
        j = s.index
        blobs = {f"{rel_dir}/{j:03d}.png": _png(s.shaped)}
        if "full" in variants:
            blobs[f"{rel_dir}/{j:03d}_full.png"] = _png(s.full)
        if "roi" in variants:
            blobs[f"{rel_dir}/{j:03d}_roi.png"] = _png(s.roi_image)
        blobs[f"{rel_dir}/{j:03d}.xml"] = record_to_xml(sample_record(ident, s, rel_dir, variants))
        return j, s.margins_ok, blobs

    ident, encoded = realize_identity(cfg.master_seed, index, cfg, encode, variants)
    id_files: dict[str, str] = {}
    for name, m in (("pattern", ident.template_mask), ("veins", ident.veins), ("shape", ident.model.shape.mask)):
        _put(root, f"{rel_dir}/masks/{name}.png", _mask_png(m), id_files)
    entries = [{"type": "identity", "identity": index, "files": id_files}]
    failures = 0
    for j, ok, blobs in encoded:
        failures += not ok
        files: dict[str, str] = {}
        for rel, data in blobs.items():
            _put(root, rel, data, files)
        entries.append({"type": "sample", "identity": index, "sample": j, "files": files})
    summary = {
        "identity": index,
        "config_hash": cfg.config_hash(),
        "attempts": ident.attempts,
        "margin_failures": failures,
        "entries": entries,
    }
    tmp = d / (DONE_NAME + ".tmp")
    tmp.write_text(json.dumps(summary, sort_keys=True))
    os.replace(tmp, d / DONE_NAME)
    return summary


def _load_done(root: Path, index: int, cfg: PipelineConfig) -> dict | None:
    path = root / f"{index:05d}" / DONE_NAME
    if not path.is_file():
        return None
    try:
        summary = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError):
        return None
    if summary.get("config_hash") != cfg.config_hash():
        return None
    for e in summary["entries"]:
        for rel, digest in e["files"].items():
            p = root / rel
            if not p.is_file() or file_digest(p) != digest:
                logger.info("identity %d: %s changed since it was written; regenerating", index, rel)
                return None
    return summary


def _worker_init():
    cv2.setNumThreads(1)


def _safe_identity(args):
    index, cfg = args
    try:
        return generate_identity(index, cfg)
    except (PatternError, FingerModelError) as e:
        logger.error("identity %d failed: %s", index, e)
        return {"identity": index, "failed": str(e)}


@dataclass
class RunReport:
    manifest: Manifest | None
    generated: int
    resumed: int
    failed_identities: list[int]
    margin_failures: int
    samples: int
    seconds: float

    @property
    def samples_per_second(self) -> float:
        return self.samples / self.seconds if self.seconds > 0 else float("inf")


def generate_dataset(cfg: PipelineConfig, *, resume: bool = True, stop_after: int | None = None) -> RunReport:
    """Generate every identity of ``cfg`` and write the manifest last.

    ``stop_after`` ends the run after that many newly generated identities
    without writing a manifest (used to simulate interruption).
    """
    root = Path(cfg.out)
    root.mkdir(parents=True, exist_ok=True)
    summaries: dict[int, dict] = {}
    todo = []
    for i in cfg.identity_ids:
        done = _load_done(root, i, cfg) if resume else None
        if done is not None:
            summaries[i] = done
        else:
            todo.append(i)
    resumed = len(summaries)
    if stop_after is not None:
        todo = todo[:stop_after]
    t0 = time.perf_counter()
    jobs = [(i, cfg) for i in todo]
    if cfg.workers == 1:
        prev = cv2.getNumThreads()
        cv2.setNumThreads(1)
        try:
            results = [_safe_identity(j) for j in jobs]
        finally:
            cv2.setNumThreads(prev)
    else:
        with ProcessPoolExecutor(cfg.workers, initializer=_worker_init) as pool:
            results = list(pool.map(_safe_identity, jobs, chunksize=1))
    seconds = time.perf_counter() - t0
    failed = []
    for r in results:
        if "failed" in r:
            failed.append(r["identity"])
        else:
            summaries[r["identity"]] = r
    n_new = sum(1 for r in results if "failed" not in r) * cfg.samples_per_identity
    margin_failures = sum(s.get("margin_failures", 0) for s in summaries.values())
    report = RunReport(None, len(results) - len(failed), resumed, failed, margin_failures, n_new, seconds)
    if stop_after is not None and len(summaries) + len(failed) < cfg.identities:
        return report
    total_samples = cfg.identities * cfg.samples_per_identity
    failure_rate = (len(failed) * cfg.samples_per_identity + margin_failures) / total_samples
    ok_ids = sorted(summaries)
    manifest = build_manifest(
        (e for i in ok_ids for e in summaries[i]["entries"]),
        master_seed=cfg.master_seed,
        config_hash=cfg.config_hash(),
        identities=ok_ids,
        samples_per_identity=cfg.samples_per_identity,
    )
    manifest.header["failed_identities"] = failed
    manifest.header["margin_failures"] = margin_failures
    write_manifest(manifest, root)
    report.manifest = manifest
    if failure_rate > cfg.max_failure_rate:
        raise GenerationError(
            f"failure rate {failure_rate:.4%} exceeds bound {cfg.max_failure_rate:.4%} "
            f"(failed identities {failed}, margin failures {margin_failures})"
        )
    return report


def verify_dataset(root: str | Path) -> Manifest:
    """Raise :class:`IntegrityError` if any listed file is missing or altered."""
    try:
        manifest = read_manifest(root)
    except ManifestError as e:
        raise IntegrityError([str(e)]) from e
    bad = verify_manifest(root, manifest)
    if bad:
        raise IntegrityError(bad)
    return manifest


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalConfig:
    """What to embed and how to score it.

    ``samples_per_identity`` (None = all) is the seeded uniform subsample
    that feeds uniqueness, consistency and the score distributions.
    ``diversity_samples`` caps the geometric-only and exposure-only subsets
    used for D_intra. Both subsamples are drawn per identity from
    ``derive_seed(seed, identity, "eval")``.
    """

    r: float = 0.2
    seed: int = 0
    samples_per_identity: int | None = None
    diversity_samples: int | None = None
    impostor_cap: int = 1_000_000
    workers: int = 1
    embed: EmbedConfig = field(default_factory=EmbedConfig)

    @property
    def metric_config(self) -> MetricConfig:
        return MetricConfig(r=self.r, impostor_cap=self.impostor_cap, seed=self.seed)


def is_exposure_only(p: VariationParams) -> bool:
    return p.is_geometric_identity and p.blur is None and p.exposure is not None


def is_geometric_only(p: VariationParams) -> bool:
    return p.geometric_only and not p.is_geometric_identity


def eval_selection(identity: int, params: list[VariationParams], ecfg: EvalConfig) -> dict[str, list[int]]:
    """Sample indices per evaluation subset for one identity."""
    rng = make_rng(derive_seed(ecfg.seed, identity, "eval"))
    n = len(params)

    def pick(idx, k):
        idx = list(idx)
        if k is None or k >= len(idx):
            return idx
        return sorted(int(i) for i in rng.choice(idx, size=k, replace=False))

    return {
        "all": pick(range(n), ecfg.samples_per_identity),
        "geometric": pick([j for j, p in enumerate(params) if is_geometric_only(p)], ecfg.diversity_samples),
        "exposure": pick([j for j, p in enumerate(params) if is_exposure_only(p)], ecfg.diversity_samples),
    }


def sample_features(embedder: Embedder, shaped, roi_image, p, shape, center, base_roi: RoiBox):
    """(aligned, raw) embeddings of one sample.

    ``aligned`` embeds the centre-view ROI recovered through the recorded
    pose; ``raw`` embeds the emitted ROI crop as is.
    """
    x = np.asarray(shaped)
    x = x.astype(np.float32) / 255.0 if x.dtype == np.uint8 else x.astype(np.float32)
    return embedder(aligned_roi(x, p, shape, center, base_roi)), embedder(roi_image)


def _identity_from_disk(args):
    root, index, entries, ecfg = args
    root = Path(root)
    recs = {e["sample"]: read_annotation(root / next(f for f in e["files"] if f.endswith(".xml"))) for e in entries}
    order = sorted(recs)
    params = [recs[j].params for j in order]
    sel = eval_selection(index, params, ecfg)
    needed = sorted({order[k] for v in sel.values() for k in v})
    first = recs[order[0]]
    shape = FingerShape.from_mask(read_bitmask(root / first.mask("shape")))
    emb = Embedder(ecfg.embed)
    feats = {}
    for j in needed:
        rec = recs[j]
        shaped = cv2.imread(str(root / rec.image), cv2.IMREAD_GRAYSCALE)
        roi_path = rec.file("roi")
        if roi_path is not None:
            roi_img = cv2.imread(str(root / roi_path), cv2.IMREAD_GRAYSCALE)
        else:
            roi_img = quantize(crop_roi(shaped.astype(np.float32) / 255.0, RoiBox(*rec.roi)).pixels)
        feats[j] = sample_features(emb, shaped, roi_img, rec.params, shape, rec.center, RoiBox(*rec.base_roi))
    return index, {k: [order[i] for i in v] for k, v in sel.items()}, feats


def _identity_in_memory(args):
    master_seed, index, pcfg, ecfg = args
    ident = build_identity(master_seed, index, pcfg)
    params = list(ident.plan.samples[: pcfg.samples_per_identity])
    sel = eval_selection(index, params, ecfg)
    needed = sorted({j for v in sel.values() for j in v})
    m = ident.model
    emb = Embedder(ecfg.embed)
    feats = {}
    for j in needed:
        s = make_sample(ident, j, pcfg, ("roi",))
        feats[j] = sample_features(
            emb, quantize(s.shaped), quantize(s.roi_image), s.params, m.shape, (m.roi.cx, m.roi.cy), m.roi
        )
    return index, sel, feats


def _run_eval(jobs, fn, workers: int) -> list:
    if workers == 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(workers, initializer=_worker_init) as pool:
        return list(pool.map(fn, jobs, chunksize=1))


def _report(results, ecfg: EvalConfig, extra: dict) -> MetricReport:
    results = sorted(results, key=lambda r: r[0])
    aligned = [np.stack([feats[j][0] for j in sel["all"]]) for _, sel, feats in results]
    div = {}
    for subset in ("all", "geometric", "exposure"):
        for k, name in ((1, "raw"), (0, "aligned")):
            per = [np.stack([feats[j][k] for j in sel[subset]]) for _, sel, feats in results if sel[subset]]
            sizes = {len(a) for a in per}
            if len(per) == len(results) and len(sizes) == 1 and sizes.pop() >= 2:
                div[f"{name}:{subset}"] = per
    extra = {
        "distance": "cosine, 1 - dot(f_i, f_j)",
        "eval_seed": ecfg.seed,
        "projection_seed": ecfg.embed.projection_seed,
        "samples_per_identity": ecfg.samples_per_identity or "all",
        "diversity_samples": ecfg.diversity_samples or "all",
        "identities": len(results),
        "features": "U_class, C_intra and scores on aligned ROIs; D_intra on raw and aligned ROIs",
        **extra,
    }
    return evaluate_features(aligned, ecfg.metric_config, div, extra)


def evaluate_dataset(root: str | Path, ecfg: EvalConfig | None = None, report_path: str | Path | None = None) -> MetricReport:
    """Verify the manifest, embed the (subsampled) samples and compute all metrics.

    Raises :class:`IntegrityError` naming the offending files if any
    checksum fails.
    """
    ecfg = ecfg or EvalConfig()
    root = Path(root)
    manifest = verify_dataset(root)
    by_id: dict[int, list[dict]] = {}
    for e in manifest.sample_entries:
        by_id.setdefault(e["identity"], []).append(e)
    jobs = [(str(root), i, by_id[i], ecfg) for i in sorted(by_id)]
    results = _run_eval(jobs, _identity_from_disk, ecfg.workers)
    report = _report(results, ecfg, {"dataset": str(root), "master_seed": manifest.header.get("master_seed")})
    if report_path is not None:
        Path(report_path).write_text(report.to_text())
    return report


def evaluate_in_memory(pcfg: PipelineConfig, ecfg: EvalConfig | None = None) -> MetricReport:
    """The metrics of :func:`evaluate_dataset` without writing the dataset.

    Only the selected samples are rendered, so large identity counts stay
    affordable. Identities and samples are the ones a written run would
    produce.
    """
    ecfg = ecfg or EvalConfig()
    jobs = [(pcfg.master_seed, i, pcfg, ecfg) for i in pcfg.identity_ids]
    results = _run_eval(jobs, _identity_in_memory, ecfg.workers)
    return _report(results, ecfg, {"dataset": "in-memory", "master_seed": pcfg.master_seed})
