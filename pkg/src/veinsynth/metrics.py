"""Dataset evaluation: a baseline vein embedding and the identity metrics.

The embedding stands in for a trained recognition network. It is a fixed,
deterministic pipeline on a 200 x 600 ROI image:

1. local contrast normalization, ``(x - mean) / sqrt(var + eps)`` with
   Gaussian-weighted local statistics;
2. dark-ridge energy at 8 orientations, ``max(0, -(G_theta * x))`` for
   zero-mean even Gabor filters ``G_theta``;
3. average pooling of each orientation map onto a 16 x 48 grid;
4. a seeded Gaussian random projection of the 6144 pooled values to 512
   dimensions, followed by unit normalization.

All metrics use cosine distance ``d(a, b) = 1 - a.b`` on unit vectors.
``class_features`` arguments are sequences (one per class, in class-id
order) of ``(n_c, dim)`` arrays.

* :func:`uniqueness` packs r-balls around the class centres greedily in
  class-id order and reports the accepted fraction.
* :func:`intra_consistency` is the fraction of samples closer than ``r`` to
  their own class centre.
* :func:`intra_diversity` is the per-class fraction of sample pairs farther
  apart than ``r`` (``mode="printed"`` counts pairs closer than ``r``),
  averaged over classes.
* :func:`score_distributions` collects genuine and impostor similarities
  and their histograms (bins of 0.01 over [-1, 1]).
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Sequence

import cv2
import numpy as np

from .seeding import make_rng

logger = logging.getLogger(__name__)

ROI_SHAPE = (200, 600)


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# embedding


@dataclass(frozen=True)
class EmbedConfig:
    dim: int = 512
    grid: tuple[int, int] = (16, 48)  # rows, columns
    orientations: int = 8
    work_scale: float = 0.5  # filtering runs at this fraction of the ROI size
    lcn_sigma: float = 8.0  # in ROI pixels
    lcn_eps: float = 1e-4
    gabor_sigma: float = 3.0  # in ROI pixels
    wavelength: float = 10.0  # in ROI pixels
    aspect: float = 0.5
    projection_seed: int = 0x5EED

    def __post_init__(self):
        if self.dim < 1 or self.orientations < 1 or min(self.grid) < 1:
            raise MetricError("embedding sizes must be positive")
        if not 0 < self.work_scale <= 1:
            raise MetricError("work_scale must lie in (0, 1]")


class Embedder:
    """Callable embedding with its filters and projection precomputed."""

    def __init__(self, cfg: EmbedConfig | None = None):
        self.cfg = cfg = cfg or EmbedConfig()
        s = cfg.work_scale
        self.work = (round(ROI_SHAPE[0] * s), round(ROI_SHAPE[1] * s))
        sigma = cfg.gabor_sigma * s
        half = int(np.ceil(3 * sigma))
        self.kernels = []
        for t in range(cfg.orientations):
            k = cv2.getGaborKernel(
                (2 * half + 1, 2 * half + 1), sigma, np.pi * t / cfg.orientations,
                cfg.wavelength * s, cfg.aspect, 0, cv2.CV_64F,
            )
            k -= k.mean()
            k /= np.abs(k).sum()
            self.kernels.append(k.astype(np.float32))
        n_in = cfg.orientations * cfg.grid[0] * cfg.grid[1]
        rng = make_rng(cfg.projection_seed)
        self.projection = (rng.standard_normal((n_in, cfg.dim)) / np.sqrt(cfg.dim)).astype(np.float32)

    def pooled(self, roi) -> np.ndarray:
        """Orientation x grid ridge energies before projection."""
        x = np.asarray(roi)
        if x.shape != ROI_SHAPE:
            raise MetricError(f"embedding expects a {ROI_SHAPE[0]}x{ROI_SHAPE[1]} ROI image, got {x.shape}")
        if x.dtype == np.uint8:
            x = x.astype(np.float32) / 255.0
        else:
            x = x.astype(np.float32)
        if not np.isfinite(x).all():
            raise MetricError("ROI image has non-finite pixels")
        cfg = self.cfg
        x = cv2.resize(x, self.work[::-1], interpolation=cv2.INTER_AREA)
        sig = cfg.lcn_sigma * cfg.work_scale
        mu = cv2.GaussianBlur(x, (0, 0), sig)
        var = cv2.GaussianBlur((x - mu) ** 2, (0, 0), sig)
        y = (x - mu) / np.sqrt(var + cfg.lcn_eps)
        gh, gw = cfg.grid
        maps = []
        for k in self.kernels:
            # a dark ridge gives a negative response to the centre-positive kernel
            r = np.maximum(-cv2.filter2D(y, -1, k, borderType=cv2.BORDER_REFLECT), 0.0)
            maps.append(cv2.resize(r, (gw, gh), interpolation=cv2.INTER_AREA))
        return np.stack(maps)

    def __call__(self, roi) -> np.ndarray:
        f = (self.pooled(roi).ravel() @ self.projection).astype(np.float64)
        n = float(np.linalg.norm(f))
        if n == 0.0:
            raise MetricError("ROI has no ridge energy (blank image)")
        return f / n

    def batch(self, rois) -> np.ndarray:
        return np.stack([self(r) for r in rois]) if len(rois) else np.zeros((0, self.cfg.dim))


@lru_cache(maxsize=4)
def _embedder(cfg: EmbedConfig) -> Embedder:
    return Embedder(cfg)


def embed(roi, cfg: EmbedConfig | None = None) -> np.ndarray:
    """Unit-norm feature vector of a 200 x 600 ROI image (uint8 or [0, 1] floats)."""
    return _embedder(cfg or EmbedConfig())(roi)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricConfig:
    r: float = 0.2
    diversity_mode: str = "prose"  # "prose": d > r counts; "printed": d < r counts
    impostor_cap: int = 1_000_000
    seed: int = 0
    bin_width: float = 0.01

    def __post_init__(self):
        if not 0 < self.r < 2:
            raise MetricError(f"r must lie in (0, 2), got {self.r}")
        if self.diversity_mode not in ("prose", "printed"):
            raise MetricError(f"unknown diversity mode {self.diversity_mode!r}")
        if self.impostor_cap < 1:
            raise MetricError("impostor_cap must be positive")
        n = 2.0 / self.bin_width
        if self.bin_width <= 0 or abs(n - round(n)) > 1e-9:
            raise MetricError("bin_width must divide 2 evenly")


def _classes(class_features) -> list[np.ndarray]:
    out = []
    for i, f in enumerate(class_features):
        a = np.asarray(f, dtype=np.float64)
        if a.ndim == 1:
            a = a[None, :]
        if a.ndim != 2 or len(a) == 0:
            raise MetricError(f"class {i} has no samples")
        out.append(a)
    if not out:
        raise MetricError("no classes given")
    dims = {a.shape[1] for a in out}
    if len(dims) != 1:
        raise MetricError(f"feature dimensions differ between classes: {sorted(dims)}")
    return out


def class_centers(class_features) -> np.ndarray:
    """Renormalized class means (a mean of exactly zero stays zero)."""
    cen = np.stack([a.mean(axis=0) for a in _classes(class_features)])
    n = np.linalg.norm(cen, axis=1, keepdims=True)
    return np.divide(cen, n, out=np.zeros_like(cen), where=n > 0)


@dataclass
class Uniqueness:
    u_class: float
    unique: list[int]  # accepted class ids, in acceptance order
    classes: int

    @property
    def size(self) -> int:
        return len(self.unique)


def uniqueness(class_features, cfg: MetricConfig | None = None) -> Uniqueness:
    cfg = cfg or MetricConfig()
    cen = class_centers(class_features)
    accepted: list[int] = []
    for c in range(len(cen)):
        if not accepted or np.all(1.0 - cen[accepted] @ cen[c] > cfg.r):
            accepted.append(c)
    return Uniqueness(len(accepted) / len(cen), accepted, len(cen))


def intra_consistency(class_features, cfg: MetricConfig | None = None) -> float:
    cfg = cfg or MetricConfig()
    classes = _classes(class_features)
    cen = class_centers(classes)
    hits = sum(int(np.count_nonzero(1.0 - a @ cen[c] < cfg.r)) for c, a in enumerate(classes))
    return hits / sum(len(a) for a in classes)


def intra_diversity(class_features, cfg: MetricConfig | None = None, mode: str | None = None) -> float:
    cfg = cfg or MetricConfig()
    mode = mode or cfg.diversity_mode
    if mode not in ("prose", "printed"):
        raise MetricError(f"unknown diversity mode {mode!r}")
    classes = _classes(class_features)
    sizes = {len(a) for a in classes}
    if len(sizes) != 1:
        raise MetricError(f"diversity needs equal class sizes, got {sorted(sizes)}")
    n = sizes.pop()
    if n < 2:
        raise MetricError("diversity needs at least 2 samples per class")
    iu = np.triu_indices(n, 1)
    total = 0.0
    for a in classes:
        d = (1.0 - a @ a.T)[iu]
        hits = np.count_nonzero(d > cfg.r) if mode == "prose" else np.count_nonzero(d < cfg.r)
        total += 2.0 * hits / (n * (n - 1))
    return total / len(classes)


@dataclass
class ScoreStats:
    count: int
    mean: float
    var: float


@dataclass
class ScoreDistributions:
    genuine: np.ndarray
    impostor: np.ndarray
    edges: np.ndarray
    genuine_hist: np.ndarray
    impostor_hist: np.ndarray
    impostor_sampled: bool
    single_class: bool

    @staticmethod
    def _stats(x) -> ScoreStats:
        if len(x) == 0:
            return ScoreStats(0, float("nan"), float("nan"))
        return ScoreStats(len(x), float(x.mean()), float(x.var()))

    @property
    def genuine_stats(self) -> ScoreStats:
        return self._stats(self.genuine)

    @property
    def impostor_stats(self) -> ScoreStats:
        return self._stats(self.impostor)

    @property
    def gap(self) -> float:
        return self.genuine_stats.mean - self.impostor_stats.mean


def histogram_edges(bin_width: float = 0.01) -> np.ndarray:
    n = int(round(2.0 / bin_width))
    return -1.0 + bin_width * np.arange(n + 1)


def score_distributions(class_features, cfg: MetricConfig | None = None) -> ScoreDistributions:
    """Genuine (same class, i < j) and impostor (different class) similarities.

    Impostor pairs are enumerated when there are at most ``impostor_cap`` of
    them; otherwise ``impostor_cap`` pairs are drawn uniformly (with
    replacement) from the seeded stream ``cfg.seed``. Bin ``k`` covers
    ``[-1 + k w, -1 + (k + 1) w)``; the last bin also holds 1.0.
    """
    cfg = cfg or MetricConfig()
    classes = _classes(class_features)
    genuine = np.concatenate(
        [(a @ a.T)[np.triu_indices(len(a), 1)] for a in classes] + [np.zeros(0)]
    )
    feats = np.concatenate(classes)
    labels = np.repeat(np.arange(len(classes)), [len(a) for a in classes])
    sizes = np.array([len(a) for a in classes], dtype=np.int64)
    n_imp = int((sizes.sum() ** 2 - (sizes**2).sum()) // 2)
    sampled = n_imp > cfg.impostor_cap
    if n_imp == 0:
        impostor = np.zeros(0)
    elif not sampled:
        parts = []
        for c in range(len(classes) - 1):
            rest = feats[labels > c]
            parts.append((classes[c] @ rest.T).ravel())
        impostor = np.concatenate(parts)
    else:
        rng = make_rng(cfg.seed)
        i_idx = np.empty(0, np.int64)
        j_idx = np.empty(0, np.int64)
        while len(i_idx) < cfg.impostor_cap:
            i = rng.integers(0, len(feats), cfg.impostor_cap)
            j = rng.integers(0, len(feats), cfg.impostor_cap)
            ok = labels[i] != labels[j]
            i_idx = np.concatenate([i_idx, i[ok]])
            j_idx = np.concatenate([j_idx, j[ok]])
        i_idx, j_idx = i_idx[: cfg.impostor_cap], j_idx[: cfg.impostor_cap]
        impostor = np.concatenate([
            np.einsum("ij,ij->i", feats[i_idx[k:k + 65536]], feats[j_idx[k:k + 65536]])
            for k in range(0, len(i_idx), 65536)
        ])
    edges = histogram_edges(cfg.bin_width)
    clip = lambda x: np.clip(x, -1.0, 1.0)  # noqa: E731  (rounding can leave |s| = 1 + 1e-16)
    gh = np.histogram(clip(genuine), edges)[0]
    ih = np.histogram(clip(impostor), edges)[0]
    if len(classes) == 1:
        logger.warning("single class: impostor distribution is empty")
    return ScoreDistributions(genuine, impostor, edges, gh, ih, sampled, len(classes) == 1)


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricReport:
    config: MetricConfig
    uniqueness: Uniqueness
    consistency: float
    diversity: dict[str, float]  # label -> D_intra
    scores: ScoreDistributions
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        g, i = self.scores.genuine_stats, self.scores.impostor_stats
        return {
            "r": self.config.r,
            "distance": "cosine (1 - dot)",
            "classes": self.uniqueness.classes,
            "U_class": self.uniqueness.u_class,
            "unique_set_size": self.uniqueness.size,
            "C_intra": self.consistency,
            **{f"D_intra[{k}]": v for k, v in self.diversity.items()},
            "genuine_mean": g.mean,
            "genuine_var": g.var,
            "genuine_count": g.count,
            "impostor_mean": i.mean,
            "impostor_var": i.var,
            "impostor_count": i.count,
            "impostor_sampled": self.scores.impostor_sampled,
            "single_class": self.scores.single_class,
            "score_gap": self.scores.gap,
            **self.extra,
        }

    def to_text(self) -> str:
        out = io.StringIO()
        out.write("# veinsynth metric report\n\n[config]\n")
        for k, v in asdict(self.config).items():
            out.write(f"{k} = {v}\n")
        for k, v in self.extra.items():
            out.write(f"{k} = {v}\n")
        s = self.summary()
        out.write("\n[uniqueness]\n")
        out.write(f"U_class = {s['U_class']:.6f}\nunique_set_size = {s['unique_set_size']}\nclasses = {s['classes']}\n")
        out.write("\n[consistency]\n")
        out.write(f"C_intra = {s['C_intra']:.6f}\n")
        out.write("\n[diversity]\n")
        for k, v in self.diversity.items():
            out.write(f"D_intra[{k}] = {v:.6f}\n")
        out.write("\n[scores]\n")
        for kind in ("genuine", "impostor"):
            out.write(
                f"{kind}: count = {s[kind + '_count']}, mean = {s[kind + '_mean']:.6f}, var = {s[kind + '_var']:.6f}\n"
            )
        out.write(f"gap = {s['score_gap']:.6f}\nimpostor_sampled = {s['impostor_sampled']}\n")
        if self.scores.single_class:
            out.write("note = single class, impostor set empty\n")
        out.write("\n[histogram]\n")
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "genuine", "impostor"])
        e = self.scores.edges
        for k in range(len(e) - 1):
            w.writerow([f"{e[k]:.2f}", f"{e[k + 1]:.2f}", int(self.scores.genuine_hist[k]), int(self.scores.impostor_hist[k])])
        return out.getvalue()


def evaluate_features(
    class_features: Sequence,
    cfg: MetricConfig | None = None,
    diversity_sets: dict[str, Sequence] | None = None,
    extra: dict | None = None,
) -> MetricReport:
    """All metrics on one feature set.

    ``diversity_sets`` maps a label to per-class feature lists with equal
    class sizes; D_intra is reported for each in both modes. Without it,
    ``class_features`` itself is used when its classes have equal sizes.
    """
    cfg = cfg or MetricConfig()
    if diversity_sets is None:
        sizes = {len(np.atleast_2d(a)) for a in class_features}
        diversity_sets = {"all": class_features} if len(sizes) == 1 and sizes.pop() >= 2 else {}
    div = {}
    for label, feats in diversity_sets.items():
        div[f"{label},prose"] = intra_diversity(feats, cfg, "prose")
        div[f"{label},printed"] = intra_diversity(feats, cfg, "printed")
    return MetricReport(
        cfg,
        uniqueness(class_features, cfg),
        intra_consistency(class_features, cfg),
        div,
        score_distributions(class_features, cfg),
        dict(extra or {}),
    )
