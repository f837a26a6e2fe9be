"""Vein identity patterns: turtle interpretation, composition, smoothing, raster.

Coordinate frame: ``x`` runs along the finger from base (0) to tip
(``width - 1``), ``y`` runs down the image. Headings are in degrees with 0
pointing tip-ward and positive angles turning *up* (towards smaller ``y``).

Turtle alphabet:

``F``  step forward
``+``  turn up by the configured angle
``-``  turn down by the configured angle
``[``  push state and start a child branch (width decays)
``]``  pop state and return to the parent branch

Any other symbol (grammar variables) is ignored by the turtle.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grammar import Grammar, ProductionRule, expand
from .seeding import derive_seed, make_rng


class PatternError(ValueError):
    """Degenerate vein pattern."""


@dataclass(frozen=True)
class TurtleConfig:
    step: float = 6.0
    turn: float = 15.0
    start_width: float = 5.0
    decay: float = 0.85
    growth_axis: tuple[float, float] = (1.0, 0.0)

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.start_width < 1:
            raise ValueError("start width must be at least 1 px")
        if not (0 < self.decay <= 1):
            raise ValueError("decay must lie in (0, 1]")


@dataclass(frozen=True)
class Region:
    """Axis-aligned pixel region ``[x0, x1) x [y0, y1)``."""

    x0: float
    x1: float
    y0: float
    y1: float

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1


@dataclass(frozen=True)
class PatternTemplate:
    """Raster frame ``T`` split into upper / middle / lower bands."""

    width: int = 600
    height: int = 300
    band_fractions: tuple[float, float] = (0.25, 0.75)

    @property
    def bands(self) -> dict[str, tuple[int, int]]:
        a = int(round(self.band_fractions[0] * self.height))
        b = int(round(self.band_fractions[1] * self.height))
        return {"upper": (0, a), "middle": (a, b), "lower": (b, self.height)}

    def band_region(self, name: str, x0: float = 0.0, x1: float | None = None) -> Region:
        y0, y1 = self.bands[name]
        return Region(x0, self.width if x1 is None else x1, y0, y1)


@dataclass
class VeinGraph:
    """Polyline vein network.

    ``runs`` are polylines given as node-index lists. The first node of a
    child run is the branch point it shares with (or copies from) its parent
    run. ``parents[i]`` is the parent run index or ``-1`` for a root run.
    """

    nodes: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    widths: np.ndarray = field(default_factory=lambda: np.zeros(0))
    runs: list[list[int]] = field(default_factory=list)
    parents: list[int] = field(default_factory=list)
    kinds: list[str] = field(default_factory=list)
    middle_branch_counts: list[int] = field(default_factory=list)
    smoothed: bool = False

    def __len__(self) -> int:
        return len(self.nodes)

    def segments(self):
        """Yield ``(p, q, w_p, w_q)`` for every consecutive node pair."""
        for run in self.runs:
            for a, b in zip(run[:-1], run[1:]):
                yield self.nodes[a], self.nodes[b], self.widths[a], self.widths[b]

    def degrees(self) -> np.ndarray:
        deg = np.zeros(len(self.nodes), dtype=int)
        for run in self.runs:
            for a, b in zip(run[:-1], run[1:]):
                deg[a] += 1
                deg[b] += 1
        return deg

    def leaves(self) -> list[int]:
        """Degree-1 nodes other than the first node of each root run."""
        roots = {run[0] for run, p in zip(self.runs, self.parents) if p < 0}
        deg = self.degrees()
        return [i for i in range(len(deg)) if deg[i] == 1 and i not in roots]

    def run_points(self, i: int) -> np.ndarray:
        return self.nodes[self.runs[i]]

    def main_runs(self) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k == "main"]

    def union(self, other: "VeinGraph") -> "VeinGraph":
        off = len(self.nodes)
        roff = len(self.runs)
        return VeinGraph(
            nodes=np.vstack([self.nodes, other.nodes]) if len(other.nodes) else self.nodes,
            widths=np.concatenate([self.widths, other.widths]),
            runs=self.runs + [[i + off for i in r] for r in other.runs],
            parents=self.parents + [p + roff if p >= 0 else -1 for p in other.parents],
            kinds=self.kinds + other.kinds,
            middle_branch_counts=self.middle_branch_counts + other.middle_branch_counts,
            smoothed=self.smoothed and other.smoothed,
        )


@dataclass
class PatternMask:
    mask: np.ndarray
    seed: int

    @property
    def foreground_fraction(self) -> float:
        return float(self.mask.mean())

    def save_png(self, path: str | Path) -> Path:
        from .annotations import write_bitmask

        return write_bitmask(self.mask, path)


@dataclass(frozen=True)
class DirectionProbs:
    """Probabilities of turning up, turning down and going straight."""

    up: float
    down: float
    forward: float

    def __post_init__(self):
        vals = (self.up, self.down, self.forward)
        if min(vals) < 0 or abs(sum(vals) - 1.0) > 1e-9:
            raise ValueError(f"invalid direction probabilities {vals}")


@dataclass(frozen=True)
class CompositionConfig:
    """Band grammar probabilities and layout of one vein identity."""

    upper: DirectionProbs = DirectionProbs(0.1, 0.1, 0.8)
    middle: DirectionProbs = DirectionProbs(0.25, 0.25, 0.5)
    lower: DirectionProbs = DirectionProbs(0.1, 0.1, 0.8)
    main_width: float = 5.0
    middle_width: float = 3.0
    main_iterations: int = 140
    middle_iterations: int = 90
    main_heading_limit: float = 30.0
    main_margin: float = 10.0
    main_start_fraction: float = 0.08
    middle_x_range: tuple[float, float] = (0.05, 0.85)
    middle_count: tuple[int, int] = (3, 6)
    middle_heading: tuple[float, float] = (30.0, 60.0)
    middle_heading_limit: tuple[float, float] = (10.0, 80.0)
    twig_probability: float = 0.04
    samples_per_segment: int = 4
    plausible_fraction: tuple[float, float] = (0.02, 0.25)


# ---------------------------------------------------------------------------
# grammars


def main_vessel_grammar(p: DirectionProbs) -> Grammar:
    rules = [
        ProductionRule("X", "FX", p.forward),
        ProductionRule("X", "+FX", p.up),
        ProductionRule("X", "-FX", p.down),
    ]
    return Grammar(
        frozenset("X"), frozenset("F+-[]"), "X", tuple(r for r in rules if r.probability > 0)
    )


def middle_vein_grammar(p: DirectionProbs, twig: float = 0.04) -> Grammar:
    """Middle-vein grammar: ``X`` steps per ``p``, ``T`` sprouts short twigs.

    ``T -> +-`` is a net-zero turn used as the "no twig" outcome so every
    body stays non-empty. Twigs are wandering ``Y`` runs that stop
    with probability 0.25 per step.
    """
    rules = [
        ProductionRule("X", "FTX", p.forward),
        ProductionRule("X", "+FTX", p.up),
        ProductionRule("X", "-FTX", p.down),
        ProductionRule("T", "[++Y]", twig),
        ProductionRule("T", "[--Y]", twig),
        ProductionRule("T", "+-", 1.0 - 2 * twig),
        ProductionRule("Y", "FY", 0.55),
        ProductionRule("Y", "+FY", 0.1),
        ProductionRule("Y", "-FY", 0.1),
        ProductionRule("Y", "F", 0.25),
    ]
    return Grammar(
        frozenset("XTY"), frozenset("F+-[]"), "X", tuple(r for r in rules if r.probability > 0)
    )


# ---------------------------------------------------------------------------
# turtle


def _clip_to_bounds(p, q, width, height):
    """Clip segment p->q to the box [0, width-1] x [0, height-1] (Liang-Barsky)."""
    x0, y0 = p
    dx, dy = q[0] - x0, q[1] - y0
    t1 = 1.0
    for num, den in (
        (x0, -dx),
        (width - 1 - x0, dx),
        (y0, -dy),
        (height - 1 - y0, dy),
    ):
        if den > 0:
            t1 = min(t1, num / den)
    t1 = max(t1, 0.0)
    return (x0 + t1 * dx, y0 + t1 * dy)


def interpret(
    s: str,
    cfg: TurtleConfig,
    band: Region,
    seed: int,
    *,
    bounds: tuple[int, int] = (600, 300),
    start: tuple[float, float] | None = None,
    heading: float = 0.0,
    heading_limit: tuple[float, float] | None = None,
    confine: Region | None = None,
    stop: Callable[[float, float], tuple[float, float] | None] | None = None,
    width: float | None = None,
    kind: str = "middle",
) -> VeinGraph:
    """Parse a turtle string into a :class:`VeinGraph`.

    The start point is drawn uniformly inside ``band`` from ``seed`` unless
    ``start`` is given. ``heading_limit`` clamps the absolute heading;
    ``confine`` steers a run back whenever it leaves the region vertically.
    ``stop(x, y)`` may return a terminal point, which ends the current run.
    Steps leaving ``bounds`` are clipped at the border and end the run.
    """
    if not s:
        raise ValueError("empty turtle string")
    w_bounds, h_bounds = bounds
    if start is None:
        rng = make_rng(seed)
        start = (
            band.x0 + rng.random() * (band.x1 - band.x0),
            band.y0 + rng.random() * (band.y1 - band.y0),
        )
    start = (
        min(max(float(start[0]), 0.0), w_bounds - 1.0),
        min(max(float(start[1]), 0.0), h_bounds - 1.0),
    )
    ax, ay = cfg.growth_axis
    base_angle = math.degrees(math.atan2(-ay, ax))
    w0 = cfg.start_width if width is None else width

    nodes = [start]
    widths = [w0]
    runs: list[list[int]] = [[0]]
    parents = [-1]
    alive = [True]

    cur_run = 0
    pos = start
    head = heading
    w = w0
    stack = []
    lo, hi = heading_limit if heading_limit is not None else (-math.inf, math.inf)

    for ch in s:
        if ch == "F":
            if not alive[cur_run]:
                continue
            if confine is not None:
                # steer back one turn step per move while outside the lane
                if pos[1] < confine.y0 and head > -cfg.turn:
                    head = max(head - cfg.turn, lo)
                elif pos[1] >= confine.y1 and head < cfg.turn:
                    head = min(head + cfg.turn, hi)
            a = math.radians(base_angle + head)
            q = (pos[0] + cfg.step * math.cos(a), pos[1] - cfg.step * math.sin(a))
            ended = False
            if not (0 <= q[0] <= w_bounds - 1 and 0 <= q[1] <= h_bounds - 1):
                q = _clip_to_bounds(pos, q, w_bounds, h_bounds)
                ended = True
            if stop is not None:
                hit = stop(q[0], q[1])
                if hit is not None:
                    q = hit
                    ended = True
            if q != pos:
                nodes.append(q)
                widths.append(w)
                runs[cur_run].append(len(nodes) - 1)
                pos = q
            if ended:
                alive[cur_run] = False
        elif ch == "+":
            head = min(max(head + cfg.turn, lo), hi)
        elif ch == "-":
            head = min(max(head - cfg.turn, lo), hi)
        elif ch == "[":
            stack.append((cur_run, pos, head, w))
            w = w * cfg.decay
            parent_node = runs[cur_run][-1]
            runs.append([parent_node])
            parents.append(cur_run)
            alive.append(alive[cur_run])
            cur_run = len(runs) - 1
        elif ch == "]":
            if not stack:
                raise ValueError("unbalanced ']' in turtle string")
            cur_run, pos, head, w = stack.pop()

    return _prune(
        VeinGraph(
            nodes=np.asarray(nodes, dtype=float).reshape(-1, 2),
            widths=np.asarray(widths, dtype=float),
            runs=runs,
            parents=parents,
            kinds=[kind] * len(runs),
        )
    )


def _prune(g: VeinGraph) -> VeinGraph:
    """Drop runs with fewer than two nodes, re-parenting their children."""
    keep = [len(r) >= 2 for r in g.runs]
    if all(keep):
        return g
    new_index = {}
    for i, k in enumerate(keep):
        if k:
            new_index[i] = len(new_index)

    def resolve(p):
        while p >= 0 and not keep[p]:
            p = g.parents[p]
        return new_index[p] if p >= 0 else -1

    runs, parents, kinds = [], [], []
    for i, k in enumerate(keep):
        if k:
            runs.append(g.runs[i])
            parents.append(resolve(g.parents[i]))
            kinds.append(g.kinds[i])
    if not runs:
        runs, parents, kinds = [], [], []
    return VeinGraph(
        g.nodes, g.widths, runs, parents, kinds, list(g.middle_branch_counts), g.smoothed
    )


# ---------------------------------------------------------------------------
# composition


def _polyline_y_at(points: np.ndarray, x: float) -> float:
    return float(np.interp(x, points[:, 0], points[:, 1]))


def compose_identity(
    seed: int,
    template: PatternTemplate | None = None,
    cfg: TurtleConfig | None = None,
    dir_probs: CompositionConfig | None = None,
) -> VeinGraph:
    """Compose one vein identity from upper, middle and lower band grammars.

    Two main vessels grow base-to-tip from the base end of the upper and
    lower bands. Each middle vein starts at a random point of the middle
    band and sends one or two branches (chosen with equal probability)
    towards the main vessels; a branch ends where it meets its target
    vessel, so every middle component is attached to a main vessel.
    """
    template = template or PatternTemplate()
    cfg = cfg or TurtleConfig()
    comp = dir_probs or CompositionConfig()
    W, H = template.width, template.height
    bounds = (W, H)

    mains = {}
    graph = VeinGraph()
    for band_name in ("upper", "lower"):
        probs = comp.upper if band_name == "upper" else comp.lower
        g_main = main_vessel_grammar(probs)
        s = expand(g_main, comp.main_iterations, derive_seed(seed, 0, f"{band_name}-string"))
        lane = template.band_region(band_name)
        lane = Region(lane.x0, lane.x1, lane.y0 + comp.main_margin, lane.y1 - comp.main_margin)
        vg = interpret(
            s,
            cfg,
            Region(0.0, comp.main_start_fraction * W, lane.y0, lane.y1),
            derive_seed(seed, 0, f"{band_name}-start"),
            bounds=bounds,
            heading_limit=(-comp.main_heading_limit, comp.main_heading_limit),
            confine=lane,
            width=comp.main_width,
            kind="main",
        )
        pts = vg.run_points(0)
        if pts[-1, 0] - pts[0, 0] < 0.8 * W:
            raise PatternError(f"{band_name} main vessel spans only {pts[-1, 0] - pts[0, 0]:.1f} px")
        mains[band_name] = pts
        graph = graph.union(vg)

    rng = make_rng(derive_seed(seed, 0, "middle-layout"))
    n_middle = int(rng.integers(comp.middle_count[0], comp.middle_count[1] + 1))
    g_mid = middle_vein_grammar(comp.middle, comp.twig_probability)
    mid_region = template.band_region(
        "middle", comp.middle_x_range[0] * W, comp.middle_x_range[1] * W
    )
    for k in range(n_middle):
        start = (
            mid_region.x0 + rng.random() * (mid_region.x1 - mid_region.x0),
            mid_region.y0 + rng.random() * (mid_region.y1 - mid_region.y0),
        )
        n_branches = int(rng.integers(1, 3))
        if n_branches == 2:
            targets = ["upper", "lower"]
        else:
            targets = ["upper" if rng.random() < 0.5 else "lower"]
        vein = VeinGraph(middle_branch_counts=[n_branches])
        for b, target in enumerate(targets):
            sign = 1.0 if target == "upper" else -1.0
            h0 = comp.middle_heading[0] + rng.random() * (
                comp.middle_heading[1] - comp.middle_heading[0]
            )
            lim = tuple(sorted((sign * comp.middle_heading_limit[0], sign * comp.middle_heading_limit[1])))
            main_pts = mains[target]

            def stop(x, y, main_pts=main_pts, sign=sign):
                if x > main_pts[-1, 0]:
                    return None
                my = _polyline_y_at(main_pts, x)
                if (sign > 0 and y <= my) or (sign < 0 and y >= my):
                    return (x, my)
                return None

            s = expand(g_mid, comp.middle_iterations, derive_seed(seed, k, f"middle-{b}-string"))
            br = interpret(
                s,
                cfg,
                mid_region,
                derive_seed(seed, k, f"middle-{b}"),
                bounds=bounds,
                start=start,
                heading=sign * h0,
                heading_limit=lim,
                stop=stop,
                width=comp.middle_width,
                kind="middle",
            )
            br = _attach(br, main_pts, comp.middle_width)
            vein = vein.union(br)
        graph = graph.union(vein)
    return graph


def _attach(br: VeinGraph, main_pts: np.ndarray, width: float) -> VeinGraph:
    """Ensure the trunk run of a middle branch ends on its main vessel."""
    if not br.runs:
        return br
    trunk = br.runs[0]
    end = br.nodes[trunk[-1]]
    x = min(max(end[0], main_pts[0, 0]), main_pts[-1, 0])
    my = _polyline_y_at(main_pts, x)
    if abs(end[1] - my) <= 1e-9 and abs(end[0] - x) <= 1e-9:
        return br
    nodes = np.vstack([br.nodes, [[x, my]]])
    widths = np.concatenate([br.widths, [br.widths[trunk[-1]]]])
    runs = [list(r) for r in br.runs]
    runs[0].append(len(nodes) - 1)
    return VeinGraph(nodes, widths, runs, list(br.parents), list(br.kinds), list(br.middle_branch_counts))


# ---------------------------------------------------------------------------
# smoothing


def quad_bezier(p0, p1, p2, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def _smooth_run(pts: np.ndarray, w: np.ndarray, n: int):
    """Piecewise quadratic Bezier through the midpoints of a polyline.

    Interior vertices act as control points; pieces join at edge midpoints.
    The two run endpoints are kept exactly. Every piece is sampled at ``n``
    parameter values including both ends.
    """
    if len(pts) <= 2:
        t = np.linspace(0.0, 1.0, n)
        out = pts[0] + t[:, None] * (pts[-1] - pts[0])
        out[0], out[-1] = pts[0], pts[-1]
        return out, w[0] + t * (w[-1] - w[0])
    t = np.linspace(0.0, 1.0, n)
    mids = 0.5 * (pts[:-1] + pts[1:])
    wm = 0.5 * (w[:-1] + w[1:])
    out_p = [pts[:1] + t[:, None] * (mids[0] - pts[0])]
    out_w = [w[0] + t * (wm[0] - w[0])]
    for i in range(1, len(pts) - 1):
        out_p.append(quad_bezier(mids[i - 1], pts[i], mids[i], t)[1:])
        out_w.append((wm[i - 1] + t * (wm[i] - wm[i - 1]))[1:])
    out_p.append((mids[-1] + t[:, None] * (pts[-1] - mids[-1]))[1:])
    out_w.append((wm[-1] + t * (w[-1] - wm[-1]))[1:])
    P = np.vstack(out_p)
    Wd = np.concatenate(out_w)
    P[0], P[-1] = pts[0], pts[-1]
    return P, Wd


def smooth(g: VeinGraph, samples_per_segment: int = 4) -> VeinGraph:
    """Replace every run with resampled piecewise quadratic Bezier curves."""
    if samples_per_segment < 2:
        raise ValueError("samples_per_segment must be at least 2")
    nodes, widths, runs = [], [], []
    count = 0
    for run in g.runs:
        P, Wd = _smooth_run(g.nodes[run], g.widths[run], samples_per_segment)
        nodes.append(P)
        widths.append(Wd)
        runs.append(list(range(count, count + len(P))))
        count += len(P)
    return VeinGraph(
        nodes=np.vstack(nodes) if nodes else np.zeros((0, 2)),
        widths=np.concatenate(widths) if widths else np.zeros(0),
        runs=runs,
        parents=list(g.parents),
        kinds=list(g.kinds),
        middle_branch_counts=list(g.middle_branch_counts),
        smoothed=True,
    )


def transform_graph(g: VeinGraph, M: np.ndarray) -> VeinGraph:
    """Apply a 2x3 affine to the node coordinates; widths are kept in pixels."""
    M = np.asarray(M, dtype=float)
    nodes = g.nodes @ M[:, :2].T + M[:, 2] if len(g.nodes) else g.nodes
    return VeinGraph(
        nodes, g.widths.copy(), [list(r) for r in g.runs], list(g.parents),
        list(g.kinds), list(g.middle_branch_counts), g.smoothed,
    )


# ---------------------------------------------------------------------------
# raster


def stamp_segments(
    mask: np.ndarray, P: np.ndarray, Q: np.ndarray, R: np.ndarray, max_piece: float = 4.0
) -> None:
    """Set every pixel whose centre lies within ``R[i]`` of segment ``P[i]Q[i]``.

    Pixel ``(row, col)`` has its centre at ``(x, y) = (col, row)``.
    """
    if len(P) == 0:
        return
    H, W = mask.shape
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    # split long segments into collinear pieces so the window stays small;
    # the union of the pieces' capsules equals the original capsule
    n = np.maximum(np.ceil(np.hypot(*(Q - P).T) / max_piece), 1).astype(int)
    if n.max() > 1:
        idx = np.repeat(np.arange(len(P)), n)
        start = np.concatenate([np.arange(m) for m in n])
        frac0 = (start / n[idx])[:, None]
        frac1 = ((start + 1) / n[idx])[:, None]
        d = Q[idx] - P[idx]
        P, Q, R = P[idx] + frac0 * d, P[idx] + frac1 * d, R[idx]
    lo = np.floor(np.minimum(P, Q) - R[:, None]).astype(int)
    hi = np.ceil(np.maximum(P, Q) + R[:, None]).astype(int)
    k = int((hi - lo).max()) + 1
    # fixed k x k candidate window per segment, anchored at its bbox corner
    off = np.arange(k)
    xs = lo[:, 0, None, None] + off[None, None, :]
    ys = lo[:, 1, None, None] + off[None, :, None]
    d = Q - P
    L2 = (d * d).sum(axis=1)
    safe = np.where(L2 > 0, L2, 1.0)
    t = ((xs - P[:, 0, None, None]) * d[:, 0, None, None]
         + (ys - P[:, 1, None, None]) * d[:, 1, None, None]) / safe[:, None, None]
    t = np.where(L2[:, None, None] > 0, np.clip(t, 0.0, 1.0), 0.0)
    ex = xs - (P[:, 0, None, None] + t * d[:, 0, None, None])
    ey = ys - (P[:, 1, None, None] + t * d[:, 1, None, None])
    hit = ex * ex + ey * ey <= (R * R)[:, None, None] + 1e-9
    hit &= (xs >= 0) & (xs < W) & (ys >= 0) & (ys < H)
    yy = np.broadcast_to(ys, hit.shape)[hit]
    xx = np.broadcast_to(xs, hit.shape)[hit]
    mask[yy, xx] = True


def rasterize(
    g: VeinGraph,
    template: PatternTemplate | None = None,
    *,
    seed: int = 0,
    plausible: tuple[float, float] | None = (0.02, 0.25),
    min_radius: float = 0.75,
) -> PatternMask:
    """Stamp every segment as a disc-brush stroke of its width.

    The brush radius along a segment is half the larger of its two node
    widths, never below ``min_radius`` so each node covers its own pixel.
    """
    template = template or PatternTemplate()
    mask = np.zeros((template.height, template.width), dtype=bool)
    seg = [(a, b) for run in g.runs for a, b in zip(run[:-1], run[1:])]
    if seg:
        a, b = np.asarray(seg).T
        radius = np.maximum(0.5 * np.maximum(g.widths[a], g.widths[b]), min_radius)
        stamp_segments(mask, g.nodes[a], g.nodes[b], radius)
    out = PatternMask(mask.astype(np.uint8), seed)
    if plausible is not None:
        frac = out.foreground_fraction
        if not (plausible[0] <= frac <= plausible[1]):
            raise PatternError(
                f"foreground fraction {frac:.4f} outside plausibility band {plausible}"
            )
    return out


def generate_pattern(
    seed: int,
    template: PatternTemplate | None = None,
    cfg: TurtleConfig | None = None,
    comp: CompositionConfig | None = None,
) -> tuple[VeinGraph, PatternMask]:
    """Compose, smooth and rasterize one identity."""
    template = template or PatternTemplate()
    comp = comp or CompositionConfig()
    graph = smooth(compose_identity(seed, template, cfg, comp), comp.samples_per_segment)
    return graph, rasterize(graph, template, seed=seed, plausible=comp.plausible_fraction)
