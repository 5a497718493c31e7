"""Sampled one-dimensional return maps and the tree decomposition that
reduces a two-dimensional embedded section to a single trimodal interval map.

A return map is a cloud of (q_n, q_{n+1}) pairs from consecutive section
crossings. The cloud has fractal transverse thickness, so critical points
are located on a locally smoothed graph (moving-window quadratic fits), and
approximate single-valuedness is established with a sliding-window
thickness test before any symbolic machinery is applied.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "ReturnMap1D",
    "TreeDecomposition",
    "EdgeMaps",
    "build_return_map",
    "evaluate_map",
    "singlevaluedness_test",
    "smoothed_graph",
    "find_critical_points",
    "fit_tree_separator",
    "assign_edges",
    "build_edge_maps",
    "choose_vertex_cutoff",
    "compose_tree_map",
    "map_to_csv",
    "decomposition_to_csv",
]


@dataclass
class ReturnMap1D:
    """Samples (q_n, q_{n+1}) sorted by q_n, with an interpolation rule."""

    q: np.ndarray
    fq: np.ndarray
    interp_rule: str = "linear"           # 'linear' | 'nearest'
    critical_points: np.ndarray = field(default_factory=lambda: np.empty(0))
    critical_types: list[str] = field(default_factory=list)  # 'max' | 'min'
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.fq = np.asarray(self.fq, dtype=float)
        if self.q.shape != self.fq.shape or self.q.ndim != 1:
            raise ValueError("q and fq must be 1-d arrays of equal length")
        if np.any(np.diff(self.q) < 0):
            order = np.argsort(self.q, kind="stable")
            self.q, self.fq = self.q[order], self.fq[order]
        if self.interp_rule not in ("linear", "nearest"):
            raise ValueError("interp_rule must be 'linear' or 'nearest'")

    @property
    def n_samples(self) -> int:
        return self.q.size

    @property
    def modality(self) -> int:
        return len(self.critical_points)

    def _dedup(self):
        cache = self.meta.get("_dedup")
        if cache is None:
            uq, inv, counts = np.unique(self.q, return_inverse=True,
                                        return_counts=True)
            if uq.size < self.q.size:
                sums = np.zeros(uq.size)
                np.add.at(sums, inv, self.fq)
                cache = (uq, sums / counts)
            else:
                cache = (self.q, self.fq)
            self.meta["_dedup"] = cache
        return cache

    def symbol_of(self, q) -> np.ndarray | int:
        """Base-interval symbol: number of critical points below q."""
        if self.modality == 0:
            raise ValueError("map has no critical points")
        s = np.searchsorted(self.critical_points, np.asarray(q, dtype=float),
                            side="right")
        return int(s) if np.isscalar(q) or np.asarray(q).ndim == 0 else s


def build_return_map(coord_sequence, interp_rule: str = "linear",
                     blocks: Optional[Sequence[int]] = None) -> ReturnMap1D:
    """Pair consecutive coordinates of one (or several) trajectory blocks.

    blocks gives the lengths of contiguous sub-sequences; no pair is formed
    across a block boundary.
    """
    seq = np.asarray(coord_sequence, dtype=float)
    if blocks is None:
        blocks = [seq.size]
    if sum(blocks) != seq.size:
        raise ValueError("block lengths must sum to the sequence length")
    qs, fs = [], []
    pos = 0
    for n in blocks:
        if n >= 2:
            qs.append(seq[pos:pos + n - 1])
            fs.append(seq[pos + 1:pos + n])
        pos += n
    if not qs:
        raise ValueError("need at least 2 points in some block")
    return ReturnMap1D(q=np.concatenate(qs), fq=np.concatenate(fs),
                       interp_rule=interp_rule)


def evaluate_map(rmap: ReturnMap1D, q) -> np.ndarray | float:
    """Interpolated image of q under the sampled map."""
    if rmap.n_samples == 0:
        raise ValueError("empty map")
    uq, ufq = rmap._dedup()
    x = np.asarray(q, dtype=float)
    if rmap.interp_rule == "linear":
        out = np.interp(x, uq, ufq)
    else:
        pos = np.searchsorted(uq, x)
        pos = np.clip(pos, 1, uq.size - 1)
        left_closer = (x - uq[pos - 1]) <= (uq[pos] - x)
        nearest = np.where(left_closer, pos - 1, pos)
        nearest = np.where(x <= uq[0], 0, nearest)
        nearest = np.where(x >= uq[-1], uq.size - 1, nearest)
        out = ufq[nearest]
    return float(out) if x.ndim == 0 else out


def iterate_map(rmap: ReturnMap1D, q0: float, n: int) -> np.ndarray:
    """Orbit q0, f(q0), ..., f^n(q0)."""
    orbit = np.empty(n + 1)
    orbit[0] = q0
    for i in range(n):
        orbit[i + 1] = evaluate_map(rmap, orbit[i])
    return orbit


def singlevaluedness_test(rmap: ReturnMap1D, window: float = 0.05,
                          threshold: float = 0.05,
                          min_samples: int = 20):
    """Sliding-window thickness test.

    The local monotone trend is the smoothed graph (moving-window quadratic
    fits, which track kinks); the thickness in a q_n window is the robust
    spread (1st..99th percentile) of the residuals, in units of the unit
    interval. Passes iff the maximum thickness stays below threshold.
    Returns (passed, thickness profile, window centers).
    """
    if rmap.n_samples < 100:
        raise ValueError("need at least 100 samples for the thickness test")
    q, fq = rmap.q, rmap.fq
    grid, smooth = smoothed_graph(rmap)
    resid = fq - np.interp(q, grid, smooth)
    qlo, qhi = q[0], q[-1]
    centers, thickness = [], []
    step = window / 2
    c = qlo + window / 2
    while c <= qhi - window / 2 + 1e-12:
        i0, i1 = np.searchsorted(q, [c - window / 2, c + window / 2])
        if i1 - i0 >= min_samples:
            lo, hi = np.percentile(resid[i0:i1], [1.0, 99.0])
            thickness.append(hi - lo)
            centers.append(c)
        c += step
    if not centers:
        raise ValueError("window too narrow: no window had enough samples")
    thickness = np.asarray(thickness)
    return bool(thickness.max() < threshold), thickness, np.asarray(centers)


def smoothed_graph(rmap: ReturnMap1D, n_grid: int = 512,
                   window_frac: float = 0.02):
    """Locally smoothed graph of the map on a uniform q grid.

    Each grid value is a local quadratic least-squares fit over the
    window_frac fraction of samples nearest in q.
    """
    q, fq = rmap.q, rmap.fq
    n = q.size
    m = max(11, int(round(window_frac * n)))
    m = min(m, n)
    grid = np.linspace(q[0], q[-1], n_grid)
    smooth = np.empty(n_grid)
    half = m // 2
    centers = np.searchsorted(q, grid)
    for g, c in enumerate(centers):
        i0 = max(0, min(c - half, n - m))
        i1 = i0 + m
        qq, ff = q[i0:i1], fq[i0:i1]
        x = qq - grid[g]
        A = np.stack([x * x, x, np.ones_like(x)], axis=1)
        coef, *_ = np.linalg.lstsq(A, ff, rcond=None)
        smooth[g] = coef[2]
    return grid, smooth


def find_critical_points(rmap: ReturnMap1D, n_grid: int = 512,
                         window_frac: float = 0.02,
                         prominence: float = 0.02,
                         expected: Optional[int] = None) -> ReturnMap1D:
    """Locate interior extrema of the smoothed graph and store them on the map.

    Extrema are alternating maxima/minima with vertical prominence above
    `prominence` (fraction of the image range). A mismatch with `expected`
    is reported via meta['critical_point_warning'], not fatal.
    """
    grid, smooth = smoothed_graph(rmap, n_grid=n_grid, window_frac=window_frac)
    rng = smooth.max() - smooth.min()
    if rng == 0:
        rmap.critical_points = np.empty(0)
        rmap.critical_types = []
        return rmap
    d = np.diff(smooth)
    sign = np.sign(d)
    nz = sign != 0
    # candidate indices where the slope changes sign
    idx_all = []
    last_sign = 0.0
    for i in range(len(sign)):
        if not nz[i]:
            continue
        if last_sign != 0.0 and sign[i] != last_sign:
            idx_all.append((i, "max" if last_sign > 0 else "min"))
        last_sign = sign[i]
    # prominence filter against neighboring opposite references
    anchors = [0] + [i for i, _ in idx_all] + [len(smooth) - 1]
    keep = []
    for j, (i, kind) in enumerate(idx_all):
        left, right = anchors[j], anchors[j + 2]
        prom = min(abs(smooth[i] - smooth[left]), abs(smooth[i] - smooth[right]))
        if prom >= prominence * rng:
            keep.append((i, kind))
    # enforce alternation: collapse runs of equal type onto the most extreme
    cleaned: list[tuple[int, str]] = []
    for i, kind in keep:
        if cleaned and cleaned[-1][1] == kind:
            prev_i = cleaned[-1][0]
            better = (smooth[i] > smooth[prev_i]) if kind == "max" else (smooth[i] < smooth[prev_i])
            if better:
                cleaned[-1] = (i, kind)
        else:
            cleaned.append((i, kind))
    # refine each extremum by a quadratic vertex fit on the raw samples
    locs, types = [], []
    q, fq = rmap.q, rmap.fq
    n = q.size
    m = max(11, int(round(window_frac * n)))
    for i, kind in cleaned:
        c = np.searchsorted(q, grid[i])
        i0 = max(0, min(c - m // 2, n - m))
        qq, ff = q[i0:i0 + m], fq[i0:i0 + m]
        x = qq - grid[i]
        A = np.stack([x * x, x, np.ones_like(x)], axis=1)
        (a2, a1, _), *_ = np.linalg.lstsq(A, ff, rcond=None)
        loc = grid[i] - a1 / (2 * a2) if a2 != 0 else grid[i]
        halfwin = max(qq[-1] - qq[0], grid[1] - grid[0])
        loc = float(np.clip(loc, grid[i] - halfwin, grid[i] + halfwin))
        locs.append(loc)
        types.append(kind)
    order = np.argsort(locs)
    rmap.critical_points = np.asarray(locs)[order]
    rmap.critical_types = [types[i] for i in order]
    if expected is not None and len(locs) != expected:
        rmap.meta["critical_point_warning"] = (
            f"expected {expected} critical points, found {len(locs)}")
    return rmap


@dataclass
class TreeDecomposition:
    """Separator line xi(q1) = alpha*q1 + beta, vertex cutoff q1c, and
    per-point edge labels (1, 2 or 3)."""

    alpha: float
    beta: float
    q1c: float
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def xi(self, q1):
        return self.alpha * np.asarray(q1) + self.beta


def fit_tree_separator(coords: np.ndarray, fit_region) -> tuple[float, float]:
    """Least-squares separator line between the lower (E3) and upper branch
    inside the fit region (q1lo, q1hi, q2lo, q2hi).

    The slope comes from the full in-region fit; the intercept is centered
    in the largest gap of the residual distribution, so the line passes
    between the two clusters. Raises when the region has no clear two-branch
    structure.
    """
    q1lo, q1hi, q2lo, q2hi = fit_region
    q1, q2 = coords[:, 0], coords[:, 1]
    mask = (q1 >= q1lo) & (q1 <= q1hi) & (q2 >= q2lo) & (q2 <= q2hi)
    if mask.sum() < 10:
        raise ValueError(f"fit region contains only {int(mask.sum())} points (<10)")
    x, y = q1[mask], q2[mask]
    A = np.stack([x, np.ones_like(x)], axis=1)
    (alpha, b0), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = np.sort(y - alpha * x)
    gaps = np.diff(resid)
    if gaps.size == 0 or gaps.max() == 0:
        raise ValueError("degenerate fit region: all residuals identical")
    gi = int(np.argmax(gaps))
    gap = gaps[gi]
    spread = resid[-1] - resid[0]
    pos_gaps = gaps[gaps > 0]
    if gap < 4 * np.median(pos_gaps) or gap < 0.15 * spread:
        raise ValueError(
            "fit region shows a single cluster, no separating gap "
            f"(max gap {gap:.3g}, spread {spread:.3g})")
    beta = b0 + 0.5 * (resid[gi] + resid[gi + 1])
    return float(alpha), float(beta)


def assign_edges(coords: np.ndarray, alpha: float, beta: float,
                 q1c: float) -> TreeDecomposition:
    """Label every embedded point: E3 iff q2 < xi(q1) and q1 < q1c;
    otherwise E1 (q1 < q1c) or E2 (q1 >= q1c)."""
    if not (0.0 < q1c < 1.0):
        raise ValueError("q1c must lie in (0, 1)")
    q1, q2 = coords[:, 0], coords[:, 1]
    labels = np.where(q1 < q1c, 1, 2)
    labels[(q2 < alpha * q1 + beta) & (q1 < q1c)] = 3
    return TreeDecomposition(alpha=float(alpha), beta=float(beta),
                             q1c=float(q1c), labels=labels)


@dataclass
class EdgeMaps:
    """The three tree maps, as sampled 1-d maps, plus transition bookkeeping."""

    g: ReturnMap1D   # E_p -> E1 u E2, q1 -> q1
    h: ReturnMap1D   # E_s -> E3,      q1 -> q2
    w: ReturnMap1D   # E3  -> E_r,     q2 -> q1
    idx_g: np.ndarray     # time indices of direct E12 -> E12 sources
    idx_h: np.ndarray     # time indices of E1 -> E3 sources
    bad_fraction: float
    bad_counts: dict


def build_edge_maps(decomp: TreeDecomposition, coords: np.ndarray,
                    bad_budget: float = 1e-3) -> EdgeMaps:
    """Route consecutive transitions into the three edge maps.

    Allowed transitions: (E1 u E2) -> (E1 u E2) into g, E1 -> E3 into h,
    E3 -> E2 into w. Anything else is counted; above bad_budget the
    decomposition is rejected.
    """
    lab = decomp.labels
    q1, q2 = coords[:, 0], coords[:, 1]
    src, dst = lab[:-1], lab[1:]
    in12_src = src != 3
    in12_dst = dst != 3
    m_g = in12_src & in12_dst
    m_h = (src == 1) & (dst == 3)
    m_w = (src == 3) & (dst == 2)
    m_bad = ~(m_g | m_h | m_w)
    bad_fraction = float(m_bad.mean())
    bad_counts: dict[str, int] = {}
    for i in np.nonzero(m_bad)[0]:
        key = f"E{src[i]}->E{dst[i]}"
        bad_counts[key] = bad_counts.get(key, 0) + 1
    if bad_fraction >= bad_budget:
        raise ValueError(
            f"decomposition rejected: {bad_fraction:.2%} bad transitions "
            f"({bad_counts})")
    i_g = np.nonzero(m_g)[0]
    i_h = np.nonzero(m_h)[0]
    i_w = np.nonzero(m_w)[0]
    g = ReturnMap1D(q=q1[i_g], fq=q1[i_g + 1])
    h = ReturnMap1D(q=q1[i_h], fq=q2[i_h + 1])
    w = ReturnMap1D(q=q2[i_w], fq=q1[i_w + 1])
    return EdgeMaps(g=g, h=h, w=w, idx_g=i_g, idx_h=i_h,
                    bad_fraction=bad_fraction, bad_counts=bad_counts)


def _local_spacing(rmap: ReturnMap1D, q0: float, halfwidth: float = 0.05) -> float:
    q = rmap.q
    i0, i1 = np.searchsorted(q, [q0 - halfwidth, q0 + halfwidth])
    window = q[max(i0, 0):i1]
    if window.size < 3:
        window = q
    dq = np.diff(window)
    dq = dq[dq > 0]
    return float(dq.mean()) if dq.size else float(np.diff(q).mean())


def choose_vertex_cutoff(g: ReturnMap1D, h: ReturnMap1D, w: ReturnMap1D,
                         candidates) -> tuple[float, float, bool]:
    """Cutoff minimizing the junction jump |w(h(q1c)) - g(q1c)|.

    Returns (q1c, jump, ok) where ok means the jump is at most the local
    mean sample spacing of the combined map (the continuity criterion).
    """
    candidates = np.asarray(candidates, dtype=float)
    if candidates.size == 0:
        raise ValueError("no cutoff candidates")
    jumps = np.array([abs(evaluate_map(w, evaluate_map(h, c)) - evaluate_map(g, c))
                      for c in candidates])
    best = int(np.argmin(jumps))
    q1c, jump = float(candidates[best]), float(jumps[best])
    ok = jump <= _local_spacing(g, q1c)
    return q1c, jump, ok


def compose_tree_map(decomp: TreeDecomposition, coords: np.ndarray,
                     edge_maps: EdgeMaps) -> ReturnMap1D:
    """Single interval map f: w(h(q1)) below the cutoff, g(q1) above.

    Built from realized data paths: direct (E12 -> E12) pairs and two-step
    (E1 -> E3 -> E2) pairs, so f is a first-return map of E1 u E2 to itself,
    not of the section.
    """
    q1 = coords[:, 0]
    i_g, i_h = edge_maps.idx_g, edge_maps.idx_h
    # two-step pairs need the point after next to exist and land in E12
    i_h2 = i_h[(i_h + 2 < len(decomp.labels))]
    i_h2 = i_h2[decomp.labels[i_h2 + 2] != 3]
    q_src = np.concatenate([q1[i_g], q1[i_h2]])
    q_dst = np.concatenate([q1[i_g + 1], q1[i_h2 + 2]])
    f = ReturnMap1D(q=q_src, fq=q_dst)
    f.meta["q1c"] = decomp.q1c
    f.meta["n_direct"] = int(i_g.size)
    f.meta["n_two_step"] = int(i_h2.size)
    return f


def map_to_csv(rmap: ReturnMap1D, path, edges: Optional[tuple] = None) -> None:
    with open(path, "w", newline="") as fh:
        wtr = csv.writer(fh)
        header = ["q_n", "q_next"]
        if edges is not None:
            header += ["edge_from", "edge_to"]
        wtr.writerow(header)
        for i in range(rmap.n_samples):
            row = [repr(float(rmap.q[i])), repr(float(rmap.fq[i]))]
            if edges is not None:
                row += [int(edges[0][i]), int(edges[1][i])]
            wtr.writerow(row)


def decomposition_to_csv(decomp: TreeDecomposition, coords: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        wtr = csv.writer(fh)
        wtr.writerow(["idx", "q1", "q2", "edge"])
        for i, lab in enumerate(decomp.labels):
            wtr.writerow([i, repr(float(coords[i, 0])),
                          repr(float(coords[i, 1])), int(lab)])
