"""Oriented Poincare-section crossings of dense trajectories, refined by
bracketed root finding, plus the half-cell translation symmetry and the
fundamental-domain reduction used for the Kuramoto-Sivashinsky system.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from .dynsys import TrajectorySegment

__all__ = [
    "SectionDef",
    "SectionPoint",
    "SectionDataset",
    "section_function",
    "detect_crossings",
    "tau",
    "to_fundamental_domain",
    "dataset_to_csv",
    "dataset_from_csv",
]

REFINE_TOL = 1e-10


@dataclass(frozen=True)
class SectionDef:
    """Section hypersurface: a coordinate plane s[index] = level, or a
    cylindrical half-plane theta = theta0 in the first two coordinates."""

    kind: str  # 'coordinate_plane' | 'cylindrical_angle'
    index: int = 1          # coordinate_plane: 0-based component index
    level: float = 0.0
    theta0: float = 0.0     # cylindrical_angle
    orientation: int = 1    # sign of d(section_function)/dt at a crossing

    def __post_init__(self):
        if self.kind not in ("coordinate_plane", "cylindrical_angle"):
            raise ValueError(f"unknown section kind '{self.kind}'")
        if self.orientation not in (1, -1):
            raise ValueError("orientation must be +1 or -1")


@dataclass
class SectionPoint:
    time: float
    state: np.ndarray
    in_fundamental_domain: bool = True
    applied_tau: bool = False


@dataclass
class SectionDataset:
    points: list[SectionPoint]
    section: SectionDef
    meta: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return np.array([p.time for p in self.points])

    @property
    def states(self) -> np.ndarray:
        return np.array([p.state for p in self.points])

    def __len__(self) -> int:
        return len(self.points)

    def extend(self, pts: Iterable[SectionPoint]) -> None:
        for p in pts:
            if self.points and p.time <= self.points[-1].time:
                raise ValueError("section points must be time-ordered")
            self.points.append(p)


def _wrap_angle(x: float | np.ndarray):
    """Wrap to the representative in (-pi, pi]."""
    w = np.mod(-np.asarray(x) + np.pi, 2 * np.pi)
    return -(w - np.pi)


def section_function(s, sdef: SectionDef):
    """Signed scalar vanishing on the section; continuous through zero."""
    s = np.asarray(s, dtype=float)
    if sdef.kind == "coordinate_plane":
        if s.ndim == 1:
            return float(s[sdef.index] - sdef.level)
        return s[..., sdef.index] - sdef.level
    # cylindrical angle in the (x, y) = (s[0], s[1]) plane
    if s.ndim == 1:
        x, y = s[0], s[1]
        if x * x + y * y == 0.0:
            raise ValueError("angle undefined at r=0")
        return float(_wrap_angle(np.arctan2(y, x) - sdef.theta0))
    r2 = s[..., 0] ** 2 + s[..., 1] ** 2
    if np.any(r2 == 0.0):
        raise ValueError("angle undefined at r=0")
    return _wrap_angle(np.arctan2(s[..., 1], s[..., 0]) - sdef.theta0)


def _refine_crossing(traj: TrajectorySegment, sdef: SectionDef,
                     t_lo: float, t_hi: float) -> float:
    """Bracketed bisection + secant polish of a sign change of the section
    function on the dense output."""
    f = lambda t: section_function(traj.dense_eval(t), sdef)
    f_lo, f_hi = f(t_lo), f(t_hi)
    if f_lo == 0.0:
        return t_lo
    if f_hi == 0.0:
        return t_hi
    if f_lo * f_hi > 0:
        raise RuntimeError(
            f"failed to bracket crossing in [{t_lo:.8g}, {t_hi:.8g}]")
    for _ in range(200):
        # secant proposal, fall back to bisection when outside the bracket
        t_sec = t_hi - f_hi * (t_hi - t_lo) / (f_hi - f_lo)
        if not (t_lo < t_sec < t_hi):
            t_sec = 0.5 * (t_lo + t_hi)
        f_sec = f(t_sec)
        if abs(f_sec) < REFINE_TOL:
            return t_sec
        if f_lo * f_sec < 0:
            t_hi, f_hi = t_sec, f_sec
        else:
            t_lo, f_lo = t_sec, f_sec
        if t_hi - t_lo < 1e-15 * max(1.0, abs(t_hi)):
            return 0.5 * (t_lo + t_hi)
    return 0.5 * (t_lo + t_hi)


def detect_crossings(traj: TrajectorySegment, sdef: SectionDef,
                     field=None) -> list[SectionPoint]:
    """Locate all oriented transversal crossings on a dense trajectory.

    Sign changes of the section function between accepted integrator steps
    are refined until |section_function| < 1e-10. Grazing (same-sign)
    contacts are not reported. A crossing exactly at the segment start time
    is attributed to the earlier segment (not reported here), so chunked
    trajectories produce no duplicates.
    """
    vals = section_function(traj.states, sdef)
    if sdef.kind == "cylindrical_angle":
        # exclude the branch-cut jump on the opposite half plane
        near = (np.abs(vals[:-1]) < 0.5 * np.pi) & (np.abs(vals[1:]) < 0.5 * np.pi)
    else:
        near = np.ones(len(vals) - 1, dtype=bool)
    sign_change = (vals[:-1] * vals[1:] < 0) & near
    # value exactly zero at a node: treat as crossing in the step that leaves it
    on_node = (vals[:-1] == 0.0) & (vals[1:] != 0.0) & near

    out: list[SectionPoint] = []
    for i in np.nonzero(sign_change | on_node)[0]:
        rising = vals[i + 1] > vals[i]
        if (1 if rising else -1) != sdef.orientation:
            continue
        if on_node[i]:
            t_star = float(traj.times[i])
        else:
            t_star = _refine_crossing(traj, sdef, float(traj.times[i]),
                                      float(traj.times[i + 1]))
        if t_star <= traj.t0:  # earlier-segment convention
            continue
        state = np.asarray(traj.dense_eval(t_star), dtype=float)
        out.append(SectionPoint(time=t_star, state=state))
    return out


def tau(s):
    """Half-cell translation for KSe modes: negate odd-k modes (k = 1, 3, ...),
    i.e. even 0-based indices. An involution."""
    s = np.asarray(s, dtype=float)
    out = s.copy()
    out[..., 0::2] *= -1.0
    return out


def tau_matrix(d: int) -> np.ndarray:
    m = np.ones(d)
    m[0::2] = -1.0
    return np.diag(m)


def in_fundamental_domain(s) -> bool:
    """Fundamental domain for the half-cell translation: a_3 >= 0."""
    return bool(np.asarray(s)[2] >= 0.0)


def to_fundamental_domain(p: SectionPoint) -> SectionPoint:
    """Map a KSe section point to the fundamental domain (a_3 >= 0)."""
    if in_fundamental_domain(p.state):
        return replace(p, state=p.state.copy(), in_fundamental_domain=True,
                       applied_tau=False)
    return replace(p, state=tau(p.state), in_fundamental_domain=True,
                   applied_tau=True)


def reduce_dataset(ds: SectionDataset) -> SectionDataset:
    pts = [to_fundamental_domain(p) for p in ds.points]
    return SectionDataset(points=pts, section=ds.section, meta=dict(ds.meta))


def dataset_to_csv(ds: SectionDataset, path) -> None:
    dim = ds.states.shape[1] if len(ds) else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"c{i + 1}" for i in range(dim)] + ["applied_tau"])
        for p in ds.points:
            w.writerow([repr(float(p.time))]
                       + [repr(float(v)) for v in p.state]
                       + [int(p.applied_tau)])


def dataset_from_csv(path, sdef: SectionDef) -> SectionDataset:
    pts = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[0] != "t" or header[-1] != "applied_tau":
            raise ValueError("unexpected section CSV header")
        for row in r:
            t = float(row[0])
            state = np.array([float(v) for v in row[1:-1]])
            pts.append(SectionPoint(time=t, state=state,
                                    applied_tau=bool(int(row[-1]))))
    return SectionDataset(points=pts, section=sdef)
