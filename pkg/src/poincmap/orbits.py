"""Periodic orbits of the flow from return-map cycles.

Map cycles are refined on the interpolated map, lifted to ambient space
through the inverse interpolants, integrated crossing-to-crossing into a
guess loop (with half-cell translations inserted so consecutive segments
join continuously in the full space), and converged by multi-point shooting
with unknown segment times: unknowns are the crossing states and times,
equations are the segment matching conditions (tau-twisted for pre-periodic
orbits) plus one section condition per node.

Stability comes from the monodromy assembled along the converged loop; the
determinant is accumulated through QR sweeps because the strongly
contracting KSe directions underflow a raw variational matrix.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .dynsys import System, integrate
from .lle import EmbeddingModel, InverseMap, transform_out_of_sample
from .retmap import ReturnMap1D, evaluate_map
from .section import (SectionDef, SectionPoint, detect_crossings,
                      in_fundamental_domain, section_function, tau, tau_matrix)
from .symdyn import rotations

__all__ = [
    "CycleRecord",
    "GuessLoop",
    "ManifoldBundle",
    "map_cycle_refine",
    "flow_cycle_guess",
    "find_periodic_orbit",
    "classify_multiplicity",
    "floquet_leading",
    "unstable_manifold",
    "verify_label",
    "cycle_table_json",
    "cycle_table_text",
]


# --- map-level refinement --------------------------------------------------

def _map_slope(rmap: ReturnMap1D, q: float, h: float = 1e-7) -> float:
    lo = max(q - h, 0.0)
    hi = min(q + h, 1.0)
    return (evaluate_map(rmap, hi) - evaluate_map(rmap, lo)) / (hi - lo)


def map_cycle_refine(rmap: ReturnMap1D, guesses: Sequence[float],
                     label: Sequence[int], tol: float = 1e-6,
                     max_iter: int = 100) -> np.ndarray:
    """Newton multi-point refinement of a map cycle: |f(q_k) - q_{k+1}| < tol.

    The refined points must reproduce the label's itinerary; a mismatch or
    non-convergence raises RuntimeError.
    """
    lab = tuple(int(s) for s in label)
    n = len(lab)
    x = np.asarray(guesses, dtype=float).copy()
    if x.shape != (n,):
        raise ValueError("need one guess per cycle point")

    def residual(pts):
        return np.array([evaluate_map(rmap, pts[k]) - pts[(k + 1) % n]
                         for k in range(n)])

    r = residual(x)
    for _ in range(max_iter):
        if np.max(np.abs(r)) < tol:
            break
        J = np.zeros((n, n))
        for k in range(n):
            J[k, k] = _map_slope(rmap, x[k])
            J[k, (k + 1) % n] -= 1.0
        try:
            dx = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            raise RuntimeError(f"singular map-cycle Jacobian for {lab}")
        step = 1.0
        for _ in range(8):
            x_new = np.clip(x + step * dx, 0.0, 1.0)
            r_new = residual(x_new)
            if np.max(np.abs(r_new)) < np.max(np.abs(r)):
                break
            step *= 0.5
        x, r = x_new, r_new
    else:
        raise RuntimeError(
            f"map cycle {lab} did not converge (residual {np.max(np.abs(r)):.2e})")
    itinerary = tuple(int(s) for s in rmap.symbol_of(x))
    if itinerary != lab:
        raise RuntimeError(f"refined cycle has itinerary {itinerary}, wanted {lab}")
    return x


# --- guess loops ------------------------------------------------------------

@dataclass
class GuessLoop:
    label: tuple[int, ...]
    nodes: np.ndarray          # (m, d) crossing states, full space
    durations: np.ndarray      # (m,) time to the next node
    twisted: bool              # closure s(T) = tau s(0)
    junction_gaps: np.ndarray  # lift-continuity gaps at the lifted nodes
    meta: dict = field(default_factory=dict)

    @property
    def period_guess(self) -> float:
        return float(self.durations.sum())


def _next_crossing(system: System, sdef: SectionDef, x: np.ndarray,
                   t_return: float, tol: dict,
                   t_min_frac: float = 0.05, t_max_frac: float = 10.0):
    """Integrate from x to the next oriented crossing; returns (dt, state)."""
    t0 = 0.0
    horizon = 1.5 * t_return
    while t0 < t_max_frac * t_return:
        seg = integrate(system.field, system.jacobian, x, (t0, t0 + horizon),
                        tol=tol, stiff=system.stiff)
        pts = [p for p in detect_crossings(seg, sdef)
               if p.time > t_min_frac * t_return]
        if pts:
            p = pts[0]
            return float(p.time), p.state
        t0 += horizon
        x = seg.states[-1]
        # keep integrating the same trajectory: restart from the endpoint
        t_min_frac = 0.0
    raise RuntimeError("segment failed to return to the section")


def flow_cycle_guess(map_points: Sequence[float], label: Sequence[int],
                     inverse: InverseMap, system: System, sdef: SectionDef,
                     t_return: float, n_poinc: Optional[Sequence[int]] = None,
                     tol: Optional[dict] = None) -> GuessLoop:
    """Lift map cycle points to ambient space and integrate crossing to
    crossing, inserting half-cell translations so consecutive segments join
    continuously in the full space.

    n_poinc[s] is the number of physical section crossings consumed by one
    iterate of the map on symbol s (2 for the tree-detour symbols).
    """
    lab = tuple(int(s) for s in label)
    tol = tol or {"abs": 1e-9, "rel": 1e-6}
    has_tau = system.name == "kse"
    if n_poinc is None:
        n_poinc = [1] * (max(lab) + 1)

    nodes: list[np.ndarray] = []
    durations: list[float] = []
    gaps: list[float] = []
    y_prev: Optional[np.ndarray] = None
    for k, s in enumerate(lab):
        lift = inverse(float(map_points[k]))
        if y_prev is not None and has_tau:
            alt = tau(lift)
            if np.linalg.norm(y_prev - alt) < np.linalg.norm(y_prev - lift):
                lift = alt
        if y_prev is not None:
            gaps.append(float(np.linalg.norm(y_prev - lift)))
        x = lift
        for rep in range(int(n_poinc[s])):
            nodes.append(x)
            dt, x = _next_crossing(system, sdef, x, t_return, tol)
            durations.append(dt)
        y_prev = x

    x0 = nodes[0]
    twisted = False
    if has_tau:
        twisted = bool(np.linalg.norm(y_prev - tau(x0))
                       < np.linalg.norm(y_prev - x0))
    closure_target = tau(x0) if twisted else x0
    gaps.append(float(np.linalg.norm(y_prev - closure_target)))
    return GuessLoop(label=lab, nodes=np.asarray(nodes),
                     durations=np.asarray(durations), twisted=twisted,
                     junction_gaps=np.asarray(gaps),
                     meta={"t_return": t_return,
                           "map_points": [float(v) for v in map_points]})


# --- multi-point shooting ---------------------------------------------------

@dataclass
class CycleRecord:
    label: tuple[int, ...]
    n: int                       # topological length (label length)
    map_points: np.ndarray
    nodes: np.ndarray            # (m, d) converged crossing states
    durations: np.ndarray        # (m,) segment times
    T_p: float
    Lambda1: float
    multiplicity: int
    converged: bool
    residual: float
    twisted: bool
    monodromy: Optional[np.ndarray] = None
    log_det: Optional[float] = None
    det_sign: float = 1.0
    divergence_integral: Optional[float] = None
    loop_times: Optional[np.ndarray] = None
    loop_states: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)


def _segment_state(system: System, x: np.ndarray, dt: float,
                   rtol: float, atol: float) -> np.ndarray:
    sol = solve_ivp(system.field, (0.0, dt), x,
                    method="LSODA" if system.stiff else "RK45",
                    jac=system.jacobian if system.stiff else None,
                    rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(f"segment integration failed: {sol.message}")
    return sol.y[:, -1]


def _segment_variational(system: System, x: np.ndarray, dt: float,
                         rtol: float, atol: float, n_qr: int = 0):
    """Integrate a segment with the variational matrix and the divergence
    quadrature.

    With n_qr = 0 returns (y, M, None, 1.0, div) where M is the raw
    variational matrix. With n_qr > 0 the matrix is QR-reorthonormalized
    n_qr times and (y, None, log|det M|, sign(det M), div) is returned; the
    swept form keeps the determinant representable when the flow contracts
    by hundreds of e-folds per segment.
    """
    d = system.dim

    def rhs(t, z):
        s = z[:d]
        X = z[d:d + d * d].reshape(d, d)
        J = system.jacobian(t, s)
        out = np.empty_like(z)
        out[:d] = system.field(t, s)
        out[d:d + d * d] = (J @ X).ravel()
        out[-1] = np.trace(J)
        return out

    splits = np.linspace(0.0, dt, max(n_qr, 1) + 1)
    y = np.asarray(x, dtype=float)
    Q = np.eye(d)
    log_det = 0.0
    sign = 1.0
    sq_prev = 1.0
    div = 0.0
    for t0, t1 in zip(splits[:-1], splits[1:]):
        z0 = np.concatenate([y, Q.ravel(), [0.0]])
        sol = solve_ivp(rhs, (t0, t1), z0, method="RK45", rtol=rtol, atol=atol)
        if not sol.success:
            raise RuntimeError(f"variational integration failed: {sol.message}")
        z1 = sol.y[:, -1]
        y = z1[:d]
        X = z1[d:d + d * d].reshape(d, d)
        div += float(z1[-1])
        if n_qr > 0:
            Qn, R = np.linalg.qr(X)
            diag = np.diag(R)
            log_det += float(np.sum(np.log(np.abs(diag))))
            sign *= float(np.prod(np.sign(diag))) * float(np.linalg.slogdet(Qn)[0]) * sq_prev
            sq_prev = float(np.linalg.slogdet(Qn)[0])
            Q = Qn
        else:
            Q = X
    if n_qr > 0:
        return y, None, log_det, sign, div
    return y, Q, None, 1.0, div


def _residuals(system: System, sdef: SectionDef, nodes: np.ndarray,
               durations: np.ndarray, twist: Optional[np.ndarray],
               rtol: float, atol: float):
    """Matching and section residuals from plain (non-variational) passes."""
    m, d = nodes.shape
    G = twist if twist is not None else np.eye(d)
    res_match = np.empty((m, d))
    for i in range(m):
        y = _segment_state(system, nodes[i], float(durations[i]), rtol, atol)
        target = nodes[i + 1] if i + 1 < m else G @ nodes[0]
        res_match[i] = y - target
    res_sec = np.array([section_function(nodes[i], sdef) for i in range(m)])
    return res_match, res_sec


def _jacobian_blocks(system: System, nodes: np.ndarray, durations: np.ndarray,
                     rtol: float, atol: float):
    m, d = nodes.shape
    mats = np.empty((m, d, d))
    fields_end = np.empty((m, d))
    for i in range(m):
        y, M, _, _, _ = _segment_variational(system, nodes[i],
                                             float(durations[i]), rtol, atol)
        mats[i] = M
        fields_end[i] = system.field(0.0, y)
    return mats, fields_end


def _section_gradient(sdef: SectionDef, x: np.ndarray) -> np.ndarray:
    g = np.zeros_like(x)
    if sdef.kind == "coordinate_plane":
        g[sdef.index] = 1.0
        return g
    r2 = x[0] ** 2 + x[1] ** 2
    g[0] = -x[1] / r2
    g[1] = x[0] / r2
    return g


def find_periodic_orbit(guess: GuessLoop, system: System, sdef: SectionDef,
                        tol: float = 1e-6, max_iter: int = 40,
                        rtol: float = 1e-9, atol: float = 1e-11,
                        allow_twist_retry: bool = True) -> CycleRecord:
    """Converge a guess loop to a periodic (or tau-twisted pre-periodic)
    orbit by damped Newton on the multi-point shooting equations."""
    rec = _newton_shoot(guess, system, sdef, guess.twisted, tol, max_iter,
                        rtol, atol)
    if not rec.converged and allow_twist_retry and system.name == "kse":
        rec2 = _newton_shoot(guess, system, sdef, not guess.twisted, tol,
                             max_iter, rtol, atol)
        if rec2.converged:
            rec = rec2
    if rec.converged:
        _finalize_record(rec, system, rtol, atol)
    return rec


def _newton_shoot(guess: GuessLoop, system: System, sdef: SectionDef,
                  twisted: bool, tol: float, max_iter: int,
                  rtol: float, atol: float) -> CycleRecord:
    m, d = guess.nodes.shape
    nodes = guess.nodes.copy()
    durations = guess.durations.copy()
    twist = tau_matrix(d) if twisted else None

    def pack_norm(rm, rs):
        return max(np.max(np.abs(rm)), np.max(np.abs(rs)))

    res_match, res_sec = _residuals(system, sdef, nodes, durations, twist,
                                    rtol, atol)
    best = pack_norm(res_match, res_sec)
    n_unknown = m * (d + 1)
    converged = best < tol
    stalls = 0
    it = 0
    while not converged and it < max_iter and stalls < 2:
        it += 1
        mats, f_end = _jacobian_blocks(system, nodes, durations, rtol, atol)
        J = np.zeros((n_unknown, n_unknown))
        R = np.zeros(n_unknown)
        G = twist if twist is not None else np.eye(d)
        for i in range(m):
            r0 = i * d
            R[r0:r0 + d] = res_match[i]
            J[r0:r0 + d, i * d:(i + 1) * d] = mats[i]
            nxt = (i + 1) % m
            blk = -G if i == m - 1 else -np.eye(d)
            J[r0:r0 + d, nxt * d:(nxt + 1) * d] += blk
            J[r0:r0 + d, m * d + i] = f_end[i]
        for i in range(m):
            R[m * d + i] = res_sec[i]
            J[m * d + i, i * d:(i + 1) * d] = _section_gradient(sdef, nodes[i])
        try:
            delta = np.linalg.solve(J, -R)
        except np.linalg.LinAlgError:
            delta, *_ = np.linalg.lstsq(J, -R, rcond=None)
        step = 1.0
        improved = False
        for _ in range(7):
            cand_nodes = nodes + step * delta[:m * d].reshape(m, d)
            cand_dur = durations + step * delta[m * d:]
            if np.any(cand_dur <= 0):
                step *= 0.5
                continue
            rm_c, rs_c = _residuals(system, sdef, cand_nodes, cand_dur, twist,
                                    rtol, atol)
            if pack_norm(rm_c, rs_c) < best:
                nodes, durations = cand_nodes, cand_dur
                res_match, res_sec = rm_c, rs_c
                best = pack_norm(res_match, res_sec)
                improved = True
                break
            step *= 0.5
        if not improved:
            stalls += 1
        converged = best < tol
    return CycleRecord(label=guess.label, n=len(guess.label),
                       map_points=np.asarray(guess.meta.get("map_points", [])),
                       nodes=nodes, durations=durations,
                       T_p=float(durations.sum()), Lambda1=np.nan,
                       multiplicity=1 if twisted else 2, converged=bool(converged),
                       residual=float(best), twisted=twisted,
                       meta={"iterations": it,
                             "junction_gaps": guess.junction_gaps.tolist()})


def _finalize_record(rec: CycleRecord, system: System,
                     rtol: float, atol: float, n_qr_per_segment: int = 8,
                     loop_samples_per_segment: int = 120) -> None:
    """Monodromy, Floquet multiplier, determinant sweep and loop samples."""
    m, d = rec.nodes.shape
    M_total = np.eye(d)
    log_det = 0.0
    sign = 1.0
    div_total = 0.0
    times, states = [], []
    t_acc = 0.0
    for i in range(m):
        _, M, _, _, _ = _segment_variational(system, rec.nodes[i],
                                             float(rec.durations[i]), rtol, atol)
        _, _, ld, sg, div = _segment_variational(system, rec.nodes[i],
                                                 float(rec.durations[i]),
                                                 rtol, atol,
                                                 n_qr=n_qr_per_segment)
        M_total = M @ M_total
        log_det += ld
        sign *= sg
        div_total += div
        seg = integrate(system.field, system.jacobian, rec.nodes[i],
                        (0.0, float(rec.durations[i])),
                        tol={"abs": atol, "rel": rtol}, stiff=system.stiff)
        ts = np.linspace(0.0, float(rec.durations[i]), loop_samples_per_segment,
                         endpoint=False)
        times.append(t_acc + ts)
        states.append(seg.dense_eval(ts).T)
        t_acc += float(rec.durations[i])
    if rec.twisted:
        M_total = tau_matrix(d) @ M_total
        sign *= float(np.sign(np.linalg.det(tau_matrix(d))))
    rec.monodromy = M_total
    rec.log_det = float(log_det)
    rec.det_sign = float(sign)
    rec.divergence_integral = float(div_total)
    rec.loop_times = np.concatenate(times)
    rec.loop_states = np.vstack(states)
    rec.Lambda1 = floquet_leading(rec)


def classify_multiplicity(rec: CycleRecord, system: System,
                          tol_factor: float = 10.0) -> int:
    """m = 1 iff the orbit closes onto its tau image, m = 2 iff it closes in
    full space and its tau image is a distinct orbit."""
    tol = tol_factor * max(rec.residual, 1e-9)
    seg = integrate(system.field, system.jacobian, rec.nodes[0],
                    (0.0, rec.T_p), tol={"abs": 1e-11, "rel": 1e-9},
                    stiff=system.stiff)
    end = seg.states[-1]
    x0 = rec.nodes[0]
    scale = max(float(np.linalg.norm(x0)), 1.0)
    if system.name == "kse":
        if np.linalg.norm(end - tau(x0)) < tol * scale:
            return 1
        if np.linalg.norm(end - x0) < tol * scale:
            tau_nodes = tau(rec.nodes)
            dmin = np.min(np.linalg.norm(rec.nodes[None, :, :] - tau_nodes[:, None, :],
                                         axis=2))
            if dmin > tol * scale:
                return 2
            raise RuntimeError("orbit coincides with its tau image but does "
                               "not close onto it")
        raise RuntimeError("orbit closes onto neither itself nor its tau image")
    if np.linalg.norm(end - x0) < tol * scale:
        return 2
    raise RuntimeError("orbit does not close in full space")


def floquet_leading(rec: CycleRecord) -> float:
    """Largest-magnitude eigenvalue of the (fundamental-domain) monodromy."""
    if rec.monodromy is None:
        raise ValueError("record has no monodromy")
    eig = np.linalg.eigvals(rec.monodromy)
    lead = eig[int(np.argmax(np.abs(eig)))]
    if abs(lead.imag) > 1e-8 * abs(lead):
        raise RuntimeError(f"leading Floquet pair is complex: {lead}")
    return float(lead.real)


@dataclass
class ManifoldBundle:
    parent: CycleRecord
    seeds: np.ndarray
    offsets: np.ndarray
    crossings: list[np.ndarray]   # fundamental-domain crossing states per trajectory
    t_max: float
    meta: dict = field(default_factory=dict)


def unstable_manifold(rec: CycleRecord, system: System, sdef: SectionDef,
                      n_traj: int = 50, t_max: Optional[float] = None,
                      eps_seed: float = 1e-6, data_diameter: float = 1.0,
                      tol: Optional[dict] = None) -> ManifoldBundle:
    """Trace the local unstable manifold of a converged orbit.

    Seeds sit at geometric offsets eps * |Lambda1|^(k/n_half) along both
    signs of the leading eigenvector (one full multiplier application per
    sign), each integrated for t_max with section crossings recorded in the
    fundamental domain.
    """
    if rec.monodromy is None or not rec.converged:
        raise ValueError("need a converged, finalized record")
    lam = rec.Lambda1
    if abs(lam) <= 1.0:
        raise ValueError("orbit has no unstable direction")
    eigvals, eigvecs = np.linalg.eig(rec.monodromy)
    lead = int(np.argmax(np.abs(eigvals)))
    order = np.argsort(-np.abs(eigvals))
    if np.abs(eigvals[order[1]]) > 1.0:
        raise ValueError("unstable eigenspace is multi-dimensional")
    v = np.real(eigvecs[:, lead])
    v /= np.linalg.norm(v)
    tol = tol or {"abs": 1e-9, "rel": 1e-6}
    if t_max is None:
        t_max = 3.0 * rec.T_p
    eps0 = eps_seed * data_diameter
    n_half = max(n_traj // 2, 1)
    offsets = np.concatenate([
        eps0 * np.abs(lam) ** (np.arange(n_half) / n_half),
        -eps0 * np.abs(lam) ** (np.arange(n_traj - n_half) / max(n_traj - n_half, 1)),
    ])
    crossings: list[np.ndarray] = []
    seeds = rec.nodes[0][None, :] + offsets[:, None] * v[None, :]
    for x0 in seeds:
        seg = integrate(system.field, system.jacobian, x0, (0.0, t_max),
                        tol=tol, stiff=system.stiff)
        pts = detect_crossings(seg, sdef)
        states = np.array([p.state for p in pts]).reshape(-1, system.dim)
        if system.name == "kse" and states.size:
            mask = states[:, 2] < 0
            states[mask] = tau(states[mask])
        crossings.append(states)
    return ManifoldBundle(parent=rec, seeds=seeds, offsets=offsets,
                          crossings=crossings, t_max=float(t_max))


def verify_label(rec: CycleRecord, model: EmbeddingModel, rmap: ReturnMap1D,
                 decomposition=None) -> bool:
    """Check the converged orbit reproduces its symbolic label.

    The orbit's crossing states are reduced to the fundamental domain,
    embedded out-of-sample, restricted to the interval-map support (tree
    case: E1 u E2 only), converted to symbols and compared against all
    rotations of the label.
    """
    states = rec.nodes.copy()
    if states.shape[1] == model.training_points.shape[1] and states.shape[1] > 2:
        mask = states[:, 2] < 0
        states[mask] = tau(states[mask])
    q = transform_out_of_sample(model, states)
    q = np.atleast_2d(q)
    if decomposition is not None:
        lab = np.where(q[:, 0] < decomposition.q1c, 1, 2)
        lab[(q[:, 1] < decomposition.xi(q[:, 0])) & (q[:, 0] < decomposition.q1c)] = 3
        q = q[lab != 3]
    symbols = tuple(int(s) for s in rmap.symbol_of(q[:, 0]))
    ok = symbols in rotations(rec.label)
    rec.meta["observed_symbols"] = "".join(map(str, symbols))
    rec.meta["label_verified"] = bool(ok)
    return ok


def cycle_table_json(records: Sequence[CycleRecord], path=None):
    rows = [{
        "label": "".join(map(str, r.label)),
        "n": r.n,
        "T_p": r.T_p,
        "Lambda1": None if np.isnan(r.Lambda1) else r.Lambda1,
        "m": r.multiplicity,
        "converged": r.converged,
        "residual": r.residual,
    } for r in records]
    if path is not None:
        with open(path, "w") as fh:
            json.dump(rows, fh, indent=1)
    return rows


def cycle_table_text(records: Sequence[CycleRecord]) -> str:
    lines = [f"{'p':>12} {'T_p':>10} {'Lambda1':>12} {'m':>2} {'conv':>5} {'residual':>10}"]
    for r in records:
        lam = f"{r.Lambda1:12.3f}" if not np.isnan(r.Lambda1) else " " * 12
        lines.append(f"{''.join(map(str, r.label)):>12} {r.T_p:10.3f} {lam} "
                     f"{r.multiplicity:>2} {str(r.converged):>5} {r.residual:10.2e}")
    return "\n".join(lines)
