"""Vector fields (Rossler, truncated Kuramoto-Sivashinsky) with analytic
Jacobians, and adaptive integration with dense output.

The Kuramoto-Sivashinsky equation with Dirichlet (antisymmetric) boundary
conditions is reduced to d real Fourier-mode amplitudes a_1..a_d:

    da_k/dt = (k^2 - nu k^4) a_k
              - k ( sum_{m=1}^{k-1} a_m a_{k-m}
                    - sum_{m=k+1}^{d} a_m a_{m-k}
                    - sum_{m=1}^{d-k} a_m a_{k+m} )

The quadratic part is evaluated through a precomputed symmetric tensor,
which also yields the exact Jacobian.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp

__all__ = [
    "RosslerParams",
    "KseParams",
    "TrajectorySegment",
    "rossler_vector_field",
    "rossler_jacobian",
    "kse_vector_field",
    "kse_jacobian",
    "make_system",
    "integrate",
    "BlowUpError",
    "trajectory_to_csv",
]

BLOWUP_LIMIT = 1e6  # abort when any |component| exceeds this


class BlowUpError(RuntimeError):
    """Raised when the state leaves the bounded region during integration."""

    def __init__(self, t_last: float, message: str | None = None):
        self.t_last = t_last
        super().__init__(message or f"state blew up; last valid time t={t_last:.6g}")


@dataclass(frozen=True)
class RosslerParams:
    a: float = 0.2
    b: float = 0.2
    c: float = 5.7

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("Rossler parameter c must be positive")


@dataclass(frozen=True)
class KseParams:
    nu: float
    d: int = 16

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError("damping parameter nu must be positive")
        if self.d < 1:
            raise ValueError("truncation order d must be >= 1")


def rossler_vector_field(s, p: RosslerParams):
    s = np.asarray(s, dtype=float)
    if s.shape != (3,):
        raise ValueError("Rossler state must have length 3")
    x, y, z = s
    return np.array([-y - z, x + p.a * y, p.b + z * (x - p.c)])


def rossler_jacobian(s, p: RosslerParams):
    x, y, z = np.asarray(s, dtype=float)
    return np.array([
        [0.0, -1.0, -1.0],
        [1.0, p.a, 0.0],
        [z, 0.0, x - p.c],
    ])


def _kse_tensor(d: int) -> np.ndarray:
    """Symmetric tensor T with quadratic term N_k(a) = a . T[k] . a."""
    T = np.zeros((d, d, d))
    for k in range(1, d + 1):
        for m in range(1, k):
            T[k - 1, m - 1, k - m - 1] += -k
        for m in range(k + 1, d + 1):
            T[k - 1, m - 1, m - k - 1] += k
        for m in range(1, d - k + 1):
            T[k - 1, m - 1, k + m - 1] += k
    return 0.5 * (T + np.transpose(T, (0, 2, 1)))


_KSE_CACHE: dict[int, np.ndarray] = {}


def _kse_tensor_cached(d: int) -> np.ndarray:
    if d not in _KSE_CACHE:
        _KSE_CACHE[d] = _kse_tensor(d)
    return _KSE_CACHE[d]


def kse_linear_coefficients(p: KseParams) -> np.ndarray:
    k = np.arange(1, p.d + 1, dtype=float)
    return k**2 - p.nu * k**4


def kse_vector_field(s, p: KseParams):
    a = np.asarray(s, dtype=float)
    if a.shape != (p.d,):
        raise ValueError(f"KSe state must have length d={p.d}")
    T = _kse_tensor_cached(p.d)
    return kse_linear_coefficients(p) * a + T.reshape(p.d, -1) @ np.outer(a, a).ravel()


def kse_jacobian(s, p: KseParams):
    a = np.asarray(s, dtype=float)
    if a.shape != (p.d,):
        raise ValueError(f"KSe state must have length d={p.d}")
    T = _kse_tensor_cached(p.d)
    return np.diag(kse_linear_coefficients(p)) + 2.0 * (T @ a)


@dataclass
class System:
    """A vector field with its Jacobian and integration defaults."""

    name: str
    dim: int
    field: Callable[[float, np.ndarray], np.ndarray]
    jacobian: Callable[[float, np.ndarray], np.ndarray]
    stiff: bool
    params: object

    def divergence(self, s: np.ndarray) -> float:
        return float(np.trace(self.jacobian(0.0, s)))


def make_system(name: str, params) -> System:
    """Build a System for 'rossler' or 'kse' with time-independent fields."""
    if name == "rossler":
        p = params if isinstance(params, RosslerParams) else RosslerParams(**params)
        return System(
            name="rossler",
            dim=3,
            field=lambda t, s: rossler_vector_field(s, p),
            jacobian=lambda t, s: rossler_jacobian(s, p),
            stiff=False,
            params=p,
        )
    if name == "kse":
        p = params if isinstance(params, KseParams) else KseParams(**params)
        lin = kse_linear_coefficients(p)
        T = _kse_tensor_cached(p.d)
        T2 = T.reshape(p.d, -1)

        def field(t, a, _lin=lin, _T2=T2):
            return _lin * a + _T2 @ np.outer(a, a).ravel()

        def jacobian(t, a, _lin=lin, _T=T):
            return np.diag(_lin) + 2.0 * (_T @ a)

        return System(name="kse", dim=p.d, field=field, jacobian=jacobian,
                      stiff=True, params=p)
    raise ValueError(f"unknown system '{name}'")


@dataclass
class TrajectorySegment:
    """A solved stretch of trajectory with a continuous interpolant."""

    times: np.ndarray
    states: np.ndarray  # (n_nodes, dim)
    dense_eval: Callable[[float], np.ndarray]

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def t1(self) -> float:
        return float(self.times[-1])

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2 or np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing with >= 2 nodes")


_METHODS_STIFF = {"LSODA", "BDF", "Radau"}


def integrate(
    field,
    jac,
    s0,
    t_span: Sequence[float],
    tol: dict | None = None,
    method: str | None = None,
    stiff: bool = False,
    events=None,
    max_step: float = np.inf,
) -> TrajectorySegment:
    """Integrate ds/dt = field(t, s) over t_span with dense output.

    tol is {'abs': ..., 'rel': ...}; defaults 1e-9 / 1e-6. A stiff-capable
    method is selected automatically when stiff=True. Blow-up
    (|s|_inf > 1e6) aborts with BlowUpError carrying the last valid time.
    """
    tol = tol or {}
    atol = float(tol.get("abs", 1e-9))
    rtol = float(tol.get("rel", 1e-6))
    if atol <= 0 or rtol <= 0:
        raise ValueError("tolerances must be positive")
    s0 = np.asarray(s0, dtype=float)
    if not np.all(np.isfinite(s0)):
        raise ValueError("initial state must be finite")
    if method is None:
        method = "LSODA" if stiff else "RK45"

    kwargs = dict(method=method, dense_output=True, atol=atol, rtol=rtol,
                  max_step=max_step)
    if events is not None:
        kwargs["events"] = events
    if method in _METHODS_STIFF and jac is not None:
        kwargs["jac"] = jac
    with np.errstate(over="ignore", invalid="ignore"):
        sol = solve_ivp(field, (float(t_span[0]), float(t_span[-1])), s0, **kwargs)
    # blow-up check on accepted nodes (cheaper than a per-step event)
    bad = ~np.all(np.isfinite(sol.y), axis=0) | (np.max(np.abs(sol.y), axis=0) > BLOWUP_LIMIT)
    if np.any(bad):
        first_bad = int(np.argmax(bad))
        t_last = float(sol.t[max(first_bad - 1, 0)])
        raise BlowUpError(t_last)
    if not sol.success:
        raise RuntimeError(f"integration failed: {sol.message}")
    return TrajectorySegment(times=sol.t, states=sol.y.T, dense_eval=sol.sol)


def trajectory_to_csv(seg: TrajectorySegment, path) -> None:
    """Write nodes as CSV with header t,c1,...,cd."""
    dim = seg.states.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"c{i + 1}" for i in range(dim)])
        for t, s in zip(seg.times, seg.states):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in s])
