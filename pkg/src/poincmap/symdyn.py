"""Kneading theory for M-modal interval maps built from data.

Symbols 0..M label the base intervals cut by the M critical points. The
topological coordinate

    theta(s0 s1 ...) = sum_i t_i / N^(i+1),
    t_i = s_i                 if eps(s0)...eps(s_{i-1}) = +1
    t_i = (N-1) - s_i         otherwise,

with eps(s) the orientation of branch s, orders itineraries spatially.
Kneading sequences (itineraries of the critical values) bound the
admissible itineraries: a cycle is pruned iff, at some critical point, the
theta-extreme of the forward images of its flanking cycle points passes the
kneading value on the wrong side (above for maxima, below for minima).

Cycle guesses come from the nested interval identity
I_{s0 s1...sn} = I_{s0} /\\ f_{s0}^{-1}(I_{s1...sn}) using monotone branch
inverses of the smoothed map.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components
import scipy.sparse as sp

from .retmap import ReturnMap1D, evaluate_map, iterate_map, smoothed_graph

__all__ = [
    "KneadingData",
    "PruningRuleSet",
    "BranchSystem",
    "topological_coordinate",
    "kneading_data",
    "necklaces",
    "is_admissible",
    "interval_preimage",
    "cycle_guesses",
    "transition_graph_entropy",
    "finite_grammar_from_kneading",
    "ruleset_from_blocks",
    "approximate_kneading",
    "admissible_labels",
    "admissible_point_count",
    "prime_label",
    "rotations",
]

THETA_EXPANSION = 64  # symbols used when expanding periodic labels


def _orientation_signs(N: int, orientations: Optional[Sequence[int]] = None) -> np.ndarray:
    """Per-symbol parity eps(s). Default: even branches orientation preserving."""
    if orientations is None:
        eps = np.array([1 if s % 2 == 0 else -1 for s in range(N)])
    else:
        eps = np.asarray(orientations, dtype=int)
        if eps.shape != (N,) or not np.all(np.abs(eps) == 1):
            raise ValueError("orientations must be N signs +-1")
    return eps


def topological_coordinate(symbols: Sequence[int], N: int,
                           orientations: Optional[Sequence[int]] = None,
                           periodic: bool = False) -> float:
    """Topological coordinate theta of a symbol sequence in [0, 1].

    For periodic=True the sequence is treated as one period and expanded to
    at least THETA_EXPANSION symbols (tail below 2^-64 for N=2).
    """
    s = list(int(x) for x in symbols)
    if any(x < 0 or x >= N for x in s):
        raise ValueError(f"symbol out of alphabet 0..{N - 1}")
    if periodic and s:
        reps = -(-THETA_EXPANSION // len(s))
        s = s * reps
    eps = _orientation_signs(N, orientations)
    theta = 0.0
    parity = 1
    scale = 1.0 / N
    for x in s:
        t = x if parity == 1 else (N - 1) - x
        theta += t * scale
        scale /= N
        parity *= int(eps[x])
    return theta


def rotations(label: Sequence[int]) -> list[tuple[int, ...]]:
    lab = tuple(label)
    return [lab[i:] + lab[:i] for i in range(len(lab))]


def prime_label(label: Sequence[int]) -> tuple[int, ...]:
    """Lexicographically minimal rotation; raises if the label is periodic."""
    lab = tuple(label)
    n = len(lab)
    for d in range(1, n):
        if n % d == 0 and lab == lab[:d] * (n // d):
            raise ValueError(f"label {lab} is a repetition of a shorter word")
    return min(rotations(lab))


def necklaces(n: int, N: int) -> list[tuple[int, ...]]:
    """All aperiodic necklaces (Lyndon words) of length exactly n over N
    symbols, in lexicographic order, via Duval's algorithm."""
    if n < 1:
        raise ValueError("length must be >= 1")
    out = []
    w = [-1]
    while w:
        w[-1] += 1
        m = len(w)
        if m == n:
            out.append(tuple(w))
        # extend periodically up to length n
        while len(w) < n:
            w.append(w[len(w) - m])
        # discard trailing maximal symbols
        while w and w[-1] == N - 1:
            w.pop()
    return sorted(t for t in out)


def _duval_all(n: int, N: int) -> list[tuple[int, ...]]:
    """Lyndon words of length <= n (classic Duval enumeration)."""
    out = []
    w = [-1]
    while w:
        w[-1] += 1
        m = len(w)
        out.append(tuple(w))
        while len(w) < n:
            w.append(w[len(w) - m])
        while w and w[-1] == N - 1:
            w.pop()
    return out


@dataclass
class KneadingData:
    """Kneading sequences and values of every critical point of a map."""

    sequences: list[list[int]]       # per critical point, length L prefix
    theta_values: list[float]
    critical_points: np.ndarray
    critical_types: list[str]        # 'max' | 'min'
    orientations: np.ndarray         # per-branch parity signs
    N: int
    L: int
    clamped: bool = False

    def prefix(self, i: int, length: int = 10) -> str:
        return "".join(str(s) for s in self.sequences[i][:length])


def branch_orientations(critical_types: Sequence[str], N: int) -> np.ndarray:
    """Branch parities implied by alternating extremum types."""
    if not critical_types:
        raise ValueError("map has no critical points")
    # branch 0 increases iff the first critical point is a maximum
    eps = np.empty(N, dtype=int)
    eps[0] = 1 if critical_types[0] == "max" else -1
    for s in range(1, N):
        eps[s] = -eps[s - 1]
    return eps


def kneading_data(rmap: ReturnMap1D, L: int = 30) -> KneadingData:
    """Itineraries of the critical values (length-L symbol prefixes).

    The kneading sequence of critical point c is the itinerary of f(c):
    symbols of f(c), f^2(c), ... under the base-interval partition.
    """
    if rmap.modality == 0:
        raise ValueError("detect critical points before kneading")
    if L < 1:
        raise ValueError("prefix length must be >= 1")
    N = rmap.modality + 1
    eps = branch_orientations(rmap.critical_types, N)
    sequences, thetas = [], []
    clamped = False
    for c in rmap.critical_points:
        orbit = iterate_map(rmap, float(c), L)
        pts = orbit[1:]
        if np.any(pts < 0.0) or np.any(pts > 1.0):
            clamped = True
            pts = np.clip(pts, 0.0, 1.0)
        seq = [int(s) for s in rmap.symbol_of(pts)]
        sequences.append(seq)
        thetas.append(topological_coordinate(seq, N, orientations=eps))
    return KneadingData(sequences=sequences, theta_values=thetas,
                        critical_points=rmap.critical_points.copy(),
                        critical_types=list(rmap.critical_types),
                        orientations=eps, N=N, L=L, clamped=clamped)


def _branch_crosses_diagonal(rmap: ReturnMap1D, symbol: int,
                             tol: float = 1e-9) -> bool:
    """Fixed-point existence on one branch, from the smoothed graph."""
    cp = rmap.critical_points
    lo = 0.0 if symbol == 0 else float(cp[symbol - 1])
    hi = 1.0 if symbol == len(cp) else float(cp[symbol])
    grid, smooth = _smooth_cached(rmap)
    m = (grid >= lo) & (grid <= hi)
    if not np.any(m):
        return False
    gap = smooth[m] - grid[m]
    return bool(gap.min() <= tol and gap.max() >= -tol)


def _smooth_cached(rmap: ReturnMap1D):
    cache = rmap.meta.get("_smooth")
    if cache is None:
        cache = smoothed_graph(rmap)
        rmap.meta["_smooth"] = cache
    return cache


def is_admissible(label: Sequence[int], kneading: KneadingData,
                  rmap: Optional[ReturnMap1D] = None) -> bool:
    """Kneading admissibility of a prime cycle label.

    At each critical point, cycle points in the two flanking intervals are
    shifted forward one symbol; a maximum critical point prunes the cycle
    when the largest such theta exceeds the kneading value, a minimum when
    the smallest falls below it. Ties (superstable at data resolution) are
    admissible. Length-1 labels are decided by fixed-point existence on the
    corresponding branch when the map is available.
    """
    lab = tuple(int(s) for s in label)
    N = kneading.N
    if any(s < 0 or s >= N for s in lab):
        raise ValueError("symbol out of alphabet")
    if len(lab) == 1 and rmap is not None:
        return _branch_crosses_diagonal(rmap, lab[0])
    eps = kneading.orientations
    tol = max(N ** (-min(kneading.L, 40)), 1e-14)
    rots = rotations(lab)
    for i, ktheta in enumerate(kneading.theta_values):
        flank = {i, i + 1}
        shifted = [r[1:] + r[:1] for r in rots if r[0] in flank]
        if not shifted:
            continue
        thetas = [topological_coordinate(r, N, orientations=eps, periodic=True)
                  for r in shifted]
        if kneading.critical_types[i] == "max":
            if max(thetas) > ktheta + tol:
                return False
        else:
            if min(thetas) < ktheta - tol:
                return False
    return True


def admissible_labels(n: int, kneading: KneadingData,
                      rmap: Optional[ReturnMap1D] = None) -> list[tuple[int, ...]]:
    return [lab for lab in necklaces(n, kneading.N)
            if is_admissible(lab, kneading, rmap)]


def admissible_point_count(n: int, kneading: KneadingData,
                           rmap: Optional[ReturnMap1D] = None) -> int:
    """Number of admissible period-n symbol words (cycle points), counting
    every prime cycle of length d | n with multiplicity d."""
    total = 0
    for d in range(1, n + 1):
        if n % d == 0:
            total += d * len(admissible_labels(d, kneading, rmap))
    return total


@dataclass
class BranchSystem:
    """Monotone branch restrictions of the smoothed map with their inverses."""

    rmap: ReturnMap1D
    branch_q: list[np.ndarray]
    branch_y: list[np.ndarray]
    increasing: list[bool]

    @classmethod
    def from_map(cls, rmap: ReturnMap1D) -> "BranchSystem":
        if rmap.modality == 0:
            raise ValueError("map needs critical points")
        grid, smooth = _smooth_cached(rmap)
        eps = branch_orientations(rmap.critical_types, rmap.modality + 1)
        cuts = np.concatenate([[grid[0]], rmap.critical_points, [grid[-1]]])
        branch_q, branch_y, inc = [], [], []
        for s in range(rmap.modality + 1):
            m = (grid >= cuts[s]) & (grid <= cuts[s + 1])
            qq, yy = grid[m], smooth[m]
            if qq.size < 2:
                qq = np.array([cuts[s], cuts[s + 1]])
                yy = np.interp(qq, grid, smooth)
            if eps[s] < 0:
                yy = -np.maximum.accumulate(-yy)  # enforce non-increasing
            else:
                yy = np.maximum.accumulate(yy)
            # strictify for interpolation of the inverse
            yy = yy + (1e-15 * np.arange(yy.size)) * (1 if eps[s] > 0 else -1)
            branch_q.append(qq)
            branch_y.append(yy)
            inc.append(bool(eps[s] > 0))
        return cls(rmap=rmap, branch_q=branch_q, branch_y=branch_y, increasing=inc)

    def inverse_interval(self, symbol: int, interval) -> Optional[tuple[float, float]]:
        """Preimage of [lo, hi] under the branch restriction; None if empty."""
        lo, hi = interval
        qq, yy = self.branch_q[symbol], self.branch_y[symbol]
        if self.increasing[symbol]:
            ylo, yhi = yy[0], yy[-1]
        else:
            ylo, yhi = yy[-1], yy[0]
        if hi < ylo or lo > yhi:
            return None
        lo_c, hi_c = max(lo, ylo), min(hi, yhi)
        if self.increasing[symbol]:
            a = np.interp(lo_c, yy, qq)
            b = np.interp(hi_c, yy, qq)
        else:
            a = np.interp(hi_c, yy[::-1], qq[::-1])
            b = np.interp(lo_c, yy[::-1], qq[::-1])
        if a > b:
            a, b = b, a
        return float(a), float(b)


def _base_interval(rmap: ReturnMap1D, symbol: int) -> tuple[float, float]:
    cp = rmap.critical_points
    lo = 0.0 if symbol == 0 else float(cp[symbol - 1])
    hi = 1.0 if symbol == len(cp) else float(cp[symbol])
    return lo, hi


def interval_preimage(rmap: ReturnMap1D, sequence: Sequence[int],
                      branches: Optional[BranchSystem] = None
                      ) -> Optional[tuple[float, float]]:
    """Interval I_{s0 s1...sn} containing points with the given itinerary.

    Computed by the recursion I_{s0 s} = I_{s0} /\\ f_{s0}^{-1}(I_s) on the
    smoothed branch inverses. None signals an empty interval (the itinerary
    is not realized at the data's resolution).
    """
    seq = [int(s) for s in sequence]
    if not seq:
        raise ValueError("empty sequence")
    if branches is None:
        branches = BranchSystem.from_map(rmap)
    interval = _base_interval(rmap, seq[-1])
    for s in reversed(seq[:-1]):
        pre = branches.inverse_interval(s, interval)
        if pre is None:
            return None
        base = _base_interval(rmap, s)
        lo, hi = max(pre[0], base[0]), min(pre[1], base[1])
        if lo > hi:
            return None
        interval = (lo, hi)
    return interval


def cycle_guesses(rmap: ReturnMap1D, label: Sequence[int],
                  branches: Optional[BranchSystem] = None,
                  depth: int = 3) -> np.ndarray:
    """Guess map-cycle points: midpoints of the itinerary intervals of every
    rotation of the label (label repeated `depth` times to tighten the
    interval). Falls back to the base-interval midpoint when the interval
    recursion comes back empty."""
    lab = tuple(int(s) for s in label)
    if branches is None:
        branches = BranchSystem.from_map(rmap)
    guesses = np.empty(len(lab))
    empties = 0
    for k, rot in enumerate(rotations(lab)):
        irv = interval_preimage(rmap, rot * depth, branches)
        if irv is None:
            irv = interval_preimage(rmap, rot, branches)
        if irv is None:
            empties += 1
            irv = _base_interval(rmap, rot[0])
        guesses[k] = 0.5 * (irv[0] + irv[1])
    if empties:
        rmap.meta.setdefault("guess_warnings", []).append(
            f"label {''.join(map(str, lab))}: {empties} empty itinerary intervals")
    return guesses


# --- finite-grammar automaton and topological entropy ---------------------

@dataclass
class PruningRuleSet:
    """Finite-automaton presentation of the admissible symbol grammar."""

    forbidden_blocks: list[tuple[int, ...]]
    N: int
    adjacency: np.ndarray            # dense state-to-state edge counts
    char_poly: np.ndarray            # det(I - z A_scc), ascending powers of z
    spectral_radius: float
    entropy: float
    meta: dict = field(default_factory=dict)


def _minimize_dfa(trans: list[dict[int, int]], N: int) -> list[dict[int, int]]:
    """Merge states with identical follower behavior (partial DFA, missing
    edge = dead). Standard partition refinement with all states accepting."""
    n = len(trans)
    block = [0] * n
    while True:
        signature = {}
        new_block = [0] * n
        for i in range(n):
            sig = (block[i],) + tuple(
                block[trans[i][s]] if s in trans[i] else -1 for s in range(N))
            if sig not in signature:
                signature[sig] = len(signature)
            new_block[i] = signature[sig]
        if new_block == block:
            break
        block = new_block
    k = max(block) + 1
    merged: list[dict[int, int]] = [dict() for _ in range(k)]
    for i in range(n):
        for s, j in trans[i].items():
            merged[block[i]][s] = block[j]
    return merged


def _dominant_scc(A: np.ndarray) -> np.ndarray:
    ncomp, labels = connected_components(sp.csr_matrix(A > 0), directed=True,
                                         connection="strong")
    best_rho, best = -1.0, None
    for c in range(ncomp):
        idx = np.nonzero(labels == c)[0]
        sub = A[np.ix_(idx, idx)]
        if idx.size == 1 and sub[0, 0] == 0:
            continue
        rho = float(np.max(np.abs(np.linalg.eigvals(sub))))
        if rho > best_rho:
            best_rho, best = rho, sub
    if best is None:
        raise ValueError("automaton has no recurrent part")
    return best


def _finalize_ruleset(trans: list[dict[int, int]], blocks, N: int,
                      meta=None) -> PruningRuleSet:
    trans = _minimize_dfa(trans, N)
    n = len(trans)
    A = np.zeros((n, n))
    for i, row in enumerate(trans):
        for j in row.values():
            A[i, j] += 1
    scc = _dominant_scc(A)
    rho = float(np.max(np.abs(np.linalg.eigvals(scc))))
    coeffs = np.poly(scc)  # ascending powers of z for det(I - zA)
    coeffs = np.real_if_close(coeffs)
    coeffs = np.where(np.abs(coeffs) < 1e-9, 0.0, coeffs)
    coeffs = np.trim_zeros(coeffs, trim="b")
    meta = dict(meta or {})
    meta["n_states"] = n
    return PruningRuleSet(forbidden_blocks=[tuple(b) for b in blocks], N=N,
                          adjacency=A, char_poly=coeffs,
                          spectral_radius=rho, entropy=float(np.log(rho)),
                          meta=meta)


def ruleset_from_blocks(blocks: Iterable[Sequence[int]], N: int) -> PruningRuleSet:
    """Subshift of finite type avoiding the given words (de Bruijn contexts
    with pruned edges)."""
    blocks = [tuple(int(s) for s in b) for b in blocks]
    if any(len(b) == 0 for b in blocks):
        raise ValueError("empty forbidden block")
    m = max((len(b) for b in blocks), default=1)
    ctx_len = m - 1

    def clean(word: tuple[int, ...]) -> bool:
        return not any(word[i:i + len(b)] == b for b in blocks
                       for i in range(len(word) - len(b) + 1))

    contexts = [w for w in itertools.product(range(N), repeat=ctx_len) if clean(w)]
    index = {w: i for i, w in enumerate(contexts)}
    trans: list[dict[int, int]] = [dict() for _ in contexts]
    for w in contexts:
        for s in range(N):
            word = w + (s,)
            if clean(word):
                trans[index[w]][s] = index[word[1:]]
    return _finalize_ruleset(trans, blocks, N)


def approximate_kneading(prefix: Sequence[int], max_pre: int = 6,
                         max_per: int = 4) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Shortest eventually periodic word (preperiod, period) matching a
    finite kneading prefix."""
    seq = tuple(int(s) for s in prefix)
    for total in range(1, max_pre + max_per + 1):
        for p_len in range(1, max_per + 1):
            pre_len = total - p_len
            if pre_len < 0 or pre_len > max_pre:
                continue
            pre, per = seq[:pre_len], seq[pre_len:pre_len + p_len]
            if len(per) < p_len:
                continue
            k = 0
            ok = True
            for i in range(pre_len, len(seq)):
                if seq[i] != per[(i - pre_len) % p_len]:
                    ok = False
                    break
            if ok:
                return pre, per
    raise ValueError("no eventually periodic approximant within the bounds")


def finite_grammar_from_kneading(pre: Sequence[int], per: Sequence[int],
                                 max_block_len: int = 5) -> PruningRuleSet:
    """Automaton of the unimodal grammar sigma(K) <= sigma^k(Sigma) <= K for
    the eventually periodic kneading word K = pre (per)^inf, N = 2.

    States are sets of active comparisons against K (upper bound) and
    sigma(K) (lower bound); edges that push a shifted sequence above K or
    below sigma(K) are pruned. The reported forbidden blocks are the minimal
    forbidden words up to max_block_len.
    """
    pre = tuple(int(s) for s in pre)
    per = tuple(int(s) for s in per)
    if not per:
        raise ValueError("period must be nonempty")
    word = pre + per
    if any(s not in (0, 1) for s in word):
        raise ValueError("kneading grammar automaton implemented for N=2")
    N = 2

    def make_track(w_pre: tuple[int, ...], w_per: tuple[int, ...]):
        sym = w_pre + w_per
        m = len(sym)
        first_per = len(w_pre)

        def advance(pos: int) -> int:
            nxt = pos + 1
            return nxt if nxt < m else first_per

        return sym, advance

    up_sym, up_adv = make_track(pre, per)
    # sigma(K) = pre[1:] + per^inf when pre is nonempty, else per rotated
    if pre:
        lo_sym, lo_adv = make_track(pre[1:], per)
    else:
        lo_sym, lo_adv = make_track((), per[1:] + per[:1])

    def eps(s: int) -> int:
        return 1 if s % 2 == 0 else -1

    def step(state: frozenset, s: int):
        """Advance all comparisons by symbol s; None when s is forbidden."""
        active = set()
        for kind, pos, parity in state:
            sym, adv = (up_sym, up_adv) if kind == 0 else (lo_sym, lo_adv)
            kappa = sym[pos]
            if s == kappa:
                active.add((kind, adv(pos), parity * eps(kappa)))
            else:
                above = (s > kappa and parity == 1) or (s < kappa and parity == -1)
                if kind == 0 and above:
                    return None       # exceeds K
                if kind == 1 and not above:
                    return None       # falls below sigma(K)
        # spawn fresh comparisons at this position
        for kind, sym, adv in ((0, up_sym, up_adv), (1, lo_sym, lo_adv)):
            if not sym:
                continue
            kappa = sym[0]
            if s == kappa:
                active.add((kind, adv(0), eps(kappa)))
            else:
                above = s > kappa
                if kind == 0 and above:
                    return None
                if kind == 1 and not above:
                    return None
        return frozenset(active)

    start = frozenset()
    states = {start: 0}
    order = [start]
    trans: list[dict[int, int]] = [dict()]
    todo = [start]
    while todo:
        st = todo.pop()
        for s in range(N):
            nxt = step(st, s)
            if nxt is None:
                continue
            if nxt not in states:
                states[nxt] = len(order)
                order.append(nxt)
                trans.append(dict())
                todo.append(nxt)
            trans[states[st]][s] = states[nxt]

    # minimal forbidden words (no proper forbidden factor), by direct runs
    def allowed(wrd: tuple[int, ...]) -> bool:
        st = start
        for s in wrd:
            st = step(st, s)
            if st is None:
                return False
        return True

    blocks: list[tuple[int, ...]] = []
    for ln in range(1, max_block_len + 1):
        for wrd in itertools.product(range(N), repeat=ln):
            if allowed(wrd):
                continue
            if any(wrd[i:i + len(b)] == b for b in blocks
                   for i in range(len(wrd) - len(b) + 1)):
                continue
            blocks.append(wrd)
    meta = {"kneading_preperiod": pre, "kneading_period": per}
    return _finalize_ruleset(trans, blocks, N, meta)


def transition_graph_entropy(rules: PruningRuleSet) -> dict:
    """Entropy report {forbidden_blocks, char_poly, h} for a rule set."""
    if rules.adjacency.size == 0:
        raise ValueError("empty transition graph")
    return {
        "forbidden_blocks": ["".join(map(str, b)) for b in rules.forbidden_blocks],
        "char_poly": [float(c) for c in rules.char_poly],
        "spectral_radius": rules.spectral_radius,
        "h": rules.entropy,
    }
