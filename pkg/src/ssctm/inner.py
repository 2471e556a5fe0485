"""Exact maximization of weighted net flows over a box of densities.

The objective has the form

    D(n) = sum_j c_j alpha_j
           - sum_j (c_j rho_j - beta_j c_{j+1} rho_{j+1}) f_j
           - sum_j c_j (1 - rho_j) r_j

where rho_j is affine (or 1), r_j is piecewise linear in n_j and f_j is the
minimum of a sending term in n_j and a receiving term in n_{j+1}.  On every
piece of a fine enough partition D is quadratic, so its maximum over the box
is attained at a stationary point of D restricted to some face of some piece.
The solver partitions each free axis at the one-dimensional breakpoints, adds
the diagonal kink f_j: A_j(n_j) = B_j(n_{j+1}) as a linear constraint where
needed, enumerates all active sets, solves the KKT systems in one batch and
keeps the best candidate under the true (unpartitioned) objective.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import Unsupported

EXACT_DIM_LIMIT = 3
RHO_ONE, RHO_AFFINE, RHO_CLAMPED, RHO_ZERO = 0, 1, 2, 3


@dataclass(frozen=True)
class FallbackOptions:
    """Settings for the approximate path used above ``EXACT_DIM_LIMIT`` free densities.

    Coordinate ascent with exact one-dimensional line maximization, restarted
    from ``starts`` points; stops when a sweep improves by less than
    ``tolerance`` veh/hr.
    """

    tolerance: float = 1e-6
    starts: int = 16
    max_sweeps: int = 200
    seed: int = 0


@dataclass
class NetFlowObjective:
    """Data for one (buffer, mode, queue-indicator pattern) net-flow problem.

    All arrays have length K.  ``cap`` is alpha_j or U_j depending on the
    queue indicator; ``u`` is inf for uncontrolled buffers (and buffer 0).
    """

    c: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    v: np.ndarray
    w: np.ndarray
    jam: np.ndarray
    F: np.ndarray
    cap: np.ndarray
    u: np.ndarray
    kappa: np.ndarray
    rho_kind: np.ndarray
    rho_a: np.ndarray
    rho_b: np.ndarray

    @property
    def K(self) -> int:
        return len(self.c)

    # -- flow pieces, vectorized over leading axes of n (..., K) -------------

    def rho(self, n):
        kind = self.rho_kind
        const = (kind == RHO_ONE) | (kind == RHO_ZERO)
        den = np.where(const, 1.0, self.rho_b - self.rho_a)
        val = (n - self.rho_a) / den
        val = np.where(kind == RHO_CLAMPED, np.clip(val, 0.0, 1.0), val)
        val = np.where(kind == RHO_ZERO, 0.0, val)
        return np.where(kind == RHO_ONE, 1.0, val)

    def ramp(self, n):
        recv = self.w * (self.jam - n)
        with np.errstate(invalid="ignore"):
            mu = np.where(np.isinf(self.u), np.inf, np.maximum(0.0, self.u - self.kappa * n))
        return np.maximum(0.0, np.minimum(np.minimum(self.cap, recv), mu))

    def sending(self, n):
        return np.minimum(self.v * n, self.F)

    def receiving(self, n, r):
        """B_j(n_{j+1}) for j = 0..K-2 (shape (..., K-1))."""
        room = np.maximum(0.0, self.w[1:] * (self.jam[1:] - n[..., 1:]) - r[..., 1:])
        return room / np.where(self.beta[:-1] > 0, self.beta[:-1], 1.0)

    def flows(self, n):
        r = self.ramp(n)
        f = self.sending(n)
        if self.K > 1:
            f = f.copy()
            f[..., :-1] = np.minimum(f[..., :-1], self.receiving(n, r))
        return r, np.maximum(f, 0.0)

    @property
    def f_coef_parts(self):
        cnext = np.append(self.c[1:], 0.0)
        return self.c, self.beta * cnext

    def value(self, n):
        n = np.asarray(n, dtype=float)
        r, f = self.flows(n)
        rho = self.rho(n)
        c, bc = self.f_coef_parts
        rho_next = np.concatenate([rho[..., 1:], np.zeros(rho.shape[:-1] + (1,))], axis=-1)
        coef_f = c * rho - bc * rho_next
        return (c @ self.alpha) - np.sum(coef_f * f, axis=-1) - np.sum(c * (1.0 - rho) * r, axis=-1)

    def active_cells(self) -> np.ndarray:
        """Cells whose density can influence the objective."""
        K = self.K
        c, bc = self.f_coef_parts
        const_rho = self.rho_kind == RHO_ONE
        zero_rho = self.rho_kind == RHO_ZERO
        # f_j coefficient vanishes identically when both neighbouring weights are 1
        f_live = ~(const_rho & np.append(const_rho[1:], True) & np.isclose(c - bc, 0.0, atol=1e-15))
        r_live = ~(const_rho | (c == 0))
        f_live &= ~(zero_rho & np.append(zero_rho[1:], True))  # coefficient 0 - 0
        live = np.zeros(K, dtype=bool)
        for j in range(K):
            if f_live[j] and (c[j] != 0 or bc[j] != 0):
                live[j] = True
                if j < K - 1:
                    live[j + 1] = True
            if r_live[j]:
                live[j] = True
        return live


# ---------------------------------------------------------------------------
# one-dimensional breakpoints
# ---------------------------------------------------------------------------

def _ramp_kinks(obj: NetFlowObjective, j: int) -> list[float]:
    cap, w, jam, u, kap = obj.cap[j], obj.w[j], obj.jam[j], obj.u[j], obj.kappa[j]
    pts = [jam - cap / w, jam]
    if np.isfinite(u):
        if kap > 0:
            pts += [(u - cap) / kap, u / kap]
        if w != kap:
            pts.append((w * jam - u) / (w - kap))
    return pts


def axis_breakpoints(obj: NetFlowObjective, j: int, lo: float, hi: float) -> np.ndarray:
    pts = list(_ramp_kinks(obj, j))
    pts.append(obj.F[j] / obj.v[j])
    if obj.rho_kind[j] == RHO_CLAMPED:
        pts += [obj.rho_a[j], obj.rho_b[j]]
    if j > 0:
        # zero of the receiving room w (jam - n) - r_j(n), piecewise linear
        grid = np.unique(np.clip(np.array(_ramp_kinks(obj, j) + [0.0, obj.jam[j]]), 0.0, obj.jam[j]))
        nn = np.zeros((len(grid), obj.K))
        nn[:, j] = grid
        room = obj.w[j] * (obj.jam[j] - grid) - obj.ramp(nn)[:, j]
        for a, b, ra, rb in zip(grid[:-1], grid[1:], room[:-1], room[1:]):
            if (ra > 0) != (rb > 0) and ra != rb:
                pts.append(a + (b - a) * ra / (ra - rb))
        # level crossing of the receiving term with the cell capacity bound
        # is handled by the generic kink logic
    pts = np.array([p for p in pts if np.isfinite(p) and lo < p < hi])
    return np.unique(np.concatenate([[lo], pts, [hi]]))


# ---------------------------------------------------------------------------
# active-set patterns
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _patterns(d: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    """All constraint subsets of size <= d.

    Constraint ids: 2i (axis i at lower face), 2i+1 (upper face), 2d+j (kink j).
    Returns a (T, d) id array padded with -1 and a (T, h) boolean kink-usage mask.
    """
    ids = list(range(2 * d + h))
    out = []
    for m in range(d + 1):
        for sub in itertools.combinations(ids, m):
            axes = [s // 2 for s in sub if s < 2 * d]
            if len(axes) != len(set(axes)):
                continue
            out.append(list(sub) + [-1] * (d - m))
    arr = np.array(out, dtype=int).reshape(-1, d)
    kmask = np.zeros((len(arr), h), dtype=bool)
    for t, row in enumerate(arr):
        for s in row:
            if s >= 2 * d:
                kmask[t, s - 2 * d] = True
    return arr, kmask


def _affine(vals_lo, vals_hi, lo, hi):
    """Slope/intercept of an affine function known at two points."""
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    slope = np.where(span > 0, (vals_hi - vals_lo) / safe, 0.0)
    return vals_lo - slope * lo, slope


def _sym_outer(a, b):
    o = a[..., :, None] * b[..., None, :]
    return 0.5 * (o + np.swapaxes(o, -1, -2))


# ---------------------------------------------------------------------------
# exact solver
# ---------------------------------------------------------------------------

def maximize(obj: NetFlowObjective, lo, hi, fallback: FallbackOptions | None = None,
             return_candidates: bool = False):
    """Global maximum of ``obj.value`` over the box [lo, hi].

    Returns (value, argmax density vector).
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    K = obj.K
    live = obj.active_cells()
    free = np.where(live & (hi - lo > 1e-12))[0]
    base = lo.copy()
    d = len(free)
    if d == 0:
        val = float(obj.value(base))
        return val, base
    if d > EXACT_DIM_LIMIT:
        if fallback is None:
            raise Unsupported(f"{d} free densities exceed the exact-solver limit of {EXACT_DIM_LIMIT}")
        return _coordinate_ascent(obj, lo, hi, free, fallback)
    if d == 1:
        return _exact_1d(obj, lo, hi, int(free[0]))
    return _exact(obj, lo, hi, free)


def _exact_1d(obj: NetFlowObjective, lo, hi, j: int):
    """One free density: refine breakpoints with min-term crossings, then fit
    the quadratic on each piece through three points."""
    pts = axis_breakpoints(obj, j, lo[j], hi[j])
    base = lo.copy()
    X = np.repeat(base[None, :], len(pts), axis=0)
    X[:, j] = pts
    r = obj.ramp(X)
    extra = []
    if obj.K > 1:
        A = obj.sending(X)[:, :-1]
        B = obj.receiving(X, r)
        diff = A - B
        for col in range(obj.K - 1):
            if col != j and col + 1 != j:
                continue
            dd = diff[:, col]
            s = np.sign(dd)
            idx = np.where(s[:-1] * s[1:] < 0)[0]
            for i in idx:
                a, b = pts[i], pts[i + 1]
                extra.append(a + (b - a) * dd[i] / (dd[i] - dd[i + 1]))
    if extra:
        pts = np.unique(np.concatenate([pts, extra]))
    a, b = pts[:-1], pts[1:]
    m = 0.5 * (a + b)
    grid = np.concatenate([a, m, b])
    X = np.repeat(base[None, :], len(grid), axis=0)
    X[:, j] = grid
    vals = obj.value(X)
    P = len(a)
    va, vm, vb = vals[:P], vals[P:2 * P], vals[2 * P:]
    h = b - a
    curv = (va - 2.0 * vm + vb) / np.where(h > 0, 0.25 * h * h, 1.0)  # second derivative
    slope_m = (vb - va) / np.where(h > 0, h, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        xs = m - slope_m / curv
    ok = (curv < 0) & np.isfinite(xs) & (xs > a) & (xs < b)
    cand = np.concatenate([grid, xs[ok]])
    X = np.repeat(base[None, :], len(cand), axis=0)
    X[:, j] = cand
    allv = np.concatenate([vals, obj.value(X[len(grid):])]) if ok.any() else vals
    i = int(np.argmax(allv))
    return float(allv[i]), X[i] if i >= len(grid) else _at(base, j, grid[i])


def _at(base, j, x):
    out = base.copy()
    out[j] = x
    return out


def _exact(obj: NetFlowObjective, lo, hi, free):
    K = obj.K
    d = len(free)
    axes = [axis_breakpoints(obj, j, lo[j], hi[j]) for j in free]
    cells = list(itertools.product(*[range(len(a) - 1) for a in axes]))
    P = len(cells)
    plo = np.repeat(lo[None, :], P, axis=0)
    phi = np.repeat(hi[None, :], P, axis=0)
    cidx = np.array(cells, dtype=int).reshape(P, d)
    for t, j in enumerate(free):
        plo[:, j] = axes[t][cidx[:, t]]
        phi[:, j] = axes[t][cidx[:, t] + 1]
    pinned = np.ones(K, dtype=bool)
    pinned[free] = False
    plo[:, pinned] = lo[pinned]
    phi[:, pinned] = lo[pinned]

    # affine pieces on each sub-box: value at lo / hi corners per coordinate
    r_lo, f_lo_unused = obj.flows(plo)
    r_hi, _ = obj.flows(phi)
    r0, r1 = _affine(r_lo, r_hi, plo, phi)
    A_lo, A_hi = obj.sending(plo), obj.sending(phi)
    A0, A1 = _affine(A_lo, A_hi, plo, phi)
    rho_lo, rho_hi = obj.rho(plo), obj.rho(phi)
    p0, p1 = _affine(rho_lo, rho_hi, plo, phi)
    if K > 1:
        B_lo = obj.receiving(plo, r_lo)
        B_hi = obj.receiving(phi, r_hi)
        B0, B1 = _affine(B_lo, B_hi, plo[:, 1:], phi[:, 1:])

    # affine forms as (P, K, K+1) coefficient vectors over (1, n_0..n_{K-1})
    def form(c0, c1, offset=0):
        out = np.zeros((P, c0.shape[1], K + 1))
        out[:, :, 0] = c0
        idx = np.arange(c0.shape[1])
        out[:, idx, 1 + idx + offset] = c1
        return out

    R = form(r0, r1)
    Af = form(A0, A1)
    RHO = form(p0, p1)
    ONE = np.zeros(K + 1)
    ONE[0] = 1.0

    # kink detection for f_j = min(A_j, B_j), j = 0..K-2
    kinks = []
    if K > 1:
        Bf = form(B0, B1, offset=1)
        Amin = np.minimum(A_lo[:, :-1], A_hi[:, :-1])
        Amax = np.maximum(A_lo[:, :-1], A_hi[:, :-1])
        Bmin = np.minimum(B_lo, B_hi)
        Bmax = np.maximum(B_lo, B_hi)
        tol = 1e-9 * (1.0 + np.abs(obj.F[:-1]))
        selA = Amax <= Bmin + tol
        selB = (Bmax <= Amin + tol) & ~selA
        mixed = ~(selA | selB)
        c, bc = obj.f_coef_parts
        f_live = (c[:-1] != 0) | (bc[:-1] != 0)
        mixed &= f_live
        kinks = [j for j in range(K - 1) if mixed[:, j].any()]

    c, bc = obj.f_coef_parts
    h = len(kinks)
    sel_combos = list(itertools.product((0, 1), repeat=h))

    Qs, boxes_lo, boxes_hi, krows, kvalid, kept_piece = [], [], [], [], [], []
    for combo in sel_combos:
        # piece subset where this selection is meaningful
        ok = np.ones(P, dtype=bool)
        F_all = Af.copy()
        if K > 1:
            F_all[:, :-1] = np.where(selB[:, :, None], Bf, Af[:, :-1])
        rows = np.zeros((P, max(h, 1), K + 1))
        valid = np.zeros((P, max(h, 1)), dtype=bool)
        for t, j in enumerate(kinks):
            m = mixed[:, j]
            pick_B = combo[t] == 1
            if pick_B:
                F_all[m, j] = Bf[m, j]
                rows[m, t] = Bf[m, j] - Af[m, j]  # B - A <= 0
            else:
                F_all[m, j] = Af[m, j]
                rows[m, t] = Af[m, j] - Bf[m, j]  # A - B <= 0
            valid[:, t] = m
            if pick_B:
                ok &= m  # unmixed pieces are fully covered by combo 0
        idx = np.where(ok)[0]
        if len(idx) == 0:
            continue
        Fp = F_all[idx]
        RHOp = RHO[idx]
        Rp = R[idx]
        rho_next = np.concatenate([RHOp[:, 1:], np.zeros((len(idx), 1, K + 1))], axis=1)
        S = np.zeros((len(idx), K + 1, K + 1))
        S[:, 0, 0] = c @ obj.alpha
        S -= np.einsum("j,pjab->pab", c, _sym_outer(RHOp, Fp))
        S += np.einsum("j,pjab->pab", bc, _sym_outer(rho_next, Fp))
        S -= np.einsum("j,pjab->pab", c, _sym_outer(ONE - RHOp, Rp))
        Qs.append(S)
        boxes_lo.append(plo[idx])
        boxes_hi.append(phi[idx])
        krows.append(rows[idx])
        kvalid.append(valid[idx])
        kept_piece.append(idx)

    S = np.concatenate(Qs)
    blo = np.concatenate(boxes_lo)
    bhi = np.concatenate(boxes_hi)
    krow = np.concatenate(krows)
    kval = np.concatenate(kvalid)

    # restrict to free coordinates: n = base + E x, with base holding pinned values
    base = lo.copy()
    T_full = np.zeros((K + 1, d + 1))
    T_full[0, 0] = 1.0
    T_full[1:, 0] = np.where(np.isin(np.arange(K), free), 0.0, base)
    for t, j in enumerate(free):
        T_full[1 + j, 1 + t] = 1.0
    Sf = np.einsum("ai,pab,bj->pij", T_full, S, T_full)
    Mq = Sf[:, 1:, 1:]
    g = 2.0 * Sf[:, 0, 1:]
    krow_f = np.einsum("pta,ai->pti", krow, T_full)  # (Q, h, d+1): const + coeffs
    xlo = blo[:, free]
    xhi = bhi[:, free]

    pats, kmask = _patterns(d, h)
    Q = len(S)
    Tn = len(pats)
    n2 = 2 * d
    A = np.zeros((Q, Tn, n2, n2))
    b = np.zeros((Q, Tn, n2))
    A[:, :, :d, :d] = 2.0 * Mq[:, None]
    b[:, :, :d] = -g[:, None]
    usable = np.ones((Q, Tn), dtype=bool)
    for slot in range(d):
        ids = pats[:, slot]
        row = d + slot
        inactive = ids < 0
        A[:, inactive, row, row] = 1.0
        for cid in np.unique(ids[ids >= 0]):
            tsel = ids == cid
            if cid < 2 * d:
                axis, side = divmod(cid, 2)
                e = np.zeros(d)
                e[axis] = 1.0
                A[:, tsel, row, :d] = e
                col = A[:, :, :d, row]
                col[:, tsel] = e
                rhs = xhi[:, axis] if side else xlo[:, axis]
                b[:, tsel, row] = rhs[:, None]
            else:
                kj = cid - 2 * d
                coef = krow_f[:, kj, 1:]
                A[:, tsel, row, :d] = coef[:, None, :]
                col = A[:, :, :d, row]
                col[:, tsel] = coef[:, None, :]
                b[:, tsel, row] = -krow_f[:, kj, 0][:, None]
                usable[:, tsel] &= kval[:, kj][:, None]
    if h:
        usable &= ~(kmask[None, :, :] & ~kval[:, None, :]).any(axis=2)
    Aflat = A[usable]
    bflat = b[usable]
    xl = np.broadcast_to(xlo[:, None], (Q, Tn, d))[usable]
    xh = np.broadcast_to(xhi[:, None], (Q, Tn, d))[usable]
    scale = np.linalg.norm(Aflat, axis=2).prod(axis=1)
    det = np.linalg.det(Aflat)
    good = np.abs(det) > 1e-11 * np.where(scale > 0, scale, 1.0)
    X = np.linalg.solve(Aflat[good], bflat[good][..., None])[..., 0][:, :d]
    X = np.clip(X, xl[good], xh[good])
    cand = np.repeat(base[None, :], len(X), axis=0)
    cand[:, free] = X
    vals = obj.value(cand)
    i = int(np.argmax(vals))
    return float(vals[i]), cand[i]


def _line_max(obj: NetFlowObjective, n: np.ndarray, j: int, lo: float, hi: float):
    lo_v = n.copy()
    hi_v = n.copy()
    lo_v[j], hi_v[j] = lo, hi
    return _exact(obj, lo_v, hi_v, np.array([j]))


def _coordinate_ascent(obj, lo, hi, free, opts: FallbackOptions):
    rng = np.random.default_rng(opts.seed)
    best_val, best_n = -np.inf, None
    starts = [lo.copy(), hi.copy(), 0.5 * (lo + hi)]
    for _ in range(max(0, opts.starts - 3)):
        s = lo.copy()
        s[free] = rng.uniform(lo[free], hi[free])
        starts.append(s)
    for n in starts:
        val = float(obj.value(n))
        for _ in range(opts.max_sweeps):
            prev = val
            for j in free:
                val, n = _line_max(obj, n, j, lo[j], hi[j])
            if val - prev < opts.tolerance:
                break
        if val > best_val:
            best_val, best_n = val, n
    return best_val, best_n
