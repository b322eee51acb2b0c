"""Coupled backward Riccati systems for Pi and P, the affine correction eta,
and node-wise definiteness certificates.

All three unknowns are integrated backward with classical fixed-step RK4.
``solve_p`` and ``solve_eta`` re-run the stages of the upstream equations
from the supplied node values, so chaining them reproduces one joint RK4
integration exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConditionViolation, NonFiniteValue, SingularRhat, UnresolvedStep

DELTA_COND = 1e-8
# A step is halved when its RK4 stage slopes disagree by more than this,
# relative to the state size.  Smooth steps sit below 1e-2 even next to an
# escape time; a step across a pole of the Riccati flow is of order one.
SPREAD_TOL = 0.05
MAX_HALVINGS = 12
MARGIN_NAMES = ("Rbar2", "Rhat11", "Rhat22", "schur1", "schur2")
CONDITION_SETS = {
    "I": ("Rhat22", "schur1"),
    "II": ("Rhat11", "schur2"),
    "I_and_II": ("Rhat11", "Rhat22"),
}
P_FORMS = ("standard", "rearranged")
ETA_FORMS = ("player1", "player2", "compact")


def _T(x):
    return np.swapaxes(x, -1, -2)


def _mv(M, v):
    return (M @ v[..., None])[..., 0]


def _sym(M):
    return 0.5 * (M + M.mT)


def _couple(lam, X):
    return (lam @ X.reshape(X.shape[0], -1)).reshape(X.shape)


# ---------------------------------------------------------------------- grid

@dataclass(frozen=True)
class TimeGrid:
    """Ascending nodes ``t = s_0 < ... < s_K = T`` with nominal step."""

    nodes: np.ndarray
    step: float

    @property
    def K(self):
        return self.nodes.size - 1

    @property
    def t0(self):
        return float(self.nodes[0])

    @property
    def T(self):
        return float(self.nodes[-1])

    def locate(self, s):
        """Step index ``k`` and weight ``w`` with ``s = (1-w) s_k + w s_{k+1}``."""
        k = int(np.clip(np.searchsorted(self.nodes, s, side="right") - 1, 0, self.K - 1))
        w = (s - self.nodes[k]) / (self.nodes[k + 1] - self.nodes[k])
        return k, float(w)


def make_grid(t, T, step=1e-3, breakpoints=()):
    """Uniform grid on ``[t, T]`` with the given breakpoints inserted as nodes."""
    if not T > t:
        raise ValueError("grid needs T > t")
    if not step > 0:
        raise ValueError("grid step must be positive")
    n = max(2, int(np.ceil((T - t) / step - 1e-9)))
    nodes = np.linspace(t, T, n + 1)
    extra = [b for b in np.asarray(breakpoints, dtype=float)
             if t < b < T and np.min(np.abs(nodes - b)) > 1e-12 * max(1.0, abs(T))]
    if extra:
        nodes = np.sort(np.concatenate([nodes, extra]))
    # Snap nodes that nearly coincide with a breakpoint onto it.
    for b in breakpoints:
        j = np.argmin(np.abs(nodes - b))
        if abs(nodes[j] - b) <= 1e-12 * max(1.0, abs(T)):
            nodes[j] = b
    return TimeGrid(nodes, float(step))


def model_grid(model, step=1e-3):
    return make_grid(model.initial_time, model.dims.T, step, model.breakpoints())


# -------------------------------------------------------------------- blocks

@dataclass(frozen=True)
class BlockData:
    Sbar2: np.ndarray
    Rbar2: np.ndarray
    Shat: np.ndarray
    Rhat: np.ndarray
    psi: np.ndarray
    phi: np.ndarray
    psibar: np.ndarray
    phibar: np.ndarray
    Psi: np.ndarray
    S2blackboard: np.ndarray
    m: int

    @property
    def Rhat11(self):
        return self.Rhat[..., :self.m, :self.m]

    @property
    def Rhat12(self):
        return self.Rhat[..., :self.m, self.m:]

    @property
    def Rhat22(self):
        return self.Rhat[..., self.m:, self.m:]

    @property
    def Shat1(self):
        return self.Shat[..., :self.m, :]

    @property
    def Shat2(self):
        return self.Shat[..., self.m:, :]


def _with_gamma(c, gamma, m):
    Rg = c.R.copy()
    nv = Rg.shape[-1] - m
    Rg[..., m:, m:] -= gamma ** 2 * np.eye(nv)
    c.R_gamma = Rg
    return c


def _pi_blocks(c, Pi):
    nv = c.R2.shape[-1]
    Sbar2 = c.B2.mT @ Pi + c.D2.mT @ Pi @ c.C + c.D2bar.mT @ Pi @ c.Cbar + c.S2
    Rbar2 = (c.R_gamma[..., -nv:, -nv:] + c.D2.mT @ Pi @ c.D2
             + c.D2bar.mT @ Pi @ c.D2bar)
    return Sbar2, Rbar2


def _p_blocks(c, Pi, P):
    Shat = c.B.mT @ P + c.D.mT @ P @ c.C + c.Dbar.mT @ Pi @ c.Cbar + c.S
    Rhat = c.R_gamma + c.D.mT @ P @ c.D + c.Dbar.mT @ Pi @ c.Dbar
    return Shat, Rhat


def _psi_full(c, Pi, P, eta):
    """Psi = B'eta + D'P sigma + Dbar'Pi sigmabar + rho (stacked)."""
    return (_mv(c.B.mT, eta) + _mv(c.D.mT, _mv(P, c.sigma))
            + _mv(c.Dbar.mT, _mv(Pi, c.sigmabar)) + c.rho)


def _blocks_batch(c, Pi, P, eta, m):
    Sbar2, Rbar2 = _pi_blocks(c, Pi)
    Shat, Rhat = _p_blocks(c, Pi, P)
    Psi = _psi_full(c, Pi, P, eta)
    psibar, psi = Psi[..., :m], Psi[..., m:]
    R11, R12, R22 = Rhat[..., :m, :m], Rhat[..., :m, m:], Rhat[..., m:, m:]
    S1h, S2h = Shat[..., :m, :], Shat[..., m:, :]
    nan_v = np.full(psi.shape, np.nan)
    try:
        phi = psibar - _mv(R12, np.linalg.solve(R22, psi[..., None])[..., 0])
        X = np.linalg.solve(R22, np.concatenate([R12.mT, S2h], axis=-1))
        schur1 = R11 - R12 @ X[..., :m]
        theta1 = -np.linalg.solve(schur1, S1h - R12 @ X[..., m:])
        S2bb = S2h + R12.mT @ theta1
    except np.linalg.LinAlgError:
        phi = np.full(psibar.shape, np.nan)
        S2bb = np.full(S2h.shape, np.nan)
    try:
        phibar = psi - _mv(R12.mT, np.linalg.solve(R11, psibar[..., None])[..., 0])
    except np.linalg.LinAlgError:
        phibar = nan_v
    return BlockData(Sbar2, Rbar2, Shat, Rhat, psi, phi, psibar, phibar, Psi, S2bb, m)


def blocks(Pi, P, model, s, i, eta=None):
    """Riccati coefficient blocks at time ``s`` in regime ``i``."""
    d = model.dims
    table = model.coefficient_table()
    c = _with_gamma(table.take(table.piece_index(s)), model.gamma, d.m)
    view = _RegimeView(c, i)
    eta = np.zeros(d.n) if eta is None else np.asarray(eta, dtype=float)
    return _blocks_batch(view, np.asarray(Pi, dtype=float), np.asarray(P, dtype=float), eta, d.m)


class _RegimeView:
    """Coefficients of one regime, exposing the same attribute names."""

    def __init__(self, c, i):
        for k, v in vars(c).items():
            if isinstance(v, np.ndarray) and not k.startswith("_") and k != "edges":
                setattr(self, k, v[i])


def schur_identity_residuals(Rhat, Shat, m):
    """Frobenius residuals of the two block decompositions of ``Shat' Rhat^-1 Shat``.

    Returns ``(res_i, res_ii)``; form (i) eliminates the second block first,
    form (ii) the first.
    """
    Rhat = np.asarray(Rhat, dtype=float)
    Shat = np.asarray(Shat, dtype=float)
    full = Shat.T @ np.linalg.solve(Rhat, Shat)
    R11, R12, R22 = Rhat[:m, :m], Rhat[:m, m:], Rhat[m:, m:]
    S1, S2 = Shat[:m], Shat[m:]

    iR22 = np.linalg.solve(R22, np.hstack([R12.T, S2]))
    E1 = S1 - R12 @ iR22[:, m:]
    form_i = S2.T @ iR22[:, m:] + E1.T @ np.linalg.solve(R11 - R12 @ iR22[:, :m], E1)

    iR11 = np.linalg.solve(R11, np.hstack([R12, S1]))
    nv = R22.shape[0]
    E2 = S2 - R12.T @ iR11[:, nv:]
    form_ii = S1.T @ iR11[:, nv:] + E2.T @ np.linalg.solve(R22 - R12.T @ iR11[:, :nv], E2)
    return (float(np.linalg.norm(full - form_i)), float(np.linalg.norm(full - form_ii)))


# ------------------------------------------------------------ right-hand sides

def _rhs_pi(c, lam, Pi):
    Sbar2, Rbar2 = _pi_blocks(c, Pi)
    return (Pi @ c.A + c.A.mT @ Pi + c.C.mT @ Pi @ c.C + c.Cbar.mT @ Pi @ c.Cbar
            - Sbar2.mT @ np.linalg.solve(Rbar2, Sbar2) + c.Q + _couple(lam, Pi))


def _rhs_p_standard(c, lam, Pi, P, m):
    Shat, Rhat = _p_blocks(c, Pi, P)
    return (P @ c.A + c.A.mT @ P + c.C.mT @ P @ c.C + c.Cbar.mT @ Pi @ c.Cbar
            - Shat.mT @ np.linalg.solve(Rhat, Shat) + c.Q + _couple(lam, P))


def _rhs_joint(c, lam, Pi, P, m):
    """Both standard right-hand sides at once.

    The Pi blocks are the lower blocks of the P blocks with P replaced by Pi,
    so stacking ``(Pi, P)`` shares every product.
    """
    X = np.stack([Pi, P])
    XA = X @ c.A
    PiCb = Pi @ c.Cbar
    S = c.B.mT @ X + c.D.mT @ (X @ c.C) + c.Dbar.mT @ PiCb + c.S
    R = c.R_gamma + c.D.mT @ X @ c.D + c.Dbar.mT @ Pi @ c.Dbar
    lin = (XA + XA.mT + c.C.mT @ X @ c.C + c.Cbar.mT @ PiCb + c.Q
           + (lam @ X.reshape(X.shape[:-2] + (-1,))).reshape(X.shape))
    S2 = S[0, ..., m:, :]
    dPi = lin[0] - S2.mT @ np.linalg.solve(R[0, ..., m:, m:], S2)
    dP = lin[1] - S[1].mT @ np.linalg.solve(R[1], S[1])
    return dPi, dP


def _rhs_p_rearranged(c, lam, Pi, P, m):
    Shat, Rhat = _p_blocks(c, Pi, P)
    R11, R12, R22 = Rhat[..., :m, :m], Rhat[..., :m, m:], Rhat[..., m:, m:]
    S1h, S2h = Shat[..., :m, :], Shat[..., m:, :]
    X = np.linalg.solve(R22, np.concatenate([R12.mT, S2h], axis=-1))
    th1 = -np.linalg.solve(R11 - R12 @ X[..., :m], S1h - R12 @ X[..., m:])
    S2bb = S2h + R12.mT @ th1
    Acl = c.A + c.B1 @ th1
    Ccl = c.C + c.D1 @ th1
    Cbcl = c.Cbar + c.D1bar @ th1
    cross = th1.mT @ c.S1
    return (P @ Acl + Acl.mT @ P + Ccl.mT @ P @ Ccl + Cbcl.mT @ Pi @ Cbcl
            + th1.mT @ c.R1 @ th1 + cross + cross.mT + c.Q
            - S2bb.mT @ np.linalg.solve(R22, S2bb) + _couple(lam, P))


def _rhs_eta(c, lam, Pi, P, eta, m, form):
    Shat, Rhat = _p_blocks(c, Pi, P)
    Psig = _mv(P, c.sigma)
    Pisb = _mv(Pi, c.sigmabar)
    forcing = (_mv(c.C.mT, Psig) + _mv(c.Cbar.mT, Pisb) + _mv(P, c.b) + c.q
               + _couple(lam, eta))
    if form == "compact":
        theta = -np.linalg.solve(Rhat, Shat)
        return (_mv(_T(c.A + c.B @ theta), eta) + _mv(_T(c.C + c.D @ theta), Psig)
                + _mv(_T(c.Cbar + c.Dbar @ theta), Pisb) + _mv(theta.mT, c.rho)
                + _mv(P, c.b) + c.q + _couple(lam, eta))
    Psi = _psi_full(c, Pi, P, eta)
    R11, R12, R22 = Rhat[..., :m, :m], Rhat[..., :m, m:], Rhat[..., m:, m:]
    S1h, S2h = Shat[..., :m, :], Shat[..., m:, :]
    psibar, psi = Psi[..., :m, None], Psi[..., m:, None]
    if form == "player1":
        X = np.linalg.solve(R22, np.concatenate([R12.mT, S2h, psi], axis=-1))
        n = S2h.shape[-1]
        E = S1h - R12 @ X[..., m:m + n]
        phi = psibar - R12 @ X[..., m + n:]
        corr = S2h.mT @ X[..., m + n:] + E.mT @ np.linalg.solve(R11 - R12 @ X[..., :m], phi)
    elif form == "player2":
        nv = R22.shape[-1]
        X = np.linalg.solve(R11, np.concatenate([R12, S1h, psibar], axis=-1))
        n = S1h.shape[-1]
        E = S2h - R12.mT @ X[..., nv:nv + n]
        phibar = psi - R12.mT @ X[..., nv + n:]
        corr = (S1h.mT @ X[..., nv + n:]
                + E.mT @ np.linalg.solve(R22 - R12.mT @ X[..., :nv], phibar))
    else:
        raise ValueError(f"unknown eta form {form!r}; choose from {ETA_FORMS}")
    return _mv(c.A.mT, eta) - corr[..., 0] + forcing


# ------------------------------------------------------------- certificates

def _neg_margin(M):
    return -np.linalg.eigvalsh(_sym(M))[..., -1]


def _pos_margin(M):
    return np.linalg.eigvalsh(_sym(M))[..., 0]


def node_margins(c, Pi, P, m, which=MARGIN_NAMES):
    """Signed margins (positive means the definiteness requirement holds).

    Columns follow ``MARGIN_NAMES``; entries not listed in ``which`` are nan.
    Batch dimensions of ``Pi``/``P`` are kept.
    """
    out = np.full(Pi.shape[:-2] + (5,), np.nan)
    if "Rbar2" in which:
        out[..., 0] = _neg_margin(_pi_blocks(c, Pi)[1])
    if P is None or which == ("Rbar2",):
        return out
    _, Rhat = _p_blocks(c, Pi, P)
    R11, R12, R22 = Rhat[..., :m, :m], Rhat[..., :m, m:], Rhat[..., m:, m:]
    if "Rhat11" in which:
        out[..., 1] = _pos_margin(R11)
    if "Rhat22" in which:
        out[..., 2] = _neg_margin(R22)
    try:
        if "schur1" in which:
            out[..., 3] = _pos_margin(R11 - R12 @ np.linalg.solve(R22, R12.mT))
    except np.linalg.LinAlgError:
        pass
    try:
        if "schur2" in which:
            out[..., 4] = _neg_margin(R22 - R12.mT @ np.linalg.solve(R11, R12))
    except np.linalg.LinAlgError:
        pass
    return out


def _margin_ok(margin, delta):
    return bool(margin >= delta)


# ---------------------------------------------------------------- integrator

@dataclass(frozen=True)
class RiccatiSolution:
    """Node values of Pi, P, eta and their certificates.

    Arrays are indexed ``[node, regime, ...]``.  ``margins[..., j]`` is the
    signed eigenvalue margin of ``MARGIN_NAMES[j]`` evaluated with the
    coefficients of the interval starting at the node.  Certificates are
    checked at the nodes and at the extra points of any step that had to be
    halved; a violation strictly between those points is not detected.
    """

    grid: TimeGrid
    Pi: np.ndarray
    P: np.ndarray
    eta: np.ndarray
    margins: np.ndarray
    gamma: float
    conditions: str

    def min_margin(self, names=None):
        names = names or ("Rbar2",) + CONDITION_SETS[self.conditions]
        idx = [MARGIN_NAMES.index(nm) for nm in names]
        return float(np.min(self.margins[..., idx]))

    def to_csv(self, path):
        write_solution_csv(self, path)


def step_pieces(model, grid):
    """Coefficient piece index used on each grid step."""
    table = model.coefficient_table()
    mids = 0.5 * (grid.nodes[:-1] + grid.nodes[1:])
    return table, table.piece_index(mids)


def _piece_views(model, table):
    return [_with_gamma(table.take(p), model.gamma, model.dims.m) for p in range(table.n_pieces)]


def _check_finite(arrs, k, grid):
    for a in arrs:
        if not np.all(np.isfinite(a)):
            raise NonFiniteValue(f"non-finite Riccati value at s={grid.nodes[k]:.6g} "
                                 f"(node {k})")


def _spread(y, stages, h):
    """Largest disagreement between RK4 stage slopes, relative to the state."""
    scale = 1.0 + max(float(np.max(np.abs(a))) for a in y)
    f1 = stages[0]
    return h * max(float(np.max(np.abs(f[i] - f1[i]))) for f in stages[1:]
                   for i in range(len(y))) / scale


def _advance(F, shift, y, h, s, spread, on_mid, depth=0):
    """RK4 step of length ``h`` backward from ``s``, halved while under-resolved.

    ``on_mid(state, time)`` sees every intermediate point a halving creates,
    so certificates are also checked inside refined steps.
    """
    f1 = F(y)
    f2 = F(shift(y, 0.5 * h, f1))
    f3 = F(shift(y, 0.5 * h, f2))
    f4 = F(shift(y, h, f3))
    stages = (f1, f2, f3, f4)
    if spread(y, stages, h) <= SPREAD_TOL:
        incr = [(a + 2 * b + 2 * c + e) * (h / 6) for a, b, c, e in zip(*stages)]
        return shift(y, 1.0, incr)
    if depth == MAX_HALVINGS:
        raise UnresolvedStep(f"RK4 step at s={s:.6g} still unresolved at length {h:.3g}")
    mid = _advance(F, shift, y, 0.5 * h, s, spread, on_mid, depth + 1)
    on_mid(mid, s - 0.5 * h)
    return _advance(F, shift, mid, 0.5 * h, s - 0.5 * h, spread, on_mid, depth + 1)


def _integrate(model, grid, want, pinned=None, p_form="standard", eta_form="compact",
               conditions="I_and_II", delta=DELTA_COND, check=True):
    """Backward RK4 on the joint state; ``want`` in {1, 2, 3} picks (Pi), (Pi,P), (Pi,P,eta)."""
    d = model.dims
    m = d.m
    lam = model.generator
    table, pieces = step_pieces(model, grid)
    views = _piece_views(model, table)
    K = grid.K
    h = np.diff(grid.nodes)
    if p_form not in P_FORMS:
        raise ValueError(f"unknown P form {p_form!r}; choose from {P_FORMS}")
    if eta_form not in ETA_FORMS:
        raise ValueError(f"unknown eta form {eta_form!r}; choose from {ETA_FORMS}")
    rhs_p = _rhs_p_standard if p_form == "standard" else _rhs_p_rearranged
    required = [MARGIN_NAMES.index(nm) for nm in CONDITION_SETS[conditions]]

    Pi = np.empty((K + 1, d.D, d.n, d.n))
    P = np.empty_like(Pi) if want >= 2 else None
    eta = np.empty((K + 1, d.D, d.n)) if want >= 3 else None
    eta_live = want >= 3 and not model.is_homogeneous
    zero_eta = np.zeros((d.D, d.n))

    def F(c, y):
        if want >= 2 and p_form == "standard":
            out = list(_rhs_joint(c, lam, y[0], y[1], m))
        else:
            out = [_rhs_pi(c, lam, y[0])]
            if want >= 2:
                out.append(rhs_p(c, lam, y[0], y[1], m))
        if want >= 3:
            # Zero forcing and zero terminal value keep eta identically zero.
            out.append(_rhs_eta(c, lam, y[0], y[1], y[2], m, eta_form) if eta_live
                       else zero_eta)
        return out

    def shift(y, a, f):
        z = [_sym(y[0] + a * f[0])]
        if want >= 2:
            z.append(_sym(y[1] + a * f[1]))
        if want >= 3:
            z.append(y[2] + a * f[2])
        return z

    checked = ("Rbar2",) + (CONDITION_SETS[conditions] if want >= 2 else ())

    def certify_state(k, s, c, pi, p):
        if not check:
            return
        mg = node_margins(c, pi, p, m, checked)
        for i in range(d.D):
            for j in [0] + (required if want >= 2 else []):
                if not _margin_ok(mg[i, j], delta):
                    raise ConditionViolation(k, float(s), i, MARGIN_NAMES[j], float(mg[i, j]))

    def certify(k, c):
        certify_state(k, grid.nodes[k], c, Pi[k], P[k] if want >= 2 else None)

    G, g = table.G, table.g
    Pi[K] = G
    if want >= 2:
        P[K] = G
    if want >= 3:
        eta[K] = g
    if pinned is not None:
        Pi[K] = pinned[0][K]
        if len(pinned) > 1:
            P[K] = pinned[1][K]
    certify(K, views[pieces[K - 1]])

    for k in range(K - 1, -1, -1):
        c = views[pieces[k]]
        y = [Pi[k + 1]]
        if want >= 2:
            y.append(P[k + 1])
        if want >= 3:
            y.append(eta[k + 1])
        if pinned is not None:
            for j, arr in enumerate(pinned):
                y[j] = arr[k + 1]
        def on_mid(z, s, k=k, c=c):
            if not all(np.all(np.isfinite(a)) for a in z):
                raise NonFiniteValue(f"non-finite Riccati value at s={s:.6g}")
            certify_state(k, s, c, z[0], z[1] if want >= 2 else None)

        try:
            z = _advance(lambda v, c=c: F(c, v), shift, y, h[k], grid.nodes[k + 1],
                         _spread, on_mid)
        except np.linalg.LinAlgError as exc:
            raise SingularRhat(f"singular block solve on step ending at "
                               f"s={grid.nodes[k + 1]:.6g}: {exc}") from exc
        Pi[k] = z[0]
        if want >= 2:
            P[k] = z[1]
        if want >= 3:
            eta[k] = z[2]
        if pinned is not None:
            Pi[k] = pinned[0][k]
            if len(pinned) > 1:
                P[k] = pinned[1][k]
        _check_finite([a[k] for a in (Pi, P, eta) if a is not None], k, grid)
        certify(k, c)
    node_idx = np.concatenate([pieces, [pieces[-1]]])
    cn = _with_gamma(table.take(node_idx), model.gamma, m)
    margins = node_margins(cn, Pi, P, m)
    return Pi, P, eta, margins


def solve_pi(model, grid, delta=DELTA_COND):
    """Backward integration of the Pi system; raises on loss of ``Rbar2 << 0``."""
    Pi, _, _, _ = _integrate(model, grid, 1, delta=delta)
    return Pi


def solve_p(model, grid, Pi, form="standard", conditions="I_and_II", delta=DELTA_COND,
            check=True):
    """Backward integration of the P system given Pi node values.

    ``form="rearranged"`` integrates the closed-loop form built from the
    first-player gain; it agrees with the standard form whenever Condition (I)
    holds.
    """
    _, P, _, _ = _integrate(model, grid, 2, pinned=(Pi,), p_form=form,
                            conditions=conditions, delta=delta, check=check)
    return P


def solve_eta(model, grid, Pi, P, form="compact"):
    """Backward integration of the linear eta equation in the chosen form."""
    _, _, eta, _ = _integrate(model, grid, 3, pinned=(Pi, P), eta_form=form, check=False)
    return eta


def solve_all(model, grid=None, conditions="I_and_II", delta=DELTA_COND, step=1e-3,
              eta_form="compact"):
    """Pi, P and eta with certificates under the chosen condition set."""
    if conditions not in CONDITION_SETS:
        raise ValueError(f"unknown condition set {conditions!r}")
    grid = model_grid(model, step) if grid is None else grid
    Pi, P, eta, margins = _integrate(model, grid, 3, conditions=conditions, delta=delta,
                                     eta_form=eta_form)
    return RiccatiSolution(grid, Pi, P, eta, margins, float(model.gamma), conditions)


def solvability(model, grid=None, conditions="I_and_II", delta=DELTA_COND, step=1e-3):
    """``(solvable, margin, violation)`` for the Pi and P systems.

    ``margin`` is the smallest required margin over the grid when solvable,
    otherwise the margin at the failing node (nan for a singular or
    non-finite solve).  ``violation`` is the raised error or None.
    """
    grid = model_grid(model, step) if grid is None else grid
    try:
        _, _, _, margins = _integrate(model, grid, 2, conditions=conditions, delta=delta)
    except ConditionViolation as exc:
        return False, float(exc.margin), exc
    except (NonFiniteValue, SingularRhat) as exc:
        return False, float("nan"), exc
    idx = [MARGIN_NAMES.index(nm) for nm in ("Rbar2",) + CONDITION_SETS[conditions]]
    return True, float(np.min(margins[..., idx])), None


def _gamma_views(table, gammas, m):
    views = []
    for p in range(table.n_pieces):
        c = table.take(p)
        Rg = np.repeat(c.R[None], gammas.size, axis=0)
        nv = Rg.shape[-1] - m
        Rg[..., m:, m:] -= gammas[:, None, None, None] ** 2 * np.eye(nv)
        c.R_gamma = Rg
        views.append(c)
    return views


def solvability_many(model, gammas, grid=None, conditions="I_and_II", delta=DELTA_COND,
                     step=1e-3):
    """:func:`solvability` for many attenuation levels in one batched integration.

    Returns boolean and margin arrays aligned with ``gammas``.  Levels drop
    out of the batch at their first failing node.
    """
    if conditions not in CONDITION_SETS:
        raise ValueError(f"unknown condition set {conditions!r}")
    gammas = np.asarray(gammas, dtype=float).reshape(-1)
    grid = model_grid(model, step) if grid is None else grid
    m, lam = model.dims.m, model.generator
    table, pieces = step_pieces(model, grid)
    checked = ("Rbar2",) + CONDITION_SETS[conditions]
    cols = [MARGIN_NAMES.index(nm) for nm in checked]
    h = np.diff(grid.nodes)

    ok = np.ones(gammas.size, dtype=bool)
    margin = np.full(gammas.size, np.inf)
    live = np.arange(gammas.size)
    views = _gamma_views(table, gammas, m)
    Pi = np.repeat(table.G[None], gammas.size, axis=0)
    P = Pi.copy()

    def drop(bad, values):
        nonlocal live, views, Pi, P
        ok[live[bad]] = False
        margin[live[bad]] = values
        keep = ~bad
        live, Pi, P = live[keep], Pi[keep], P[keep]
        views = _gamma_views(table, gammas[live], m)

    def margins_of(piece, pi, p):
        return node_margins(views[piece], pi, p, m, checked)[..., cols].reshape(len(live), -1)

    def first_bad(mg, bad):
        return mg[bad, np.argmin(mg[bad] >= delta, axis=1)]

    def certify(piece, failed, fail_margin):
        mg = margins_of(piece, Pi, P)
        bad = ~(mg >= delta).all(axis=1)
        fresh = bad & ~failed
        fail_margin[fresh] = first_bad(mg, fresh)
        bad |= failed
        margin[live[~bad]] = np.minimum(margin[live[~bad]], mg[~bad].min(axis=1))
        if bad.any():
            drop(bad, fail_margin[bad])

    def shift(y, a, f):
        return [_sym(y[0] + a * f[0]), _sym(y[1] + a * f[1])]

    def batch_spread(failed):
        def spread(y, stages, h):
            scale = 1.0 + np.maximum(*(np.abs(a).reshape(len(live), -1).max(axis=1) for a in y))
            dev = np.max([np.abs(f[i] - stages[0][i]).reshape(len(live), -1).max(axis=1)
                          for f in stages[1:] for i in range(2)], axis=0)
            # Members already known to fail do not drive refinement.
            return float(np.max((h * dev / scale)[~failed], initial=0.0))
        return spread

    def mark_nonfinite(z, failed, fail_margin):
        finite = np.isfinite(z[0]).all(axis=(1, 2, 3)) & np.isfinite(z[1]).all(axis=(1, 2, 3))
        fail_margin[~finite & ~failed] = np.nan
        failed[~finite] = True

    def on_mid_for(piece, failed, fail_margin):
        def on_mid(z, _s):
            mark_nonfinite(z, failed, fail_margin)
            mg = margins_of(piece, z[0], z[1])
            fresh = ~(mg >= delta).all(axis=1) & ~failed
            fail_margin[fresh] = first_bad(mg, fresh)
            failed[fresh] = True
        return on_mid

    certify(pieces[-1], np.zeros(len(live), dtype=bool), np.full(len(live), np.nan))
    for k in range(grid.K - 1, -1, -1):
        if not live.size:
            break
        c = views[pieces[k]]
        failed, fail_margin = np.zeros(len(live), dtype=bool), np.full(len(live), np.nan)
        try:
            Pi, P = _advance(lambda y, c=c: list(_rhs_joint(c, lam, y[0], y[1], m)), shift,
                             [Pi, P], h[k], grid.nodes[k + 1], batch_spread(failed),
                             on_mid_for(pieces[k], failed, fail_margin))
        except (np.linalg.LinAlgError, NonFiniteValue):
            # Rare: a stage is singular or a step cannot be resolved for some
            # level.  Settle the remaining levels one by one.
            for g in live:
                ok[g], margin[g], _ = solvability(model.with_gamma(float(gammas[g])), grid,
                                                  conditions, delta)
            return ok, margin
        mark_nonfinite([Pi, P], failed, fail_margin)
        certify(pieces[k], failed, fail_margin)
    return ok, margin


def is_solvable(model, grid=None, conditions="I_and_II", delta=DELTA_COND, step=1e-3):
    """True when Pi and P exist on the grid with all required margins."""
    return solvability(model, grid, conditions, delta, step)[0]


def node_blocks(sol, model, left=False):
    """BlockData batched over ``[node, regime]``.

    With ``left=True`` each node uses the coefficients of the interval ending
    there (left limits), otherwise the interval starting there.
    """
    table, pieces = step_pieces(model, sol.grid)
    idx = np.concatenate([[pieces[0]], pieces]) if left else np.concatenate([pieces, [pieces[-1]]])
    c = _with_gamma(table.take(idx), model.gamma, model.dims.m)
    return _blocks_batch(c, sol.Pi, sol.P, sol.eta, model.dims.m)


def _vec_names(prefix, n, cols=None):
    if cols is None:
        return [f"{prefix}_{i + 1}" for i in range(n)]
    return [f"{prefix}_{i + 1}{j + 1}" for i in range(n) for j in range(cols)]


def write_solution_csv(sol, path):
    K1, D, n, _ = sol.Pi.shape
    header = (["s", "regime"] + _vec_names("Pi", n, n) + _vec_names("P", n, n)
              + _vec_names("eta", n) + ["margin_" + nm for nm in MARGIN_NAMES])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(K1):
            for i in range(D):
                row = [repr(float(sol.grid.nodes[k])), i + 1]
                row += [repr(float(x)) for x in sol.Pi[k, i].ravel()]
                row += [repr(float(x)) for x in sol.P[k, i].ravel()]
                row += [repr(float(x)) for x in sol.eta[k, i]]
                row += [repr(float(x)) for x in sol.margins[k, i]]
                w.writerow(row)


def write_certificates_csv(sol, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "regime"] + list(MARGIN_NAMES))
        for k in range(sol.grid.K + 1):
            for i in range(sol.Pi.shape[1]):
                w.writerow([repr(float(sol.grid.nodes[k])), i + 1]
                           + [repr(float(x)) for x in sol.margins[k, i]])
