"""Euler-Maruyama co-simulation of the filtered state and its complement.

The state is carried as ``z = (xhat, xtilde)``; ``x = xhat + xtilde`` is
derived.  ``xhat`` is driven by ``W`` only, ``xtilde`` by ``W`` and
``Wbar``.  Regime jumps split grid steps; the Brownian increment of a split
step is distributed over the pieces with a Brownian bridge, so the full-step
increments do not depend on the chain.

Every supported policy is affine in the state with deterministic
coefficients, which lets one step be written as a per-regime linear map
applied to all paths at once.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .chain import ChainBatch, make_rng
from .errors import NonFiniteValue, UnsupportedDisturbance
from .riccati import step_pieces


# ------------------------------------------------------------------ policies

class _Term:
    """One deterministic coefficient: constant, node-gridded, or a function of time."""

    def __init__(self, spec, tail, D, K1):
        self.kind = "const"
        self.tail = tail
        if spec is None:
            self.value = np.zeros((D,) + tail)
        elif callable(spec):
            self.kind = "func"
            self.fn = spec
            self.D = D
        elif isinstance(spec, tuple):
            values, left = (np.asarray(a, dtype=float) for a in spec)
            self._check_grid(values, tail, D, K1)
            self.kind = "grid"
            self.value, self.left = values, left
        else:
            arr = np.asarray(spec, dtype=float)
            if arr.shape == tail:
                self.value = np.broadcast_to(arr, (D,) + tail)
            elif arr.shape == (D,) + tail:
                self.value = arr
            else:
                self._check_grid(arr, tail, D, K1)
                self.kind = "grid"
                self.value = self.left = arr

    @staticmethod
    def _check_grid(arr, tail, D, K1):
        if arr.shape != (K1, D) + tail:
            raise ValueError(f"coefficient shape {arr.shape} does not match "
                             f"{tail}, ({D},) + {tail} or ({K1}, {D}) + {tail}")

    def _call(self, s):
        out = np.asarray(self.fn(float(s)), dtype=float)
        return np.broadcast_to(out, (self.D,) + self.tail)

    def at(self, k, w, s):
        """Value at step ``k`` and in-step weight ``w`` (scalar or per path)."""
        if self.kind == "const":
            return self.value if np.ndim(w) == 0 else np.broadcast_to(
                self.value, np.shape(w) + self.value.shape)
        if self.kind == "grid":
            if np.ndim(w) == 0 and w == 0:
                return self.value[k]
            wb = np.reshape(w, np.shape(w) + (1,) * (self.value.ndim - 1))
            return (1 - wb) * self.value[k] + wb * self.left[k + 1]
        if np.ndim(s) == 0:
            return self._call(s)
        return np.stack([self._call(si) for si in s])

    def at_nodes(self, ks, times):
        """Node values for the node indices ``ks``, shape ``(len(ks), D) + tail``."""
        if self.kind == "const":
            return np.broadcast_to(self.value, (len(ks),) + self.value.shape)
        if self.kind == "grid":
            return self.value[ks]
        return np.stack([self._call(si) for si in times])


class ControlPolicy:
    """Affine control ``u = K(s, i) xhat + offset(s, i)``.

    The control sees only time, regime and the filtered state; there is no
    term acting on ``xtilde``.  ``gain`` and ``offset`` may be constant
    (shared or per regime), gridded over the simulation nodes, or (offset
    only) a function of time returning a per-regime or shared vector.
    """

    def __init__(self, gain=None, offset=None, label="control"):
        self.gain = gain
        self.offset = offset
        self.label = label

    def bind(self, dims, K1):
        return (_Term(self.gain, (dims.m, dims.n), dims.D, K1),
                _Term(self.offset, (dims.m,), dims.D, K1))

    def scaled(self, factor, label=None):
        return ControlPolicy(_scale(self.gain, factor), self.offset, label or self.label)

    def shifted(self, delta, label=None):
        return ControlPolicy(self.gain, _shift(self.offset, delta), label or self.label)


class DisturbancePolicy:
    """Affine disturbance ``v = Khat xhat + Ktilde xtilde + offset``.

    The filtered part is ``vhat = Khat xhat + offset`` and ``vtilde = Ktilde
    xtilde``, which is exact because ``xtilde`` has zero conditional mean
    given the controller's information.
    """

    def __init__(self, gain_hat=None, gain_tilde=None, offset=None, label="disturbance"):
        self.gain_hat = gain_hat
        self.gain_tilde = gain_tilde
        self.offset = offset
        self.label = label

    def bind(self, dims, K1):
        return (_Term(self.gain_hat, (dims.n_v, dims.n), dims.D, K1),
                _Term(self.gain_tilde, (dims.n_v, dims.n), dims.D, K1),
                _Term(self.offset, (dims.n_v,), dims.D, K1))

    def scaled(self, hat=1.0, tilde=1.0, label=None):
        return DisturbancePolicy(_scale(self.gain_hat, hat), _scale(self.gain_tilde, tilde),
                                 self.offset, label or self.label)

    def shifted(self, delta, label=None):
        return DisturbancePolicy(self.gain_hat, self.gain_tilde, _shift(self.offset, delta),
                                 label or self.label)


def _scale(spec, factor):
    if spec is None or factor == 1.0:
        return spec
    if isinstance(spec, tuple):
        return tuple(factor * np.asarray(a) for a in spec)
    if callable(spec):
        return lambda s: factor * np.asarray(spec(s))
    return factor * np.asarray(spec, dtype=float)


def _shift(spec, delta):
    if spec is None:
        return delta
    if callable(spec) or callable(delta):
        f = spec if callable(spec) else (lambda s: spec)
        g = delta if callable(delta) else (lambda s: delta)
        return lambda s: np.asarray(f(s)) + np.asarray(g(s))
    if isinstance(spec, tuple):
        return tuple(np.asarray(a) + np.asarray(delta) for a in spec)
    return np.asarray(spec, dtype=float) + np.asarray(delta, dtype=float)


def LinearFeedbackControl(gain, offset=None):
    return ControlPolicy(gain, offset, "linear feedback")


def LinearFeedbackDisturbance(gain_hat, gain_tilde, offset=None):
    return DisturbancePolicy(gain_hat, gain_tilde, offset, "linear feedback")


def OpenLoopControl(signal):
    """Deterministic control ``u(s)``; ``signal(s)`` returns an m-vector or (D, m) array."""
    return ControlPolicy(None, signal, "open loop")


def OpenLoopDisturbance(signal):
    """Deterministic disturbance; its filtered part is the signal itself."""
    return DisturbancePolicy(None, None, signal, "open loop")


def ZeroControl():
    return ControlPolicy(label="zero")


def ZeroDisturbance():
    return DisturbancePolicy(label="zero")


def SaddleControl(gains):
    """``u = ThetaHat1 xhat + v1`` from synthesized saddle gains."""
    m = gains.m
    return ControlPolicy((gains.ThetaHat[:, :, :m], gains.ThetaHat_left[:, :, :m]),
                         (gains.vbar[:, :, :m], gains.vbar_left[:, :, :m]), "saddle")


def SaddleDisturbance(gains):
    """``v = ThetaHat2 xhat + ThetaTilde2 xtilde + v2`` from synthesized saddle gains."""
    m = gains.m
    return DisturbancePolicy((gains.ThetaHat[:, :, m:], gains.ThetaHat_left[:, :, m:]),
                             (gains.ThetaTilde2, gains.ThetaTilde2_left),
                             (gains.vbar[:, :, m:], gains.vbar_left[:, :, m:]), "saddle")


def outcome_policies(gains):
    """The saddle outcome pair ``(u*, v*)``."""
    return SaddleControl(gains), SaddleDisturbance(gains)


# ----------------------------------------------------------- closed loop maps

class _Loop:
    """Affine closed-loop data in ``z = (xhat, xtilde)`` with leading batch axes."""

    __slots__ = ("M", "m0", "N", "n0", "Nb", "nb0", "H", "h", "c", "V", "v0",
                 "U", "u0", "Vh", "Vt")


def _compose(c, K1, o1, K2, Kt, o2):
    n = c.A.shape[-1]
    bs = np.broadcast_shapes(c.A.shape[:-2], K1.shape[:-2], K2.shape[:-2], Kt.shape[:-2])
    Z = np.zeros(bs + (n, n))
    I = np.broadcast_to(np.eye(n), bs + (n, n))
    L = _Loop()
    cat = lambda rows: np.concatenate([np.concatenate(r, axis=-1) for r in rows], axis=-2)
    vec = lambda a, b: np.concatenate([np.broadcast_to(a, bs + (n,)),
                                       np.broadcast_to(b, bs + (n,))], axis=-1)
    zero_n = np.zeros(bs + (n,))
    mv = lambda M, v: (M @ v[..., None])[..., 0]

    L.M = cat([[c.A + c.B1 @ K1 + c.B2 @ K2, Z], [Z, c.A + c.B2 @ Kt]])
    L.m0 = vec(mv(c.B1, o1) + mv(c.B2, o2) + c.b, zero_n)
    L.N = cat([[c.C + c.D1 @ K1 + c.D2 @ K2, Z], [Z, c.C + c.D2 @ Kt]])
    L.n0 = vec(mv(c.D1, o1) + mv(c.D2, o2) + c.sigma, zero_n)
    L.Nb = cat([[Z, Z], [c.Cbar + c.D1bar @ K1 + c.D2bar @ K2, c.Cbar + c.D2bar @ Kt]])
    L.nb0 = vec(zero_n, mv(c.D1bar, o1) + mv(c.D2bar, o2) + c.sigmabar)

    X = cat([[I, I]])
    Znv = np.zeros(Kt.shape)
    L.U = np.concatenate([np.broadcast_to(K1, bs + K1.shape[-2:]),
                          np.zeros(bs + K1.shape[-2:])], axis=-1)
    L.Vh = np.concatenate([np.broadcast_to(K2, bs + K2.shape[-2:]),
                           np.broadcast_to(Znv, bs + Kt.shape[-2:])], axis=-1)
    L.Vt = np.concatenate([np.broadcast_to(Znv, bs + Kt.shape[-2:]),
                           np.broadcast_to(Kt, bs + Kt.shape[-2:])], axis=-1)
    L.V = L.Vh + L.Vt
    L.u0 = np.broadcast_to(o1, bs + o1.shape[-1:])
    L.v0 = np.broadcast_to(o2, bs + o2.shape[-1:])
    T = lambda a: np.swapaxes(a, -1, -2)
    US = T(L.U) @ c.S1 @ X
    VS = T(L.V) @ c.S2 @ X
    L.H = (T(X) @ c.Q @ X + T(L.U) @ c.R1 @ L.U + T(L.V) @ c.R2 @ L.V
           + US + T(US) + VS + T(VS))
    L.h = (mv(T(L.U), mv(c.R1, L.u0) + c.rho1) + mv(T(L.V), mv(c.R2, L.v0) + c.rho2)
           + mv(T(X), mv(T(c.S1), L.u0) + mv(T(c.S2), L.v0) + c.q))
    L.c = (np.einsum("...i,...i->...", L.u0, mv(c.R1, L.u0))
           + np.einsum("...i,...i->...", L.v0, mv(c.R2, L.v0))
           + 2 * np.einsum("...i,...i->...", c.rho1, L.u0)
           + 2 * np.einsum("...i,...i->...", c.rho2, L.v0))
    return L


class _CoefView:
    def __init__(self, table, piece):
        for name in ("A", "B1", "B2", "C", "D1", "D2", "Cbar", "D1bar", "D2bar", "b",
                     "sigma", "sigmabar", "Q", "R1", "R2", "S1", "S2", "q", "rho1", "rho2"):
            setattr(self, name, getattr(table, name)[piece])


def _pack_rows(L):
    """Stack closed-loop rows: ``W`` drift, W-diffusion, Wbar-diffusion, cost
    form, v, u, vhat, vtilde; ``O`` the matching constants (twice the linear
    cost term) with the cost constant last, so the running cost is
    ``z . (Hz + 2h) + c``.
    """
    W = np.concatenate([L.M, L.N, L.Nb, L.H, L.V, L.U, L.Vh, L.Vt], axis=-2)
    zero = np.zeros(L.v0.shape)
    O = np.concatenate([L.m0, L.n0, L.nb0, 2 * L.h, L.v0, L.u0, L.v0, zero,
                        L.c[..., None]], axis=-1)
    return W, O


def _lift_matrix(W, O):
    """``(..., D, R, n2)`` rows and ``(..., D, R + 1)`` constants as one
    ``(..., R + 1, D * (n2 + 1))`` matrix acting on the regime one-hot lift of ``(z, 1)``."""
    *lead, D, R, n2 = W.shape
    big = np.empty(tuple(lead) + (R + 1, D, n2 + 1))
    big[..., :R, :, :n2] = np.swapaxes(W, -3, -2)
    big[..., R, :, :n2] = 0.0
    big[..., :, :, n2] = np.swapaxes(O, -1, -2)
    return big.reshape(tuple(lead) + (R + 1, D * (n2 + 1)))


class _Rows:
    """Slicing of evaluated rows.

    States are component-major with a leading policy axis, ``z`` of shape
    ``(policies, 2n, paths)``; rows ``Y`` are ``(policies, R + 1, paths)``.
    """

    def __init__(self, n, m, nv):
        self.n2, self.m, self.nv = 2 * n, m, nv

    def finish(self, Y, z):
        a, nv = self.n2, self.nv
        cost = np.einsum("...jp,...jp->...p", z, Y[..., 3 * a:4 * a, :]) + Y[..., -1, :]
        v = Y[..., 4 * a:4 * a + nv, :]
        return Y, cost, np.einsum("...jp,...jp->...p", v, v)

    def shared(self, big, z, onehot):
        """Evaluate per-regime lifted matrices ``big`` (policies, R + 1, D (2n + 1));
        ``onehot`` is ``(D, paths)``."""
        D, P = onehot.shape
        Q = z.shape[0]
        lift = np.empty((Q, D, self.n2 + 1, P))
        np.multiply(onehot[None, :, None, :], z[:, None], out=lift[:, :, :self.n2])
        lift[:, :, self.n2] = onehot
        return self.finish(big @ lift.reshape(Q, -1, P), z)

    def core_matrix(self, W, O, h):
        """Per-step rows ``[I + h M, N, Nbar (xtilde part), H, V]`` lifted; ``h`` broadcasts
        against the leading axes ``(..., D)`` of ``W``."""
        a, n, nv = self.n2, self.n2 // 2, self.nv
        hh = np.asarray(h, dtype=float)[..., None, None]
        Wc = np.concatenate([np.eye(a) + hh * W[..., :a, :], W[..., a:2 * a, :],
                             W[..., 2 * a + n:3 * a, :], W[..., 3 * a:4 * a + nv, :]], axis=-2)
        Oc = np.concatenate([hh[..., 0] * O[..., :a], O[..., a:2 * a], O[..., 2 * a + n:3 * a],
                             O[..., 3 * a:4 * a + nv], O[..., -1:]], axis=-1)
        return _lift_matrix(Wc, Oc)

    def core(self, big, z, onehot):
        """Evaluate :meth:`core_matrix` rows: ``(Y, cost, |v|^2)``."""
        D, P = onehot.shape
        Q = z.shape[0]
        a, n, nv = self.n2, self.n2 // 2, self.nv
        lift = np.empty((Q, D, a + 1, P))
        np.multiply(onehot[None, :, None, :], z[:, None], out=lift[:, :, :a])
        lift[:, :, a] = onehot
        Y = big @ lift.reshape(Q, -1, P)
        o = 2 * a + n
        cost = np.einsum("...jp,...jp->...p", z, Y[:, o:o + a]) + Y[:, -1]
        v = Y[:, o + a:o + a + nv]
        return Y, cost, np.einsum("...jp,...jp->...p", v, v)

    def core_step(self, Y, z, dw, dwb, frac=None):
        """Euler step from :meth:`core` rows; ``frac`` shortens the step to ``frac * h``."""
        a, n = self.n2, self.n2 // 2
        if frac is None:
            out = Y[:, :a] + Y[:, a:2 * a] * dw
        else:
            out = (Y[:, :a] - z) * frac
            out += z
            out += Y[:, a:2 * a] * dw
        out[:, n:] += Y[:, 2 * a:2 * a + n] * dwb
        return out

    def per_path(self, W, O, z, r):
        """Evaluate rows ``W`` (policies, paths, regime, R, 2n) at regimes ``r``."""
        ar = np.arange(z.shape[-1])
        Wp, Op = W[:, ar, r], O[:, ar, r]
        R = Wp.shape[-2]
        Y = np.empty((z.shape[0], R + 1, z.shape[-1]))
        Y[:, :R] = np.einsum("qprj,qjp->qrp", Wp, z) + np.swapaxes(Op[..., :R], -1, -2)
        Y[:, R] = Op[..., R]
        return self.finish(Y, z)

    def step(self, Y, z, dt, dw, dwb):
        a = self.n2
        out = Y[:, :a] * dt
        out += z
        out += Y[:, a:2 * a] * dw
        out += Y[:, 2 * a:3 * a] * dwb
        return out

    def policies(self, Y):
        """``(u, vhat, vtilde)`` rows."""
        a, nv, m = self.n2, self.nv, self.m
        o = 4 * a + nv
        return Y[:, o:o + m], Y[:, o + m:o + m + nv], Y[:, o + m + nv:o + m + 2 * nv]


_CHUNK = 128
_EMPTY = np.zeros(0, dtype=int)


# ------------------------------------------------------------------- results

@dataclass(frozen=True)
class SimBatch:
    """Simulated paths.

    Recorded arrays are indexed ``[recorded node, path, component]``.
    ``running`` is the trapezoidal integral of the running cost with the
    original ``R2`` weight, ``v_energy`` the integral of ``|v|^2``;
    ``J_gamma = running - gamma^2 v_energy + terminal``.
    """

    times: np.ndarray
    node_index: np.ndarray
    regime: np.ndarray
    xhat: np.ndarray
    xtilde: np.ndarray
    x: np.ndarray
    u: np.ndarray
    vhat: np.ndarray
    vtilde: np.ndarray
    v: np.ndarray
    running: np.ndarray
    v_energy: np.ndarray
    terminal: np.ndarray
    chains: ChainBatch
    dW: np.ndarray | None = None
    dWbar: np.ndarray | None = None

    @property
    def n_paths(self):
        return self.running.size

    def cost(self, gamma=None):
        """Per-path cost; ``gamma=None`` (or 0) gives the plain functional."""
        if gamma is None or gamma == 0:
            return self.running + self.terminal
        return self.running - gamma ** 2 * self.v_energy + self.terminal

    def path(self, p):
        return SimPath(self.times, self.chains.path(p), self.regime[:, p],
                       None if self.dW is None else self.dW[:, p],
                       None if self.dWbar is None else self.dWbar[:, p],
                       self.xhat[:, p], self.xtilde[:, p], self.x[:, p], self.u[:, p],
                       self.v[:, p], self.vhat[:, p], self.vtilde[:, p])


@dataclass(frozen=True)
class SimPath:
    times: np.ndarray
    chain: object
    regime: np.ndarray
    dW: np.ndarray | None
    dWbar: np.ndarray | None
    xhat: np.ndarray
    xtilde: np.ndarray
    x: np.ndarray
    u: np.ndarray
    v: np.ndarray
    vhat: np.ndarray
    vtilde: np.ndarray

    def to_csv(self, path):
        n, m, nv = self.x.shape[1], self.u.shape[1], self.v.shape[1]
        cols = lambda p, k: [f"{p}_{j + 1}" for j in range(k)]
        header = (["s", "regime"] + cols("x", n) + cols("xhat", n) + cols("xtilde", n)
                  + cols("u", m) + cols("v", nv) + cols("vhat", nv) + cols("vtilde", nv))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k, s in enumerate(self.times):
                vals = np.concatenate([self.x[k], self.xhat[k], self.xtilde[k], self.u[k],
                                       self.v[k], self.vhat[k], self.vtilde[k]])
                w.writerow([repr(float(s)), int(self.regime[k]) + 1]
                           + [repr(float(a)) for a in vals])


# --------------------------------------------------------------------- driver

def simulate(model, control, disturbance, grid, chains, seed=0, record=None,
             increments=None):
    """Simulate all chain paths in ``chains`` under the given policies.

    Parameters
    ----------
    model : GameModel
    control : ControlPolicy
    disturbance : DisturbancePolicy
    grid : TimeGrid
        Must start at the model's initial time and end at ``T``.
    chains : ChainBatch
        One regime path per simulated path.
    seed : int
        Seed of the Brownian stream.  The sequence of draws depends only on
        ``seed``, the grid and the chain jump pattern, so different policies
        see common random numbers.
    record : None, "all" or array of node indices
        Nodes at which states and policies are stored.  ``"all"`` also keeps
        the per-step Brownian increments.  The terminal node is always kept.
    increments : tuple of two (K, n_paths) arrays, optional
        Full-step increments of ``W`` and ``Wbar`` to use instead of drawing.
    """
    return simulate_many(model, [(control, disturbance)], grid, chains, seed, record,
                         increments)[0]


def simulate_many(model, pairs, grid, chains, seed=0, record=None, increments=None):
    """Simulate several ``(control, disturbance)`` pairs on shared noise.

    Every pair sees the same chain paths and Brownian increments, and gets
    exactly the result :func:`simulate` would give it alone, at the cost
    of one random stream.  Returns one :class:`SimBatch` per pair.
    """
    pairs = list(pairs)
    for control, disturbance in pairs:
        if not isinstance(control, ControlPolicy):
            raise TypeError("control must be a ControlPolicy")
        if not isinstance(disturbance, DisturbancePolicy):
            raise UnsupportedDisturbance(
                f"{type(disturbance).__name__} has no closed-form filtered component")
    d = model.dims
    K = grid.K
    nodes = grid.nodes
    P = len(chains)
    Q = len(pairs)
    bound = [(c.bind(d, K + 1), v.bind(d, K + 1)) for c, v in pairs]
    table, pieces = step_pieces(model, grid)
    views = [_CoefView(table, p) for p in range(table.n_pieces)]
    rng = make_rng(seed, 1)

    if isinstance(record, str) and record == "all":
        rec_nodes = np.arange(K + 1)
    elif record is None:
        rec_nodes = np.array([0, K])
    else:
        rec_nodes = np.unique(np.concatenate([np.asarray(record, dtype=int), [K]]))
    rec_pos = {int(k): j for j, k in enumerate(rec_nodes)}
    n2 = 2 * d.n
    nr = rec_nodes.size
    out = {name: np.zeros((Q, nr, P, dim)) for name, dim in
           (("z", n2), ("u", d.m), ("vhat", d.n_v), ("vtilde", d.n_v))}
    regime_rec = np.zeros((nr, P), dtype=int)
    keep_dw = isinstance(record, str) and record == "all"
    dW_all = np.zeros((K, P)) if keep_dw else None
    dWb_all = np.zeros((K, P)) if keep_dw else None
    rows = _Rows(d.n, d.m, d.n_v)

    z = np.zeros((Q, n2, P))
    z[:, :d.n] = model.initial_state[:, None]
    r = chains.states[:, 0].copy()
    ptr = np.zeros(P, dtype=int)
    jt = np.concatenate([chains.jump_times, np.full((P, 1), np.inf)], axis=1)
    nxt = jt[:, 0].copy()
    next_evt = nxt.min()
    running = np.zeros((Q, P))
    energy = np.zeros((Q, P))
    # Trapezoid weight owed at the current node: ``pend`` for every path
    # plus ``fix_w`` for the paths ``fix_idx`` whose last piece was short.
    pend = 0.0
    fix_idx, fix_w = _EMPTY, np.zeros(0)
    regimes = np.arange(d.D)[:, None]
    onehot = (r == regimes).astype(float)

    def stacked(fetch):
        """Policy terms stacked over pairs: ``(K1, o1, K2, Kt, o2)`` with a leading pair axis."""
        return [np.stack([fetch(t) for t in terms])
                for terms in zip(*(ctrl + dist for ctrl, dist in bound))]

    def loop_rows(k, w, s):
        terms = stacked(lambda t: t.at(k, w, s))
        return _pack_rows(_compose(views[pieces[k]], *terms))

    def node_matrices(ks):
        terms = stacked(lambda t: t.at_nodes(ks, nodes[ks]))
        W, O = _pack_rows(_compose(_CoefView(table, pieces[ks]), *terms))
        big = rows.core_matrix(W, O, step_h[ks][:, None])
        return np.swapaxes(big, 0, 1)  # (nodes, pairs, rows, D (2n + 1))

    def store(j, Y, zz, regs):
        u, vh, vt = rows.policies(Y)
        for name, val in (("z", zz), ("u", u), ("vhat", vh), ("vtilde", vt)):
            out[name][:, j] = np.swapaxes(val, -1, -2)
        regime_rec[j] = regs

    def advance(J):
        ptr[J] += 1
        r[J] = chains.states[J, ptr[J]]
        nxt[J] = jt[J, ptr[J]]

    step_h = np.diff(nodes)
    sqrt_h = np.sqrt(step_h)
    bigs = None
    for k in range(K):
        if k % _CHUNK == 0:
            bigs = node_matrices(np.arange(k, min(k + _CHUNK, K)))
        s0, s1 = nodes[k], nodes[k + 1]
        h = s1 - s0
        if increments is None:
            dw, dwb = rng.standard_normal((2, P)) * sqrt_h[k]
        else:
            dw, dwb = increments[0][k], increments[1][k]
        if keep_dw:
            dW_all[k], dWb_all[k] = dw, dwb

        if next_evt <= s0:  # jumps landing exactly on a node
            while True:
                idx = np.nonzero(nxt <= s0)[0]
                if not idx.size:
                    break
                advance(idx)
            onehot = (r == regimes).astype(float)
            next_evt = nxt.min()

        Y, cost0, en0 = rows.core(bigs[k % _CHUNK], z, onehot)
        if k in rec_pos:
            store(rec_pos[k], rows.shared(_lift_matrix(*loop_rows(k, 0.0, s0)), z, onehot)[0],
                  z, r)

        zn = rows.core_step(Y, z, dw, dwb)
        wgt = pend + 0.5 * h
        running += wgt * cost0
        energy += wgt * en0
        if fix_idx.size:  # trapezoid weights that differ from the uniform one
            running[:, fix_idx] += fix_w * cost0[:, fix_idx]
            energy[:, fix_idx] += fix_w * en0[:, fix_idx]
        pend = 0.5 * h
        fix_idx = _EMPTY
        if next_evt < s1:
            J = np.nonzero(nxt < s1)[0]
            tJ = nxt[J]
            seg = tJ - s0
            rem_w, rem_wb = dw[J], dwb[J]
            rem_t = np.full(J.size, h)
            pw, pwb = _bridge(rng, rem_w, rem_wb, rem_t, seg)
            zn[:, :, J] = rows.core_step(Y[:, :, J], z[:, :, J], pw, pwb, seg / h)
            corr = 0.5 * (seg - h)
            running[:, J] += corr * cost0[:, J]
            energy[:, J] += corr * en0[:, J]
            rem_w, rem_wb, rem_t = rem_w - pw, rem_wb - pwb, rem_t - seg
            z = zn
            ends, end_w = [], []

            # Walk the jumpers through the remaining pieces of this step.
            while J.size:
                Wj, Oj = loop_rows(k, (tJ - s0) / h, tJ)
                zJ = z[:, :, J]
                _, cj, ej = rows.per_path(Wj, Oj, zJ, r[J])
                running[:, J] += 0.5 * seg * cj  # end of the pre-jump piece
                energy[:, J] += 0.5 * seg * ej
                advance(J)
                Yj, cj, ej = rows.per_path(Wj, Oj, zJ, r[J])
                nj = nxt[J]
                end = np.minimum(nj, s1)
                seg = end - tJ
                more = nj < s1
                pw, pwb = _bridge(rng, rem_w, rem_wb, rem_t, seg)
                # Pieces ending at the node take the exact remainder.
                pw = np.where(more, pw, rem_w)
                pwb = np.where(more, pwb, rem_wb)
                z[:, :, J] = rows.step(Yj, zJ, seg, pw, pwb)
                running[:, J] += 0.5 * seg * cj
                energy[:, J] += 0.5 * seg * ej
                ends.append(J[~more])
                end_w.append(0.5 * seg[~more] - pend)
                rem_w, rem_wb = (rem_w - pw)[more], (rem_wb - pwb)[more]
                rem_t = (rem_t - seg)[more]
                J, tJ, seg = J[more], end[more], seg[more]
            fix_idx, fix_w = np.concatenate(ends), np.concatenate(end_w)
            onehot = (r == regimes).astype(float)
            next_evt = nxt.min()
        else:
            z = zn
        if k % 16 == 15 and not np.isfinite(z).all():
            raise NonFiniteValue(f"simulation diverged before s={s1:.6g}")
    if not np.isfinite(z).all():
        raise NonFiniteValue("simulation diverged")

    W, O = loop_rows(K - 1, 1.0, nodes[K])
    Y, costT, enT = rows.shared(_lift_matrix(W, O), z, (r == regimes).astype(float))
    running += pend * costT
    energy += pend * enT
    if fix_idx.size:
        running[:, fix_idx] += fix_w * costT[:, fix_idx]
        energy[:, fix_idx] += fix_w * enT[:, fix_idx]
    store(rec_pos[K], Y, z, r)

    x = np.swapaxes(z[:, :d.n] + z[:, d.n:], -1, -2)  # (Q, P, n)
    G, g = table.G[r], table.g[r]
    terminal = np.einsum("qpi,pij,qpj->qp", x, G, x) + 2 * np.einsum("pi,qpi->qp", g, x)

    results = []
    for q in range(Q):
        zr = out["z"][q]
        xhat, xtilde = zr[..., :d.n], zr[..., d.n:]
        vh, vt = out["vhat"][q], out["vtilde"][q]
        results.append(SimBatch(nodes[rec_nodes], rec_nodes, regime_rec, xhat, xtilde,
                                xhat + xtilde, out["u"][q], vh, vt, vh + vt, running[q],
                                energy[q], terminal[q], chains, dW_all, dWb_all))
    return results


def _bridge(rng, rem_w, rem_wb, rem_t, seg):
    """First piece of a Brownian increment ``rem`` over ``rem_t``, of length ``seg``."""
    frac = seg / rem_t
    sd = np.sqrt(np.maximum(seg * (rem_t - seg) / rem_t, 0.0))
    zz = rng.standard_normal((2, rem_w.size))
    return frac * rem_w + sd * zz[0], frac * rem_wb + sd * zz[1]


def simulate_path(model, control, disturbance, grid, chain, seed=0):
    """Single fully recorded path."""
    batch = simulate(model, control, disturbance, grid, ChainBatch.from_paths([chain]),
                     seed=seed, record="all")
    return batch.path(0)


# ------------------------------------------------------------ orthogonality

@dataclass(frozen=True)
class FilterStats:
    times: np.ndarray
    mean_xtilde_norm: np.ndarray
    mean_xtilde_stderr: np.ndarray
    cross: np.ndarray
    cross_stderr: np.ndarray
    h_vtilde: np.ndarray
    h_vtilde_stderr: np.ndarray

    def passes(self, k=3.0):
        """All statistics within ``k`` standard errors of zero."""
        return bool(np.all(self.mean_xtilde_norm <= k * self.mean_xtilde_stderr + 1e-300)
                    and np.all(np.abs(self.cross) <= k * self.cross_stderr + 1e-300)
                    and np.all(np.abs(self.h_vtilde) <= k * self.h_vtilde_stderr + 1e-300))


def _mean_se(a):
    n = a.shape[0]
    return a.mean(axis=0), a.std(axis=0, ddof=1) / np.sqrt(n)


def filter_consistency_stats(batch, checkpoints=None, h=None):
    """Orthogonality statistics of ``xtilde`` against the controller's information.

    For each recorded checkpoint: ``||E xtilde||`` with the norm of the
    component standard errors, ``E<xhat, xtilde>`` and ``E<h, vtilde>``
    with their standard errors.
    """
    idx = np.arange(batch.times.size) if checkpoints is None else np.asarray(checkpoints)
    nv = batch.vtilde.shape[-1]
    h = np.ones(nv) if h is None else np.asarray(h, dtype=float)
    rows = []
    for j in idx:
        xt = batch.xtilde[j]
        mu, se = _mean_se(xt)
        cr, cr_se = _mean_se(np.einsum("pi,pi->p", batch.xhat[j], xt))
        hv, hv_se = _mean_se(batch.vtilde[j] @ h)
        rows.append((np.linalg.norm(mu), np.linalg.norm(se), cr, cr_se, hv, hv_se))
    arr = np.array(rows).T if rows else np.zeros((6, 0))
    return FilterStats(batch.times[idx], *arr)
