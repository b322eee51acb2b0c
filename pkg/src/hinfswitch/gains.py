"""Saddle-point feedback gains and the player-wise control-strategy pairs."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve

from .errors import SingularRhat
from .riccati import node_blocks


def _sym_solve(A, B):
    try:
        return solve(A, B, assume_a="sym")
    except np.linalg.LinAlgError as exc:
        raise SingularRhat(str(exc)) from exc


def _spd_solve(A, B):
    try:
        return cho_solve(cho_factor(A), B)
    except np.linalg.LinAlgError as exc:
        raise SingularRhat(f"block is not definite: {exc}") from exc


def _nodewise(fn, *arrays):
    """Apply ``fn`` to every ``[node, regime]`` slice and stack the results."""
    K1, D = arrays[0].shape[:2]
    first = fn(*(a[0, 0] for a in arrays))
    out = [np.empty((K1, D) + np.shape(r)) for r in first]
    for k in range(K1):
        for i in range(D):
            res = first if k == i == 0 else fn(*(a[k, i] for a in arrays))
            for o, r in zip(out, res):
                o[k, i] = r
    return out


def _tilde_gain(Rbar2, Sbar2):
    return -_sym_solve(Rbar2, Sbar2)


def _saddle_node(Rhat, Shat, Psi, Rbar2, Sbar2):
    n = Shat.shape[1]
    X = _sym_solve(Rhat, np.column_stack([Shat, Psi]))
    return -X[:, :n], _tilde_gain(Rbar2, Sbar2), -X[:, n]


@dataclass(frozen=True)
class SaddleGains:
    """Node values of the saddle triple, indexed ``[node, regime, ...]``.

    The ``*_left`` arrays hold left limits at coefficient breakpoints and
    coincide with the node arrays elsewhere.  Between nodes the gains are
    interpolated linearly from the node value to the next left limit.
    """

    grid: object
    gamma: float
    m: int
    ThetaHat: np.ndarray
    ThetaTilde2: np.ndarray
    vbar: np.ndarray
    ThetaHat_left: np.ndarray
    ThetaTilde2_left: np.ndarray
    vbar_left: np.ndarray

    @property
    def ThetaHat1(self):
        return self.ThetaHat[:, :, :self.m]

    @property
    def ThetaHat2(self):
        return self.ThetaHat[:, :, self.m:]

    @property
    def v1(self):
        return self.vbar[:, :, :self.m]

    @property
    def v2(self):
        return self.vbar[:, :, self.m:]

    def at(self, s, i):
        """Interpolated ``(ThetaHat, ThetaTilde2, vbar)`` at time ``s`` in regime ``i``."""
        k, w = self.grid.locate(s)
        lerp = lambda a, b: (1 - w) * a[k, i] + w * b[k + 1, i]
        return (lerp(self.ThetaHat, self.ThetaHat_left),
                lerp(self.ThetaTilde2, self.ThetaTilde2_left),
                lerp(self.vbar, self.vbar_left))

    def to_csv(self, path):
        K1, D, mv, n = self.ThetaHat.shape
        m = self.m
        names = ([f"ThetaHat1_{a + 1}{b + 1}" for a in range(m) for b in range(n)]
                 + [f"ThetaHat2_{a + 1}{b + 1}" for a in range(mv - m) for b in range(n)]
                 + [f"ThetaTilde2_{a + 1}{b + 1}" for a in range(mv - m) for b in range(n)]
                 + [f"v1_{a + 1}" for a in range(m)] + [f"v2_{a + 1}" for a in range(mv - m)])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "regime"] + names)
            for k in range(K1):
                for i in range(D):
                    vals = np.concatenate([self.ThetaHat1[k, i].ravel(),
                                           self.ThetaHat2[k, i].ravel(),
                                           self.ThetaTilde2[k, i].ravel(), self.vbar[k, i]])
                    w.writerow([repr(float(self.grid.nodes[k])), i + 1]
                               + [repr(float(x)) for x in vals])


def synthesize(sol, model):
    """Saddle gains ``ThetaHat = -Rhat^-1 Shat``, ``ThetaTilde2 = -Rbar2^-1 Sbar2``,
    ``vbar = -Rhat^-1 Psi`` at every node.

    ``Rhat`` is sign-indefinite, so its solves use a pivoted symmetric
    indefinite factorization.
    """
    def compute(left):
        bd = node_blocks(sol, model, left=left)
        return _nodewise(_saddle_node, bd.Rhat, bd.Shat, bd.Psi, bd.Rbar2, bd.Sbar2)

    right = compute(False)
    left = compute(True) if model.breakpoints().size else right
    return SaddleGains(sol.grid, sol.gamma, model.dims.m, *right, *left)


@dataclass(frozen=True)
class Player1Pair:
    """Control feedback ``u = u_gain xhat + u_offset`` and the disturbance
    strategy ``vhat = v_u u + v_x xhat + v_offset``, plus ``vtilde = vtilde_gain xtilde``.
    """

    u_gain: np.ndarray
    u_offset: np.ndarray
    v_u: np.ndarray
    v_x: np.ndarray
    v_offset: np.ndarray
    vtilde_gain: np.ndarray

    def induced(self):
        """Gains and offsets of ``(u*, vhat*)`` after substituting ``u*``."""
        v_gain = self.v_u @ self.u_gain + self.v_x
        v_off = (self.v_u @ self.u_offset[..., None])[..., 0] + self.v_offset
        return self.u_gain, v_gain, self.u_offset, v_off


@dataclass(frozen=True)
class Player2Pair:
    """Control strategy ``u = u_v vhat + u_x xhat + u_offset`` against the
    disturbance feedback ``vhat = v_gain xhat + v_offset``, plus ``vtilde``.
    """

    u_v: np.ndarray
    u_x: np.ndarray
    u_offset: np.ndarray
    v_gain: np.ndarray
    v_offset: np.ndarray
    vtilde_gain: np.ndarray

    def induced(self):
        u_gain = self.u_v @ self.v_gain + self.u_x
        u_off = (self.u_v @ self.v_offset[..., None])[..., 0] + self.u_offset
        return u_gain, self.v_gain, u_off, self.v_offset


def _player1_node(Rhat, Shat, psi, psibar, Rbar2, Sbar2, m):
    R11, R12, R22 = Rhat[:m, :m], Rhat[:m, m:], Rhat[m:, m:]
    S1, S2 = Shat[:m], Shat[m:]
    n = Shat.shape[1]
    # R22 << 0: factor -R22.
    X = -_spd_solve(-R22, np.column_stack([R12.T, S2, psi]))
    schur = R11 - R12 @ X[:, :m]
    E = S1 - R12 @ X[:, m:m + n]
    phi = psibar - R12 @ X[:, m + n]
    Y = -_spd_solve(schur, np.column_stack([E, phi]))
    return (Y[:, :n], Y[:, n], -X[:, :m], -X[:, m:m + n], -X[:, m + n],
            _tilde_gain(Rbar2, Sbar2))


def _player2_node(Rhat, Shat, psi, psibar, Rbar2, Sbar2, m):
    R11, R12, R22 = Rhat[:m, :m], Rhat[:m, m:], Rhat[m:, m:]
    S1, S2 = Shat[:m], Shat[m:]
    n = Shat.shape[1]
    nv = R22.shape[0]
    X = _spd_solve(R11, np.column_stack([R12, S1, psibar]))
    schur = R22 - R12.T @ X[:, :nv]
    E = S2 - R12.T @ X[:, nv:nv + n]
    phibar = psi - R12.T @ X[:, nv + n]
    # schur << 0: factor its negative.
    Y = _spd_solve(-schur, np.column_stack([E, phibar]))
    return (-X[:, :nv], -X[:, nv:nv + n], -X[:, nv + n], Y[:, :n], Y[:, n],
            _tilde_gain(Rbar2, Sbar2))


def player1_pair(sol, model):
    """Feedback control with the disturbance's best-response strategy.

    Requires ``Rhat22 << 0`` and a positive Schur complement of ``Rhat22``.
    """
    bd = node_blocks(sol, model)
    m = model.dims.m
    out = _nodewise(lambda *a: _player1_node(*a, m), bd.Rhat, bd.Shat, bd.psi, bd.psibar,
                    bd.Rbar2, bd.Sbar2)
    return Player1Pair(*out)


def player2_pair(sol, model):
    """Feedback disturbance with the controller's best-response strategy.

    Requires ``Rhat11 >> 0`` and a negative Schur complement of ``Rhat11``.
    """
    bd = node_blocks(sol, model)
    m = model.dims.m
    out = _nodewise(lambda *a: _player2_node(*a, m), bd.Rhat, bd.Shat, bd.psi, bd.psibar,
                    bd.Rbar2, bd.Sbar2)
    return Player2Pair(*out)


def algebraic_system_solve(Rhat, Shat, offsets, xhat, m):
    """Solve ``Rhat [u; vhat] + Shat xhat + offsets = 0`` for ``(u, vhat)``."""
    rhs = -(np.asarray(Shat) @ np.asarray(xhat, dtype=float) + np.asarray(offsets, dtype=float))
    sol = _sym_solve(np.asarray(Rhat, dtype=float), rhs)
    return sol[:m], sol[m:]
