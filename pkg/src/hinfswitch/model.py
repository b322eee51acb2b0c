"""Problem data: dynamics, weights, regime generator, horizon and attenuation level.

Coefficients may be constant or piecewise constant in time.  A field given
as a plain array is constant; a :class:`PiecewiseConstant` holds values on
the intervals cut by its breakpoints and is right-continuous.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ScenarioError, ValidationError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

COEFF_FIELDS = ("A", "B1", "B2", "C", "D1", "D2", "Cbar", "D1bar", "D2bar",
                "b", "sigma", "sigmabar")
WEIGHT_FIELDS = ("Q", "R1", "R2", "S1", "S2", "q", "rho1", "rho2")
TERMINAL_FIELDS = ("G", "g")
OPTIONAL_FIELDS = ("b", "sigma", "sigmabar", "q", "rho1", "rho2", "g")
INHOMOGENEOUS_FIELDS = OPTIONAL_FIELDS
SYMMETRIC_FIELDS = ("Q", "R1", "R2", "G")


@dataclass(frozen=True)
class Dims:
    n: int
    m: int
    n_v: int
    D: int
    T: float

    def __post_init__(self):
        for name in ("n", "m", "n_v", "D"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ScenarioError(f"dimension {name} must be a positive integer, got {v}")
        if not self.T > 0:
            raise ScenarioError(f"horizon T must be positive, got {self.T}")

    def shape_of(self, name):
        n, m, nv = self.n, self.m, self.n_v
        return {
            "A": (n, n), "B1": (n, m), "B2": (n, nv), "C": (n, n),
            "D1": (n, m), "D2": (n, nv), "Cbar": (n, n), "D1bar": (n, m),
            "D2bar": (n, nv), "b": (n,), "sigma": (n,), "sigmabar": (n,),
            "Q": (n, n), "R1": (m, m), "R2": (nv, nv), "S1": (m, n),
            "S2": (nv, n), "q": (n,), "rho1": (m,), "rho2": (nv,),
            "G": (n, n), "g": (n,),
        }[name]


@dataclass(frozen=True)
class PiecewiseConstant:
    """Right-continuous step function of time.

    ``values[k]`` holds on ``[breaks[k-1], breaks[k])`` with the outer
    intervals extending to the horizon ends.
    """

    breaks: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        breaks = np.asarray(self.breaks, dtype=float).reshape(-1)
        values = np.asarray(self.values, dtype=float)
        if values.shape[0] != breaks.size + 1:
            raise ScenarioError("piecewise data needs one more value than breakpoints")
        if breaks.size > 1 and np.any(np.diff(breaks) <= 0):
            raise ScenarioError("breakpoints must be strictly increasing")
        object.__setattr__(self, "breaks", breaks)
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape[1:]

    def __call__(self, s):
        return self.values[np.searchsorted(self.breaks, s, side="right")]


def _value_at(f, s):
    return f(s) if isinstance(f, PiecewiseConstant) else f


def _breaks_of(f):
    return f.breaks if isinstance(f, PiecewiseConstant) else np.empty(0)


@dataclass(frozen=True)
class RegimeCoeffs:
    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    Cbar: np.ndarray
    D1bar: np.ndarray
    D2bar: np.ndarray
    b: np.ndarray
    sigma: np.ndarray
    sigmabar: np.ndarray


@dataclass(frozen=True)
class RegimeWeights:
    Q: np.ndarray
    R1: np.ndarray
    R2: np.ndarray
    S1: np.ndarray
    S2: np.ndarray
    q: np.ndarray
    rho1: np.ndarray
    rho2: np.ndarray
    G: np.ndarray
    g: np.ndarray


@dataclass(frozen=True)
class StackedCoeffs:
    """Stacked notation at one (time, regime) pair."""

    B: np.ndarray
    D: np.ndarray
    Dbar: np.ndarray
    R: np.ndarray
    R_gamma: np.ndarray
    S: np.ndarray
    rho: np.ndarray


class Coefficients:
    """Array view of every coefficient, stacked over pieces and regimes.

    Time-varying fields have shape ``(n_pieces, D, *shape)``; terminal
    fields ``G`` and ``g`` have shape ``(D, *shape)``.  ``take`` indexes the
    piece axis.
    """

    def __init__(self, edges, arrays, terminal):
        self.edges = edges
        self._arrays = arrays
        self._terminal = terminal
        for k, v in arrays.items():
            setattr(self, k, v)
        for k, v in terminal.items():
            setattr(self, k, v)

    @property
    def n_pieces(self):
        return self.edges.size - 1

    def piece_index(self, s):
        """Piece containing ``s`` (right-continuous; ``T`` maps to the last)."""
        idx = np.searchsorted(self.edges[1:-1], s, side="right")
        return idx

    def take(self, idx):
        arrays = {k: v[idx] for k, v in self._arrays.items()}
        return Coefficients(self.edges, arrays, self._terminal)


def _as_array(value, shape, name):
    arr = np.asarray(value, dtype=float)
    if arr.shape == shape:
        return arr
    if arr.size == int(np.prod(shape)) and (arr.ndim == 0 or arr.ndim == len(shape)
                                            or (len(shape) == 2 and 1 in shape)):
        return arr.reshape(shape)
    raise ScenarioError(f"{name}: expected shape {shape}, got {arr.shape}")


def _as_field(value, shape, name):
    if isinstance(value, PiecewiseConstant):
        values = np.stack([_as_array(v, shape, name) for v in value.values])
        return PiecewiseConstant(value.breaks, values)
    if isinstance(value, Mapping):
        try:
            breaks, values = value["breaks"], value["values"]
        except KeyError as exc:
            raise ScenarioError(f"{name}: piecewise table needs 'breaks' and 'values'") from exc
        values = np.stack([_as_array(v, shape, name) for v in values])
        return PiecewiseConstant(np.asarray(breaks, dtype=float), values)
    return _as_array(value, shape, name)


@dataclass(frozen=True)
class GameModel:
    """Complete problem datum.

    Regime indices are zero-based throughout the Python API.
    """

    dims: Dims
    generator: np.ndarray
    coeffs: tuple
    weights: tuple
    gamma: float
    initial_state: np.ndarray
    initial_regime: int = 0
    initial_time: float = 0.0

    def __post_init__(self):
        d = self.dims
        gen = np.asarray(self.generator, dtype=float)
        if gen.shape != (d.D, d.D):
            raise ScenarioError(f"generator must be {d.D}x{d.D}, got {gen.shape}")
        object.__setattr__(self, "generator", gen)
        object.__setattr__(self, "coeffs", tuple(self.coeffs))
        object.__setattr__(self, "weights", tuple(self.weights))
        if len(self.coeffs) != d.D or len(self.weights) != d.D:
            raise ScenarioError(
                f"expected {d.D} regime blocks, got {len(self.coeffs)} coefficient "
                f"and {len(self.weights)} weight blocks")
        for blocks in (self.coeffs, self.weights):
            for block in blocks:
                for f in dataclasses.fields(block):
                    v = getattr(block, f.name)
                    shape = v.shape
                    if shape != d.shape_of(f.name):
                        raise ScenarioError(f"{f.name}: expected shape "
                                            f"{d.shape_of(f.name)}, got {shape}")
                    if isinstance(v, PiecewiseConstant) and (
                            f.name in TERMINAL_FIELDS or np.any(v.breaks <= 0)
                            or np.any(v.breaks >= d.T)):
                        raise ScenarioError(f"{f.name}: breakpoints must lie in (0, T) "
                                            "and terminal weights must be constant")
        if not self.gamma > 0:
            raise ScenarioError(f"gamma must be positive, got {self.gamma}")
        xi = _as_array(self.initial_state, (d.n,), "initial_state")
        object.__setattr__(self, "initial_state", xi)
        if not 0 <= self.initial_regime < d.D or int(self.initial_regime) != self.initial_regime:
            raise ScenarioError(f"initial regime {self.initial_regime} out of range")
        object.__setattr__(self, "initial_regime", int(self.initial_regime))
        if not 0 <= self.initial_time < d.T:
            raise ScenarioError(f"initial time must lie in [0, T), got {self.initial_time}")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def with_gamma(self, gamma):
        return self.replace(gamma=float(gamma))

    def breakpoints(self):
        """Sorted union of all coefficient breakpoints."""
        allb = [_breaks_of(getattr(blk, f.name))
                for blocks in (self.coeffs, self.weights)
                for blk in blocks for f in dataclasses.fields(blk)]
        return np.unique(np.concatenate(allb)) if allb else np.empty(0)

    @property
    def is_homogeneous(self):
        for blocks in (self.coeffs, self.weights):
            for blk in blocks:
                for name in INHOMOGENEOUS_FIELDS:
                    if hasattr(blk, name):
                        v = getattr(blk, name)
                        vals = v.values if isinstance(v, PiecewiseConstant) else v
                        if np.any(vals != 0):
                            return False
        return True

    def homogeneous(self, zero_initial_state=True):
        """Copy with every inhomogeneous term (and optionally the initial state) zeroed."""
        d = self.dims
        coeffs = [dataclasses.replace(c, **{k: np.zeros(d.shape_of(k))
                                            for k in ("b", "sigma", "sigmabar")})
                  for c in self.coeffs]
        weights = [dataclasses.replace(w, **{k: np.zeros(d.shape_of(k))
                                             for k in ("q", "rho1", "rho2", "g")})
                   for w in self.weights]
        xi = np.zeros(d.n) if zero_initial_state else self.initial_state
        return self.replace(coeffs=tuple(coeffs), weights=tuple(weights), initial_state=xi)

    def coefficient_table(self):
        """Evaluate every field on each piece of the breakpoint partition."""
        d = self.dims
        edges = np.concatenate([[0.0], self.breakpoints(), [d.T]])
        mids = 0.5 * (edges[:-1] + edges[1:])
        arrays = {}
        for name in COEFF_FIELDS + WEIGHT_FIELDS:
            src = self.coeffs if name in COEFF_FIELDS else self.weights
            arrays[name] = np.array([[_value_at(getattr(src[i], name), s)
                                      for i in range(d.D)] for s in mids])
        arrays["B"] = np.concatenate([arrays["B1"], arrays["B2"]], axis=-1)
        arrays["D"] = np.concatenate([arrays["D1"], arrays["D2"]], axis=-1)
        arrays["Dbar"] = np.concatenate([arrays["D1bar"], arrays["D2bar"]], axis=-1)
        arrays["S"] = np.concatenate([arrays["S1"], arrays["S2"]], axis=-2)
        arrays["rho"] = np.concatenate([arrays["rho1"], arrays["rho2"]], axis=-1)
        R = np.zeros(arrays["R1"].shape[:2] + (d.m + d.n_v,) * 2)
        R[..., :d.m, :d.m] = arrays["R1"]
        R[..., d.m:, d.m:] = arrays["R2"]
        arrays["R"] = R
        terminal = {k: np.array([getattr(w, k) for w in self.weights]) for k in TERMINAL_FIELDS}
        return Coefficients(edges, arrays, terminal)


def make_model(dims, generator, regimes, gamma, initial_state, initial_regime=0,
               initial_time=0.0):
    """Build a :class:`GameModel` from per-regime dictionaries.

    Each dictionary maps field names to arrays (or ``{"breaks", "values"}``
    tables); optional inhomogeneous terms default to zero.
    """
    if not isinstance(dims, Dims):
        dims = Dims(**dims)
    coeffs, weights = [], []
    for k, reg in enumerate(regimes):
        unknown = set(reg) - set(COEFF_FIELDS + WEIGHT_FIELDS + TERMINAL_FIELDS)
        if unknown:
            raise ScenarioError(f"regime {k + 1}: unknown keys {sorted(unknown)}")
        vals = {}
        for name in COEFF_FIELDS + WEIGHT_FIELDS + TERMINAL_FIELDS:
            if name in reg:
                vals[name] = _as_field(reg[name], dims.shape_of(name), f"regime {k + 1} {name}")
            elif name in OPTIONAL_FIELDS:
                vals[name] = np.zeros(dims.shape_of(name))
            else:
                raise ScenarioError(f"regime {k + 1}: missing required key {name}")
        coeffs.append(RegimeCoeffs(**{k_: vals[k_] for k_ in COEFF_FIELDS}))
        weights.append(RegimeWeights(**{k_: vals[k_] for k_ in WEIGHT_FIELDS + TERMINAL_FIELDS}))
    return GameModel(dims, np.asarray(generator, dtype=float), tuple(coeffs), tuple(weights),
                     float(gamma), np.asarray(initial_state, dtype=float),
                     int(initial_regime), float(initial_time))


def stacked_views(model, s, i, gamma=None):
    """Stacked matrices ``B, D, Dbar, R, R_gamma, S, rho`` at time ``s`` in regime ``i``.

    ``gamma`` overrides the model's attenuation level; ``gamma=0`` gives
    ``R_gamma = R``.
    """
    d = model.dims
    if not 0 <= s <= d.T:
        raise ValueError(f"time {s} outside [0, {d.T}]")
    if not 0 <= i < d.D:
        raise ValueError(f"regime {i} out of range")
    g = model.gamma if gamma is None else gamma
    c, w = model.coeffs[i], model.weights[i]
    at = lambda f: _value_at(f, s)
    R = np.zeros((d.m + d.n_v,) * 2)
    R[:d.m, :d.m] = at(w.R1)
    R[d.m:, d.m:] = at(w.R2)
    R_gamma = R.copy()
    R_gamma[d.m:, d.m:] -= g ** 2 * np.eye(d.n_v)
    return StackedCoeffs(
        B=np.hstack([at(c.B1), at(c.B2)]),
        D=np.hstack([at(c.D1), at(c.D2)]),
        Dbar=np.hstack([at(c.D1bar), at(c.D2bar)]),
        R=R, R_gamma=R_gamma,
        S=np.vstack([at(w.S1), at(w.S2)]),
        rho=np.concatenate([at(w.rho1), at(w.rho2)]),
    )


# ---------------------------------------------------------------- validation

@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""
    matrix: str | None = None
    time: float | None = None
    regime: int | None = None
    eigenvalue: float | None = None


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple = field(default_factory=tuple)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def __str__(self):
        lines = []
        for c in self.checks:
            mark = "ok  " if c.passed else "FAIL"
            lines.append(f"[{mark}] {c.name}: {c.detail}")
        return "\n".join(lines)


def check_generator(generator, tol=1e-12):
    """List of problems with a transition-intensity matrix (empty when valid)."""
    lam = np.asarray(generator, dtype=float)
    problems = []
    if lam.ndim != 2 or lam.shape[0] != lam.shape[1]:
        return ["generator is not square"]
    off = lam[~np.eye(lam.shape[0], dtype=bool)]
    if np.any(off <= 0):
        problems.append("off-diagonal intensities must be strictly positive")
    if np.any(np.diag(lam) >= 0):
        problems.append("diagonal intensities must be strictly negative")
    rs = np.abs(lam.sum(axis=1))
    if np.any(rs > tol * max(1.0, np.abs(lam).max())):
        problems.append(f"rows must sum to zero (max |row sum| = {rs.max():.3e})")
    return problems


def validate(model, delta=1e-8, psd_tol=1e-10, sym_tol=1e-12):
    """Check the standing assumptions and report per check.

    Never raises; the report records the offending matrix, piece start time,
    regime and eigenvalue for each failure.
    """
    checks = []
    problems = check_generator(model.generator)
    checks.append(Check("generator", not problems,
                        "; ".join(problems) or "valid intensity matrix"))
    checks.append(Check("H1/H2 integrability", True,
                        "satisfied by construction for piecewise-constant data"))

    table = model.coefficient_table()
    d = model.dims
    starts = table.edges[:-1]
    sym_bad, h3 = [], []

    def lam_min(M):
        return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])

    for i in range(d.D):
        G = table.G[i]
        for name, M, when in [("G", G, d.T)] + [
                (nm, getattr(table, nm)[p, i], starts[p])
                for p in range(table.n_pieces) for nm in ("Q", "R1", "R2")]:
            asym = np.abs(M - M.T).max()
            if asym > sym_tol * max(1.0, np.abs(M).max()):
                sym_bad.append(Check("symmetry", False, f"{name} asymmetric by {asym:.2e} "
                                     f"(regime {i + 1}, s={when:g})", name, when, i))
        ev = lam_min(G)
        if ev < -psd_tol:
            h3.append(Check("H3", False, f"G not positive semidefinite (regime {i + 1}, "
                            f"lambda_min={ev:.3e})", "G", d.T, i, ev))
        for p in range(table.n_pieces):
            R = table.R[p, i]
            ev = lam_min(R)
            if ev < delta:
                h3.append(Check("H3", False, f"R = diag(R1, R2) not uniformly positive "
                                f"(regime {i + 1}, s={starts[p]:g}, lambda_min={ev:.3e})",
                                "R", starts[p], i, ev))
                continue
            S = table.S[p, i]
            M = table.Q[p, i] - S.T @ np.linalg.solve(R, S)
            ev = lam_min(M)
            if ev < -psd_tol:
                h3.append(Check("H3", False, f"Q - S'R^-1 S not positive semidefinite "
                                f"(regime {i + 1}, s={starts[p]:g}, lambda_min={ev:.3e})",
                                "Q - S'R^-1 S", starts[p], i, ev))
    checks.extend(sym_bad or [Check("symmetry", True, "Q, R1, R2, G symmetric")])
    checks.extend(h3 or [Check("H3", True, "G >= 0, R >> 0, Q - S'R^-1 S >= 0")])
    return ValidationReport(tuple(checks))


# ------------------------------------------------------------------ scenarios

def scenario_from_dict(doc, allow_invalid=False, gamma=None):
    """Build and validate a model from a parsed scenario mapping.

    Regime indices in the document are one-based.
    """
    try:
        dims = Dims(**{k: doc["dims"][k] for k in ("n", "m", "n_v", "D", "T")})
        generator = np.asarray(doc["generator"], dtype=float)
        regimes = doc["regime"]
        g = doc["gamma"] if gamma is None else gamma
        init = doc.get("initial", {})
    except KeyError as exc:
        raise ScenarioError(f"scenario is missing key {exc}") from exc
    except TypeError as exc:
        raise ScenarioError(f"malformed scenario: {exc}") from exc
    if generator.shape != (dims.D, dims.D):
        raise ScenarioError(f"generator must be {dims.D}x{dims.D}, got {generator.shape}")
    if not isinstance(regimes, Sequence) or len(regimes) != dims.D:
        got = len(regimes) if isinstance(regimes, Sequence) else 0
        raise ScenarioError(f"expected {dims.D} regime blocks, got {got}")
    model = make_model(dims, generator, regimes, g,
                       init.get("xi", np.zeros(dims.n)),
                       int(init.get("regime", 1)) - 1, float(init.get("t", 0.0)))
    report = validate(model)
    if not report.passed and not allow_invalid:
        raise ValidationError(report)
    return model


def parse_scenario(text, allow_invalid=False, gamma=None):
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"cannot parse scenario: {exc}") from exc
    return scenario_from_dict(doc, allow_invalid=allow_invalid, gamma=gamma)


def load_scenario(path, allow_invalid=False, gamma=None):
    """Read a TOML scenario file into a validated :class:`GameModel`."""
    path = Path(path)
    if not path.exists() and (DATA_DIR / path.name).exists():
        path = DATA_DIR / path.name
    return parse_scenario(path.read_text(), allow_invalid=allow_invalid, gamma=gamma)


DATA_DIR = Path(__file__).parent / "data"
EXAMPLE_SCENARIO = DATA_DIR / "bull_bear.toml"


def load_example(gamma=1.0):
    """The bundled two-regime bull/bear market scenario."""
    return load_scenario(EXAMPLE_SCENARIO, gamma=gamma)
