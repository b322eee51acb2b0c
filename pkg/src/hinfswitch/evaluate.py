"""Monte-Carlo costs, the closed-form value, saddle and H-infinity checks,
and the solvability threshold in gamma."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .chain import make_rng, sample_paths
from .errors import NoBracket
from .gains import synthesize
from .riccati import model_grid, node_blocks, solvability_many, solve_all, step_pieces
from .sim import (DisturbancePolicy, LinearFeedbackControl, SaddleControl,
                  SaddleDisturbance, simulate_many)

SIGMA_RULE = 3.0


# ------------------------------------------------------------ cost estimates

@dataclass(frozen=True)
class CostEstimate:
    mean: float
    stderr: float
    n_paths: int
    gamma_used: float | None
    homogeneous: bool

    def __str__(self):
        return f"{self.mean:.6g} +/- {self.stderr:.2g} ({self.n_paths} paths)"


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return float(x.mean()), se


def _chains(model, grid, n_paths, seed):
    return sample_paths(model.generator, model.initial_regime, grid.t0, grid.T, n_paths,
                        make_rng(seed, 0))


def run_policies(model, pairs, n_paths, seed=0, grid=None, step=1e-3, group=6):
    """Simulate ``(control, disturbance)`` pairs on common random numbers.

    The chain paths are drawn from ``(seed, 0)`` and the Brownian stream from
    ``(seed, 1)``, so any two calls with the same seed and grid share noise
    exactly.  Pairs are simulated ``group`` at a time to bound memory.
    """
    grid = model_grid(model, step) if grid is None else grid
    chains = _chains(model, grid, n_paths, seed)
    pairs = list(pairs)
    out = []
    for j in range(0, len(pairs), group):
        out.extend(simulate_many(model, pairs[j:j + group], grid, chains, seed=seed))
    return out


def cost_mc(model, control, disturbance, gamma=None, n_paths=10_000, seed=0, step=1e-3,
            grid=None):
    """Monte-Carlo estimate of the cost; ``gamma=None`` gives the plain functional."""
    batch = run_policies(model, [(control, disturbance)], n_paths, seed, grid, step)[0]
    mean, se = _mean_se(batch.cost(gamma))
    return CostEstimate(mean, se, n_paths, gamma, model.is_homogeneous)


# -------------------------------------------------------------------- value

def occupation_probabilities(generator, i0, nodes):
    """Regime probabilities at the nodes from ``p' = generator^T p`` (RK4), ``p(t) = e_i0``."""
    lam_t = np.asarray(generator, dtype=float).T
    p = np.zeros((nodes.size, lam_t.shape[0]))
    p[0, i0] = 1.0
    for k, h in enumerate(np.diff(nodes)):
        y = p[k]
        k1 = lam_t @ y
        k2 = lam_t @ (y + 0.5 * h * k1)
        k3 = lam_t @ (y + 0.5 * h * k2)
        k4 = lam_t @ (y + h * k3)
        p[k + 1] = y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
    return p


def _value_integrand(sol, model, left):
    table, pieces = step_pieces(model, sol.grid)
    idx = np.concatenate([[pieces[0]], pieces]) if left else np.concatenate([pieces, [pieces[-1]]])
    c = table.take(idx)
    bd = node_blocks(sol, model, left=left)
    quad = lambda M, v: np.einsum("...i,...ij,...j->...", v, M, v)
    Rinv_Psi = np.linalg.solve(bd.Rhat, bd.Psi[..., None])[..., 0]
    return (quad(sol.P, c.sigma) + quad(sol.Pi, c.sigmabar)
            + 2 * np.einsum("...i,...i->...", sol.eta, c.b)
            - np.einsum("...i,...i->...", Rinv_Psi, bd.Psi))


def value_formula(sol, model):
    """Closed-form game value at the model's initial data.

    The initial state is deterministic, so the filtering error starts at
    zero.  The expectation of the running integrand over the regime path is
    taken with Kolmogorov occupation probabilities and trapezoidal
    quadrature, using left limits at the right end of every step.
    """
    nodes = sol.grid.nodes
    i0 = model.initial_regime
    xi = model.initial_state
    v0 = float(xi @ sol.P[0, i0] @ xi + 2 * sol.eta[0, i0] @ xi)
    if model.is_homogeneous:
        return v0
    p = occupation_probabilities(model.generator, i0, nodes)
    f_right = (p * _value_integrand(sol, model, left=False)).sum(axis=1)
    f_left = (p * _value_integrand(sol, model, left=True)).sum(axis=1)
    h = np.diff(nodes)
    return v0 + float(np.sum(0.5 * h * (f_right[:-1] + f_left[1:])))


# ------------------------------------------------------------- saddle check

@dataclass(frozen=True)
class Perturbation:
    """A deviation of one player from the saddle strategy.

    ``block`` is ``"ThetaHat1"`` or ``"offset"`` for the control and
    ``"ThetaHat2"``, ``"ThetaTilde2"`` or ``"offset"`` for the disturbance.
    Gain blocks are multiplied by ``1 + eps``; offsets are shifted by
    ``eps`` in every component.
    """

    player: str
    block: str
    eps: float

    def __post_init__(self):
        ok = {"control": ("ThetaHat1", "offset"),
              "disturbance": ("ThetaHat2", "ThetaTilde2", "offset")}
        if self.player not in ok or self.block not in ok[self.player]:
            raise ValueError(f"unknown perturbation {self.player}/{self.block}")

    def describe(self):
        op = f"x(1{self.eps:+g})" if self.block != "offset" else f"{self.eps:+g}"
        return f"{self.player}:{self.block}{op}"

    def apply(self, control, disturbance, dims):
        if self.player == "control":
            if self.block == "ThetaHat1":
                return control.scaled(1 + self.eps), disturbance
            return control.shifted(np.full(dims.m, self.eps)), disturbance
        if self.block == "ThetaHat2":
            return control, disturbance.scaled(hat=1 + self.eps)
        if self.block == "ThetaTilde2":
            return control, disturbance.scaled(tilde=1 + self.eps)
        return control, disturbance.shifted(np.full(dims.n_v, self.eps))


def default_perturbations(eps=(0.1, 0.25)):
    """Both signs on every gain block and a positive offset shift, for each ``eps``."""
    out = []
    for e in eps:
        out += [Perturbation("control", "ThetaHat1", e), Perturbation("control", "ThetaHat1", -e),
                Perturbation("control", "offset", e)]
        for block in ("ThetaHat2", "ThetaTilde2"):
            out += [Perturbation("disturbance", block, e),
                    Perturbation("disturbance", block, -e)]
        out.append(Perturbation("disturbance", "offset", e))
    return out


@dataclass(frozen=True)
class SaddleVerdict:
    perturbation: Perturbation
    delta: float
    stderr: float
    passed: bool

    @property
    def description(self):
        return self.perturbation.describe()


def saddle_check(model, gains, perturbations=None, n_paths=50_000, seed=0):
    """Saddle inequalities by Monte Carlo with common random numbers.

    ``delta`` is the mean per-path change of the soft-constrained cost.  A
    control deviation passes when ``delta >= -3 stderr``, a disturbance
    deviation when ``delta <= 3 stderr``.
    """
    perturbations = default_perturbations() if perturbations is None else list(perturbations)
    u, v = SaddleControl(gains), SaddleDisturbance(gains)
    pairs = [(u, v)] + [p.apply(u, v, model.dims) for p in perturbations]
    batches = run_policies(model, pairs, n_paths, seed, gains.grid)
    gamma = gains.gamma
    base = batches[0].cost(gamma)
    verdicts = []
    for p, b in zip(perturbations, batches[1:]):
        diff = b.cost(gamma) - base
        d, se = _mean_se(diff)
        ok = d >= -SIGMA_RULE * se if p.player == "control" else d <= SIGMA_RULE * se
        verdicts.append(SaddleVerdict(p, d, se, bool(ok)))
    return verdicts


# ---------------------------------------------------------------- H-infinity

@dataclass(frozen=True)
class Candidate:
    """One member of the disturbance family: a label and its policy."""

    family: str
    label: str
    policy: DisturbancePolicy


@dataclass(frozen=True)
class HinfResult:
    gamma: float
    ratio: float
    stderr: float
    argmax: str
    ratios: dict = field(default_factory=dict)
    stderrs: dict = field(default_factory=dict)
    n_paths: int = 0

    @property
    def margin(self):
        """``gamma^2 - ratio``; positive means the bound holds for the family."""
        return self.gamma ** 2 - self.ratio

    @property
    def passed(self):
        return self.ratio < self.gamma ** 2


def _excitations(t0, T, nv):
    """Deterministic offsets that start a zero-state, unforced system moving."""
    span = T - t0
    return {
        "const": lambda s: np.ones(nv),
        "sin": lambda s: np.full(nv, math.sin(2 * math.pi * (s - t0) / span)),
        "step": lambda s: np.full(nv, 1.0 if s - t0 < span / 3 else 0.0),
    }


def candidate_family(gains, model, seed=0, scales=(0.5, 1.0, 1.5, 2.0, 3.0), n_random=4,
                     frequencies=(0.5, 1.0, 2.0)):
    """Disturbance candidates for the H-infinity ratio.

    * scaled worst-case feedback ``c (ThetaHat2 xhat + ThetaTilde2 xtilde)``
      with a constant or sinusoidal excitation,
    * random constant per-regime feedback gains with an excitation,
    * open-loop sinusoids and bang-bang signals.

    With zero initial state and no forcing a pure feedback disturbance
    stays at zero, hence the excitation offsets.
    """
    d = model.dims
    m = gains.m
    nv = d.n_v
    exc = _excitations(gains.grid.t0, gains.grid.T, nv)
    hat = (gains.ThetaHat[:, :, m:], gains.ThetaHat_left[:, :, m:])
    tilde = (gains.ThetaTilde2, gains.ThetaTilde2_left)
    out = []
    for c in scales:
        for name in ("const", "sin"):
            pol = DisturbancePolicy(tuple(c * a for a in hat), tuple(c * a for a in tilde),
                                    exc[name])
            out.append(Candidate("worst-case", f"{c:g}*worst+{name}", pol))
    rng = make_rng(seed, 7)
    for j in range(n_random):
        Kh = rng.standard_normal((d.D, nv, d.n))
        Kt = rng.standard_normal((d.D, nv, d.n))
        name = ("const", "sin", "step")[j % 3]
        out.append(Candidate("random", f"random{j}+{name}",
                             DisturbancePolicy(Kh, Kt, exc[name])))
    T0, T1 = gains.grid.t0, gains.grid.T
    span = T1 - T0
    for f in frequencies:
        w = 2 * math.pi * f / span
        sin = (lambda w: lambda s: np.full(nv, math.sin(w * (s - T0))))(w)
        bang = (lambda w: lambda s: np.full(nv, 1.0 if math.sin(w * (s - T0)) >= 0 else -1.0))(w)
        out.append(Candidate("open-loop", f"sin(f={f:g})", DisturbancePolicy(offset=sin)))
        out.append(Candidate("open-loop", f"bang(f={f:g})", DisturbancePolicy(offset=bang)))
    return out


def _ratio(num, den):
    """Ratio of means with a delta-method standard error."""
    n = num.size
    a, b = num.mean(), den.mean()
    r = a / b
    cov = np.cov(np.vstack([num, den]), ddof=1)
    var = (cov[0, 0] - 2 * r * cov[0, 1] + r * r * cov[1, 1]) / (n * b * b)
    return float(r), float(math.sqrt(max(var, 0.0)))


def hinf_model(model):
    """The homogeneous variant with zero initial state."""
    return model.homogeneous(zero_initial_state=True)


def hinf_ratio(model, gains=None, candidates=None, n_paths=10_000, seed=0, step=1e-3):
    """Largest Monte-Carlo ratio ``J0 / E int |v|^2`` over a disturbance family,
    with the control fixed at the saddle feedback of the homogeneous variant.

    The family only gives a lower estimate of the supremum.  Candidates
    whose disturbance energy is zero are skipped.
    """
    hm = hinf_model(model)
    if gains is None:
        gains = synthesize(solve_all(hm, step=step), hm)
    m = gains.m
    control = LinearFeedbackControl((gains.ThetaHat[:, :, :m], gains.ThetaHat_left[:, :, :m]))
    if candidates is None:
        candidates = candidate_family(gains, hm, seed)
    batches = run_policies(hm, [(control, c.policy) for c in candidates], n_paths, seed,
                           gains.grid)
    ratios, ses = {}, {}
    for c, b in zip(candidates, batches):
        den = b.v_energy
        if not den.mean() > 0:
            continue
        ratios[c.label], ses[c.label] = _ratio(b.cost(None), den)
    if not ratios:
        raise ValueError("every candidate has zero disturbance energy")
    best = max(ratios, key=ratios.get)
    return HinfResult(gains.gamma, ratios[best], ses[best], best, ratios, ses, n_paths)


# ------------------------------------------------------------- gamma search

@dataclass(frozen=True)
class SweepRow:
    gamma: float
    solvable: bool
    min_margin: float


def gamma_sweep(model, gammas, step=1e-3, conditions="I_and_II"):
    """Solvability and binding margin at every ``gamma``."""
    gammas = np.asarray(gammas, dtype=float)
    ok, margin = solvability_many(model, gammas, model_grid(model, step), conditions)
    return [SweepRow(float(g), bool(o), float(mg)) for g, o, mg in zip(gammas, ok, margin)]


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gamma", "solvable", "min_margin"])
        for r in rows:
            w.writerow([repr(r.gamma), int(r.solvable), repr(r.min_margin)])


def gamma_star(model, lo=0.01, hi=3.0, tol=1e-3, step=1e-3, conditions="I_and_II",
               max_widen=8, sections=8):
    """Bracket ``(lo, hi)`` of the Riccati solvability threshold in gamma.

    Solvability is an upper proxy for the optimal attenuation level, not a
    proof of it.  The end points are widened geometrically when ``lo`` is
    already solvable or ``hi`` is not.  The bracket is then narrowed by
    multisection, testing ``sections - 1`` interior levels per batched solve.
    """
    if not 0 < lo < hi:
        raise ValueError("need 0 < lo < hi")
    if sections < 2:
        raise ValueError("need at least two sections")
    grid = model_grid(model, step)
    ok = lambda g: bool(solvability_many(model, [g], grid, conditions)[0][0])
    for _ in range(max_widen):
        if ok(hi):
            break
        lo, hi = hi, 2 * hi
    else:
        if not ok(hi):
            raise NoBracket(f"not solvable at gamma={hi:g} after widening")
    for _ in range(max_widen):
        if not ok(lo):
            break
        hi, lo = lo, lo / 2
    else:
        if ok(lo):
            raise NoBracket(f"solvable at every tested gamma down to {lo:g}")
    while hi - lo > tol:
        pts = np.linspace(lo, hi, sections + 1)[1:-1]
        flags = solvability_many(model, pts, grid, conditions)[0]
        # lo stays unsolvable and hi solvable, even if the predicate is not monotone
        fails = np.flatnonzero(~flags)
        j = fails[-1] + 1 if fails.size else 0
        lo = float(pts[j - 1]) if j > 0 else lo
        hi = float(pts[j]) if j < pts.size else hi
    return lo, hi


# ------------------------------------------------------------------- report

@dataclass
class EvalReport:
    """Collected evaluation results; unset parts are None."""

    gamma: float
    value_formula: float | None = None
    mc_under_saddle: CostEstimate | None = None
    saddle_checks: list | None = None
    hinf: HinfResult | None = None
    gamma_star_bracket: tuple | None = None
    extra: dict = field(default_factory=dict)

    def to_pairs(self):
        """Flat ``(key, value)`` pairs in a fixed order."""
        kv = [("gamma", self.gamma)]
        if self.value_formula is not None:
            kv.append(("value_formula", self.value_formula))
        if self.mc_under_saddle is not None:
            e = self.mc_under_saddle
            kv += [("mc.mean", e.mean), ("mc.stderr", e.stderr), ("mc.n_paths", e.n_paths),
                   ("mc.gamma_used", e.gamma_used), ("mc.homogeneous", e.homogeneous)]
            if self.value_formula is not None:
                diff = e.mean - self.value_formula
                kv += [("mc.minus_value", diff),
                       ("mc.within_3se", abs(diff) <= SIGMA_RULE * e.stderr)]
        for j, v in enumerate(self.saddle_checks or []):
            pre = f"saddle.{j}"
            kv += [(pre + ".perturbation", v.description), (pre + ".delta", v.delta),
                   (pre + ".stderr", v.stderr), (pre + ".pass", v.passed)]
        if self.saddle_checks is not None:
            kv.append(("saddle.all_pass", all(v.passed for v in self.saddle_checks)))
        if self.hinf is not None:
            h = self.hinf
            kv += [("hinf.ratio", h.ratio), ("hinf.stderr", h.stderr), ("hinf.argmax", h.argmax),
                   ("hinf.gamma_sq", h.gamma ** 2), ("hinf.margin", h.margin),
                   ("hinf.n_candidates", len(h.ratios)), ("hinf.n_paths", h.n_paths),
                   ("hinf.pass", h.passed)]
        if self.gamma_star_bracket is not None:
            kv += [("solvability_threshold.lo", self.gamma_star_bracket[0]),
                   ("solvability_threshold.hi", self.gamma_star_bracket[1])]
        kv += sorted(self.extra.items())
        return kv

    def to_text(self):
        """``key = value`` lines; floats use ``repr`` so they round-trip."""
        fmt = lambda v: repr(v) if isinstance(v, float) else str(v)
        return "".join(f"{k} = {fmt(v)}\n" for k, v in self.to_pairs())

    def table(self):
        """Human-readable summary."""
        lines = [f"gamma = {self.gamma:g}"]
        if self.value_formula is not None:
            lines.append(f"  value (closed form)      {self.value_formula:.6f}")
        if self.mc_under_saddle is not None:
            e = self.mc_under_saddle
            lines.append(f"  cost under saddle (MC)   {e.mean:.6f} +/- {e.stderr:.6f}"
                         f"  [{e.n_paths} paths]")
        if self.saddle_checks:
            lines.append("  saddle perturbations:")
            w = max(len(v.description) for v in self.saddle_checks)
            for v in self.saddle_checks:
                lines.append(f"    {v.description:<{w}}  dJ = {v.delta:+.3e}"
                             f" +/- {v.stderr:.1e}  {'pass' if v.passed else 'FAIL'}")
        if self.hinf is not None:
            h = self.hinf
            lines.append(f"  H-inf ratio (max over {len(h.ratios)} candidates) "
                         f"{h.ratio:.4f} +/- {h.stderr:.4f} at {h.argmax};"
                         f" gamma^2 = {h.gamma ** 2:g}, margin {h.margin:.4f}"
                         f" {'pass' if h.passed else 'FAIL'}")
        if self.gamma_star_bracket is not None:
            lo, hi = self.gamma_star_bracket
            lines.append(f"  solvability threshold in [{lo:.6f}, {hi:.6f}]")
        for k, v in sorted(self.extra.items()):
            lines.append(f"  {k}: {v}")
        return "\n".join(lines) + "\n"


def parse_report_text(text):
    """Read :meth:`EvalReport.to_text` output back into a dict of strings."""
    out = {}
    for line in text.splitlines():
        if line.strip():
            k, _, v = line.partition(" = ")
            out[k] = v
    return out
