"""Newton correction and predictor-corrector continuation in alpha'.

Two Newton variants share the damping logic:

``"jfnk"`` (default)
    Jacobian-free Newton-Krylov: centered finite-difference Jacobian-vector
    products, GMRES on real coordinates, right-preconditioned by the frozen
    block inverse of the base-point linearization.
``"chord"``
    The frozen block inverse used directly as the step (a chord method).

The manufactured mode forces the system with ``rho(alpha') = F(alpha', z*(alpha'))``
so the exact solution ``z*(alpha')`` of ``F(alpha', z) = rho(alpha')`` is known.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .hermitian_geometry import PositivityError, min_hatted_eigenvalue
from .linearized_ops import Background, BlockVector, apply_block_inverse
from .spectral_forms import i_del_dbar, random_field, random_form
from .strominger_system import SystemState, ellipticity_monitor, eval_F

log = logging.getLogger(__name__)


class NewtonError(RuntimeError):
    """Newton failed: iteration cap, stagnation of the line search or lost positivity."""

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = history or []


@dataclass
class ContinuationConfig:
    alpha_start: float = 0.0
    alpha_target: float = 1e-2
    step: float = 2.5e-3
    shrink: float = 0.5
    grow: float = 1.5
    min_step: float = 1e-6
    max_step: float = 1.0
    newton_tol: float = 1e-9
    max_newton_iters: int = 25
    newton_mode: str = "jfnk"
    predictor: str = "secant"
    krylov_tol: float = 1e-9
    krylov_max_rtol: float = 1e-2
    krylov_restart: int = 40
    fd_step: float = 1e-4
    positivity_floor: float = 1e-12
    ellipticity_eps: float = 0.1

    def __post_init__(self):
        if not 0 <= self.alpha_start < self.alpha_target:
            raise ValueError("need 0 <= alpha_start < alpha_target")
        if min(self.step, self.newton_tol, self.min_step, self.krylov_tol, self.fd_step) <= 0:
            raise ValueError("step sizes and tolerances must be positive")
        if self.newton_mode not in ("jfnk", "chord"):
            raise ValueError(f"unknown newton_mode {self.newton_mode!r}")
        if self.predictor not in ("secant", "constant"):
            raise ValueError(f"unknown predictor {self.predictor!r}")


@dataclass
class NewtonResult:
    z: BlockVector
    iterations: int
    history: list
    krylov_iterations: list = field(default_factory=list)
    steps: list = field(default_factory=list)


# -- manufactured problems ------------------------------------------------------------------

def profile_value(profile: str, t: float) -> float:
    if profile == "smooth":
        return float(np.sin(0.5 * np.pi * t))
    if profile == "linear":
        return float(t)
    if profile == "constant":
        return 1.0
    raise ValueError(f"unknown profile {profile!r}")


@dataclass(frozen=True, eq=False)
class ManufacturedProblem:
    """Targets ``z*(alpha') = s(alpha'/alpha_target) z*`` and forcing ``rho = F(alpha', z*(alpha'))``."""

    background: Background
    target: BlockVector
    amplitude: float
    alpha_target: float
    profile: str = "smooth"

    def target_at(self, alpha: float) -> BlockVector:
        t = min(max(alpha / self.alpha_target, 0.0), 1.0) if self.alpha_target > 0 else 1.0
        return self.target * profile_value(self.profile, t)

    def forcing(self, alpha: float) -> BlockVector:
        return eval_F(SystemState(self.background, alpha, self.target_at(alpha))).w


def make_manufactured(bg: Background, amplitude: float, rng: np.random.Generator, alpha_target: float = 1e-2,
                      profile: str = "smooth", kmax: int | None = None) -> ManufacturedProblem:
    """Smooth band-limited targets with ``max |u*| = max |Theta*| = amplitude``."""
    lat = bg.lattice
    ends = []
    for i, b in enumerate(bg.bundles):
        u = bg.project_end(random_field(lat, rng, (b.rank, b.rank), kmax=kmax), i)
        m = float(np.max(np.abs(u)))
        ends.append(u * (amplitude / m) if m > 0 else u)
    beta = random_form(lat, rng, 1, 1, real=True, kmax=kmax)
    theta = bg.project_theta(i_del_dbar(beta))
    m = theta.max_abs()
    theta = theta * (amplitude / m) if m > 0 else theta
    target = BlockVector(tuple(ends), theta)
    psi = bg.psi_hat + theta
    if amplitude > 0 and min_hatted_eigenvalue(psi) <= 0:
        raise PositivityError(f"amplitude {amplitude} leaves the positive cone")
    return ManufacturedProblem(bg, target, amplitude, alpha_target, profile)


# -- Newton ------------------------------------------------------------------------------------

def _projected_residual(bg: Background, alpha: float, z: BlockVector, rho: BlockVector | None,
                        floor: float) -> BlockVector:
    state = SystemState(bg, alpha, z)
    if floor > 1e-12 and state.ansatz.min_eigenvalue <= floor:
        raise PositivityError(f"positivity margin {state.ansatz.min_eigenvalue:.3e} below floor {floor:.3e}",
                              state.ansatz.min_eigenvalue)
    w = eval_F(state).w
    if rho is not None:
        w = w - rho
    return bg.project_range(w)


def newton_correct(bg: Background, alpha: float, z0: BlockVector, rho: BlockVector | None = None,
                   config: ContinuationConfig | None = None) -> NewtonResult:
    """Damped Newton for ``P_W (F(alpha, z) - rho) = 0`` on the gauge-fixed space.

    Armijo backtracking over ``lambda in {1, 1/2, 1/4, 1/8}``; a trial that
    leaves the positive cone counts as a rejection.
    """
    cfg = config or ContinuationConfig()
    floor = cfg.positivity_floor
    z = bg.project_domain(z0)
    G = lambda x: _projected_residual(bg, alpha, x, rho, floor)
    r = G(z)
    norm = bg.residual_norm(r)
    history = [norm]
    kry, steps = [], []
    for it in range(cfg.max_newton_iters + 1):
        if norm < cfg.newton_tol:
            return NewtonResult(z, it, history, kry, steps)
        if it == cfg.max_newton_iters:
            break
        rtol = min(cfg.krylov_max_rtol, max(cfg.krylov_tol, 0.1 * norm))
        dz, nk = _newton_direction(bg, G, z, r, cfg, rtol)
        kry.append(nk)
        accepted = False
        for lam in (1.0, 0.5, 0.25, 0.125):
            zt = bg.project_domain(z + dz * lam)
            try:
                rt = G(zt)
            except PositivityError:
                continue
            nt = bg.residual_norm(rt)
            if nt <= (1.0 - 1e-4 * lam) * norm:
                z, r, norm = zt, rt, nt
                accepted = True
                steps.append(lam)
                break
        history.append(norm)
        if not accepted:
            raise NewtonError(f"line search failed at iteration {it + 1} (residual {norm:.3e})", history)
        log.debug("newton it=%d residual=%.3e", it + 1, norm)
    raise NewtonError(f"no convergence in {cfg.max_newton_iters} iterations (residual {norm:.3e})", history)


def _newton_direction(bg: Background, G, z: BlockVector, r: BlockVector, cfg: ContinuationConfig, rtol: float):
    """Newton step; the Krylov forcing term ``rtol`` shrinks with the residual."""
    M = lambda w: apply_block_inverse(bg, w, strict=False)
    if cfg.newton_mode == "chord":
        return -M(r), 0
    template = r
    n = template.to_vector().size

    def jvp(v: BlockVector) -> BlockVector:
        vmax = v.max_abs()
        if vmax == 0:
            return v * 0.0
        eps = cfg.fd_step * (1.0 + z.max_abs()) / vmax
        return (G(z + v * eps) - G(z - v * eps)) * (0.5 / eps)

    def matvec(y):
        w = template.from_vector(np.asarray(y).ravel())
        return jvp(bg.project_domain(M(w))).to_vector()

    b = (-r).to_vector()
    count = [0]
    A = LinearOperator((n, n), matvec=matvec, dtype=float)
    y, info = gmres(A, b, rtol=rtol, atol=0.0, restart=cfg.krylov_restart, maxiter=10,
                    callback=lambda _: count.__setitem__(0, count[0] + 1), callback_type="pr_norm")
    if info < 0:
        raise NewtonError(f"GMRES breakdown (info={info})")
    return bg.project_domain(M(template.from_vector(y))), count[0]


def quadratic_ratios(history: list, upper: float = 1e-3, lower: float = 1e-11) -> list:
    """r_{k+1} / r_k^2 for consecutive residuals with r_k < upper and r_{k+1} > lower."""
    return [b / (a * a) for a, b in zip(history, history[1:]) if a < upper and b > lower]


def quadratic_check(history: list, bound: float, upper: float = 1e-3, floor: float = 1e-9) -> tuple:
    """Once ``r_k < upper``, require ``r_{k+1} <= bound r_k^2`` unless ``r_{k+1}`` is already below ``floor``.

    Returns ``(ok, pairs_checked, pairs_at_floor)``.
    """
    ok, checked, at_floor = True, 0, 0
    for a, b in zip(history, history[1:]):
        if a >= upper:
            continue
        checked += 1
        if b <= floor:
            at_floor += 1
        elif b > bound * a * a:
            ok = False
    return ok, checked, at_floor


# -- continuation -------------------------------------------------------------------------------

@dataclass
class StepRecord:
    alpha_prime: float
    step: float
    newton_iterations: int
    residual_l2: float
    hym_l2: float
    anomaly_l2: float
    ellipticity: float
    positivity_margin: float
    class_factor: float | None
    recovery_error: float | None
    krylov_iterations: int
    history: list

    def row(self) -> dict:
        d = asdict(self)
        d["history"] = ";".join(f"{h:.6e}" for h in self.history)
        return d


@dataclass
class PathReport:
    records: list
    final: BlockVector
    alpha_reached: float
    completed: bool
    message: str
    warnings: list = field(default_factory=list)


def _combined_error(bg: Background, a: BlockVector, b: BlockVector) -> float:
    return float(sum(bg.domain_norms(a - b)))


def continue_in_alpha(bg: Background, config: ContinuationConfig, problem: ManufacturedProblem | None = None,
                      z_start: BlockVector | None = None) -> PathReport:
    """March alpha' from ``alpha_start`` to ``alpha_target``, halving the step on failure."""
    cfg = config
    alpha = cfg.alpha_start
    rho_at = (lambda a: problem.forcing(a)) if problem is not None else (lambda a: None)
    z = z_start if z_start is not None else (problem.target_at(alpha) if problem is not None else bg.zero())
    res = newton_correct(bg, alpha, z, rho_at(alpha), cfg)
    z = res.z
    records = [_record(bg, alpha, 0.0, z, res, problem)]
    prev = None
    step = cfg.step
    warnings = []
    while alpha < cfg.alpha_target * (1 - 1e-14):
        a_new = min(alpha + step, cfg.alpha_target)
        if cfg.predictor == "secant" and prev is not None:
            a_prev, z_prev = prev
            pred = z + (z - z_prev) * ((a_new - alpha) / (alpha - a_prev))
        else:
            pred = z
        try:
            res = newton_correct(bg, a_new, pred, rho_at(a_new), cfg)
        except (NewtonError, PositivityError) as exc:
            step *= cfg.shrink
            log.info("alpha'=%.4e failed (%s); step -> %.3e", a_new, exc, step)
            if step < cfg.min_step:
                return PathReport(records, z, alpha, False, f"step underflow after failure at alpha'={a_new:.6e}: {exc}",
                                  warnings)
            continue
        prev = (alpha, z)
        alpha, z = a_new, res.z
        rec = _record(bg, alpha, a_new - prev[0], z, res, problem)
        records.append(rec)
        if rec.ellipticity > cfg.ellipticity_eps:
            warnings.append(f"ellipticity monitor {rec.ellipticity:.3e} above {cfg.ellipticity_eps} at alpha'={alpha:.4e}")
            log.warning(warnings[-1])
        step = min(step * cfg.grow, cfg.max_step)
    return PathReport(records, z, alpha, True, "reached alpha_target", warnings)


def _record(bg: Background, alpha: float, step: float, z: BlockVector, res: NewtonResult,
            problem: ManufacturedProblem | None) -> StepRecord:
    state = SystemState(bg, alpha, z)
    w = eval_F(state).w
    if problem is not None:
        w = w - problem.forcing(alpha)
    norms = bg.residual_norms(w)
    err = _combined_error(bg, z, problem.target_at(alpha)) if problem is not None else None
    return StepRecord(
        alpha_prime=alpha,
        step=step,
        newton_iterations=res.iterations,
        residual_l2=float(np.sqrt(sum(n * n for n in norms))),
        hym_l2=float(np.sqrt(sum(n * n for n in norms[:-1]))),
        anomaly_l2=float(norms[-1]),
        ellipticity=ellipticity_monitor(state),
        positivity_margin=state.ansatz.min_eigenvalue,
        class_factor=float(alpha ** -0.5 * bg.dil) if alpha > 0 else None,
        recovery_error=err,
        krylov_iterations=int(sum(res.krylov_iterations)),
        history=list(res.history),
    )
