"""
Minimizing-movement steps for the interface energy under the Wasserstein
metric, the De Giorgi interpolation between steps, and the flow loop.

One step minimizes ``W2^2(E, prev) / 2t + E(E)`` over sets of the mass of
``prev``. The set constraint is relaxed to densities in [0, 1] on a band
around ``prev``; an outer loop linearizes the transport term (entropic
potential) and the non-local term, and a primal-dual TV proximal solve
handles the perimeter. The relaxed iterate is thresholded back to a set and
accepted only if it beats ``prev`` as a competitor.
"""

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.optimize import brentq

from msflow.config.flow_config import FlowConfig
from msflow.pipeline import diagnostics
from msflow.pipeline.energy import (
    EnergyBreakdown,
    Kernel,
    convolve_kernel,
    gradient_variants,
    gradient_variants_adjoint,
    kernel_from_spec,
    nonlocal_energy,
    perimeter_tv,
    total_energy,
)
from msflow.pipeline.grid_measure import (
    DensityField,
    mass,
    normalize_mass,
    threshold_with_mass,
    touches_boundary,
)
from msflow.pipeline.transport import (
    PotentialCache,
    TransportPlan,
    displacement_velocity,
    extend_source_potential,
    sinkhorn_ot,
    solve_transport,
)
from msflow.utils.errors import InnerSolverError, InputError, MsflowError

logger = logging.getLogger("<MSFLOW>")

# annealing stages replayed when the target potential is warm
WARM_STAGES = 3
# squared norm bound of the stacked four-variant gradient, times cell_size**2
GRADIENT_NORM2 = 32.0
SOLVER_FAILURES = (MsflowError, FloatingPointError, np.linalg.LinAlgError)


@dataclass(frozen=True)
class StepRecord:
    """One row of the flow ledger. ``w2_step`` is W2, not its square."""

    n: int
    t: float
    w2_step: float
    energy: EnergyBreakdown
    mass: float
    slope_estimates: Tuple[Tuple[float, float], ...]
    el_residual: float
    cont_eq_residual: float
    solver_iters: int
    fallback: bool = False
    relaxed_objective: float = 0.0
    binary_objective: float = 0.0
    relaxation_gap: float = 0.0
    outer_iters: int = 0
    sinkhorn_iters: int = 0
    transport_method: str = "exact"


@dataclass
class FlowLedger:
    """Records of a run; ``states[n]`` is the set after step ``n``."""

    config: FlowConfig
    records: List[StepRecord] = field(default_factory=list)
    states: List[DensityField] = field(default_factory=list)
    fallback_steps: List[int] = field(default_factory=list)
    plans: Dict[int, TransportPlan] = field(default_factory=dict)
    error: Optional[str] = None

    def append(self, state: DensityField, record: StepRecord) -> None:
        self.states.append(state)
        self.records.append(record)
        if record.fallback:
            self.fallback_steps.append(record.n)

    @property
    def n_steps(self) -> int:
        return len(self.records) - 1

    def snapshots(self) -> Dict[int, DensityField]:
        """States at the snapshot cadence, each with its predecessor for the per-step checks."""
        every = self.config.snapshot_every
        keep = {n for n in range(len(self.states)) if n % every == 0 or n == self.n_steps}
        keep |= {n - 1 for n in keep if n >= 1}
        return {n: self.states[n] for n in sorted(keep)}

    def to_frame(self) -> pd.DataFrame:
        """Ledger table with the fixed column order of ``ledger.csv``."""
        slope_cols = self.config.slope_columns()
        rows = []
        for rec in self.records:
            row = {
                "n": rec.n,
                "t": rec.t,
                "mass": rec.mass,
                "perimeter": rec.energy.perimeter,
                "nonlocal": rec.energy.nonlocal_,
                "total_energy": rec.energy.total,
                "w2_step": rec.w2_step,
            }
            slopes = [s for _, s in rec.slope_estimates] or [0.0] * len(slope_cols)
            row.update(zip(slope_cols, slopes))
            row.update(
                el_residual=rec.el_residual,
                cont_residual=rec.cont_eq_residual,
                solver_iters=rec.solver_iters,
            )
            rows.append(row)
        columns = ["n", "t", "mass", "perimeter", "nonlocal", "total_energy", "w2_step"]
        columns += slope_cols + ["el_residual", "cont_residual", "solver_iters"]
        return pd.DataFrame(rows, columns=columns)

    def solver_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "n": rec.n,
                    "fallback": int(rec.fallback),
                    "relaxed_objective": rec.relaxed_objective,
                    "binary_objective": rec.binary_objective,
                    "relaxation_gap": rec.relaxation_gap,
                    "outer_iters": rec.outer_iters,
                    "inner_iters": rec.solver_iters,
                    "sinkhorn_iters": rec.sinkhorn_iters,
                    "transport_method": rec.transport_method,
                }
                for rec in self.records[1:]
            ],
            columns=[
                "n", "fallback", "relaxed_objective", "binary_objective", "relaxation_gap",
                "outer_iters", "inner_iters", "sinkhorn_iters", "transport_method",
            ],
        )


@dataclass(frozen=True, eq=False)
class StepSolution:
    state: DensityField
    plan: TransportPlan
    w2_squared: float
    energy: EnergyBreakdown
    fallback: bool
    relaxed_objective: float
    binary_objective: float
    outer_iters: int
    inner_iters: int
    sinkhorn_iters: int


def project_box_mass(
    v: np.ndarray, upper: np.ndarray, target_mass: float, cell_area: float
) -> np.ndarray:
    """
    Euclidean projection onto ``{0 <= rho <= upper, sum(rho) * cell_area = target_mass}``:
    ``clip(v - lam, 0, upper)`` with the shift ``lam`` found by Brent's method.
    """
    capacity = upper.sum() * cell_area
    if target_mass > capacity * (1 + 1e-12):
        raise InnerSolverError(
            f"Band capacity {capacity!r} is below the target mass {target_mass!r}"
        )

    def excess(lam: float) -> float:
        return np.clip(v - lam, 0.0, upper).sum() * cell_area - target_mass

    lo = float(v.min()) - 1.0
    hi = float(v.max())
    if excess(lo) <= 0:
        return upper.astype(np.float64)
    lam = brentq(excess, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)
    return np.clip(v - lam, 0.0, upper)


def tv_prox(
    w: np.ndarray,
    center: np.ndarray,
    upper: np.ndarray,
    target_mass: float,
    prox_step: float,
    cell_size: float,
    max_iters: int,
    tol: float,
    rho0: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, int]:
    """
    Chambolle-Pock iterations for
    ``min <w, rho> + |rho - center|^2 / (2 prox_step) + 1/4 sum_v |D_v rho|_{2,1}``
    over the box- and mass-constrained set, with ``D_v`` the four one-sided
    gradients of ``perimeter_tv``.

    Returns:
        Tuple[np.ndarray, int]: The primal iterate and the iterations used.

    Raises:
        InnerSolverError: If an iterate becomes non-finite.
    """
    step = 0.99 * cell_size / np.sqrt(GRADIENT_NORM2)
    cell_area = cell_size * cell_size
    rho = np.array(center if rho0 is None else rho0, dtype=np.float64)
    rho_bar = rho.copy()
    duals = [np.zeros((2,) + rho.shape) for _ in range(4)]
    denom = 1.0 / prox_step + 1.0 / step

    it = 0
    for it in range(1, max_iters + 1):
        for q, grad in zip(duals, gradient_variants(rho_bar, cell_size)):
            q += step * grad
            norm = np.sqrt((q**2).sum(axis=0))
            q /= np.maximum(1.0, 4.0 * norm)
        v = rho - step * gradient_variants_adjoint(duals, cell_size)
        rho_new = project_box_mass(
            (center / prox_step + v / step - w) / denom, upper, target_mass, cell_area
        )
        if not np.all(np.isfinite(rho_new)):
            raise InnerSolverError(f"TV proximal iterate became non-finite at iteration {it}")
        change = float(np.abs(rho_new - rho).max())
        rho_bar = 2.0 * rho_new - rho
        rho = rho_new
        if change <= tol:
            break
    return rho, it


def _band(prev: DensityField, band_cells: int) -> np.ndarray:
    support = prev.support()
    if band_cells <= 0:
        return support
    return ndimage.binary_dilation(
        support, structure=np.ones((3, 3), dtype=bool), iterations=band_cells
    )


def _relaxed_energy(rho: DensityField, kernel: Kernel) -> float:
    return perimeter_tv(rho) + nonlocal_energy(rho, kernel)


def _relaxed_solve(
    prev: DensityField, t: float, cfg: FlowConfig, kernel: Kernel
) -> Tuple[List[np.ndarray], float, int, int, int]:
    """Outer linearization loop; returns candidate densities, best objective and counters."""
    grid = prev.grid
    settings = cfg.relaxed_transport_settings()
    schedule = settings.eps_schedule(grid.cell_size, 2)
    band = _band(prev, cfg.band_cells)
    band_cells = np.flatnonzero(band.ravel())
    upper = band.astype(np.float64)
    m = mass(prev)

    cache = PotentialCache()
    rho = prev.values.astype(np.float64)
    best_rho, best_plan, best_j = None, None, np.inf
    prox_step = cfg.prox_step
    outer = inner_total = sinkhorn_total = 0

    for outer in range(1, cfg.outer_iters + 1):
        warm = cache.warm_start(prev)
        plan, _ = sinkhorn_ot(
            DensityField(grid, rho),
            prev,
            2,
            eps_schedule=schedule[-WARM_STAGES:] if warm is not None else schedule,
            settings=settings,
            init_g=warm,
            debias=False,
            strict=False,
        )
        cache.update(plan)
        sinkhorn_total += plan.info.iterations if plan.info else 0
        objective = plan.cost_value / (2.0 * t) + _relaxed_energy(DensityField(grid, rho), kernel)
        if objective < best_j:
            best_rho, best_plan, best_j = rho, plan, objective
        else:
            prox_step *= 0.5
            rho, plan = best_rho, best_plan
            logger.debug(f"outer {outer}: objective rose, prox_step -> {prox_step:.3e}")

        w = np.zeros(grid.size)
        w[band_cells] = extend_source_potential(plan, band_cells) / (2.0 * t)
        w = w.reshape(grid.shape) + 2.0 * convolve_kernel(DensityField(grid, rho), kernel)

        rho_new, used = tv_prox(
            w, rho, upper, m, prox_step, grid.cell_size, cfg.inner_iters, cfg.inner_tol
        )
        inner_total += used
        change = float(np.abs(rho_new - rho).sum() * grid.cell_area)
        rho = np.clip(rho_new, 0.0, 1.0)
        logger.debug(f"outer {outer}: J={objective!r}, change={change:.3e}, inner={used}")
        if change <= cfg.outer_tol * m:
            break

    candidates = [best_rho, rho] if best_rho is not None else [rho]
    return candidates, float(best_j), outer, inner_total, sinkhorn_total


def _binary_objective(
    cand: DensityField, prev: DensityField, t: float, cfg: FlowConfig, kernel: Kernel
) -> Tuple[float, TransportPlan, EnergyBreakdown]:
    plan = solve_transport(cand, prev, 2, cfg.transport_settings(), strict=False)
    energy = total_energy(cand, kernel)
    return energy.total + plan.cost_value / (2.0 * t), plan, energy


def _stay(prev: DensityField, cfg: FlowConfig, kernel: Kernel) -> Tuple[TransportPlan, EnergyBreakdown]:
    plan = solve_transport(prev, prev, 2, cfg.transport_settings(), strict=False)
    return plan, total_energy(prev, kernel)


def solve_step(
    prev: DensityField, t: float, cfg: FlowConfig, kernel: Optional[Kernel] = None
) -> StepSolution:
    """
    Approximate minimizer of ``W2^2(E, prev) / 2t + E(E)`` at equal mass.

    The thresholded candidates of the relaxed solve are compared with ``prev``
    itself: a candidate is accepted only when its objective does not exceed
    ``E(prev) * (1 + accept_slack)``. Otherwise, or if a solver fails, the
    step returns ``prev`` and is marked as a fallback.

    Raises:
        InputError: If ``prev`` is not binary or ``t`` is not positive.
    """
    if not t > 0:
        raise InputError(f"Step time must be positive, got {t}")
    if not prev.is_binary:
        raise InputError("A minimizing-movement step needs a binary previous state")
    kernel = kernel if kernel is not None else kernel_from_spec(cfg.kernel, prev.grid)
    m = mass(prev)
    stay_plan, prev_energy = _stay(prev, cfg, kernel)
    threshold = prev_energy.total * (1.0 + cfg.accept_slack)

    relaxed_j = prev_energy.total
    outer = inner = sinkhorn = 0
    best = None
    try:
        candidates, relaxed_j, outer, inner, sinkhorn = _relaxed_solve(prev, t, cfg, kernel)
        seen = []
        for rho in candidates:
            cand = threshold_with_mass(DensityField(prev.grid, rho), m, cfg.mass_tol)
            if any(np.array_equal(cand.values, s.values) for s in seen):
                continue
            seen.append(cand)
            objective, plan, energy = _binary_objective(cand, prev, t, cfg, kernel)
            if best is None or objective < best[0]:
                best = (objective, cand, plan, energy)
    except SOLVER_FAILURES as e:
        logger.warning(f"Step solver failed ({e}); keeping the previous state")
        best = None

    if best is not None and best[0] <= threshold:
        objective, state, plan, energy = best
        fallback = False
    else:
        if best is not None:
            logger.warning(
                f"Thresholded candidate violates the competitor bound "
                f"({best[0]!r} > {threshold!r}); keeping the previous state"
            )
        objective, state, plan, energy = prev_energy.total, prev, stay_plan, prev_energy
        fallback = True

    return StepSolution(
        state=state,
        plan=plan,
        w2_squared=max(plan.cost_value, 0.0),
        energy=energy,
        fallback=fallback,
        relaxed_objective=float(relaxed_j),
        binary_objective=float(objective),
        outer_iters=outer,
        inner_iters=inner,
        sinkhorn_iters=sinkhorn,
    )


def jko_step(
    prev: DensityField,
    cfg: FlowConfig,
    kernel: Optional[Kernel] = None,
    n: int = 1,
) -> Tuple[DensityField, StepRecord]:
    """
    One minimizing-movement step of size ``cfg.h``.

    The returned record holds the step's W2, energies, the Euler-Lagrange and
    continuity residuals of the step, and the slope sample at ``t = h`` only;
    ``run_flow`` adds the interpolation samples.

    Args:
        prev (DensityField): Binary state ``E_{n-1}``.
        cfg (FlowConfig): Run configuration.
        kernel (Kernel): Interaction kernel; built from ``cfg.kernel`` if omitted.
        n (int): Step index, also seeding the test fields.

    Returns:
        Tuple[DensityField, StepRecord]: ``E_n`` and its record.
    """
    kernel = kernel if kernel is not None else kernel_from_spec(cfg.kernel, prev.grid)
    sol = solve_step(prev, cfg.h, cfg, kernel)
    record = _record_for(n, prev, sol, cfg, kernel)
    logger.info(
        f"step {n}: E={sol.energy.total:.6g}, W2={record.w2_step:.3e}, "
        f"fallback={sol.fallback}, outer={sol.outer_iters}"
    )
    return sol.state, record


def _record_for(
    n: int, prev: DensityField, sol: StepSolution, cfg: FlowConfig, kernel: Kernel
) -> StepRecord:
    grid = prev.grid
    w2 = float(np.sqrt(sol.w2_squared))
    velocity = displacement_velocity(sol.plan, cfg.h)
    seed = cfg.seed + n
    xi_specs = diagnostics.make_test_fields(cfg.el_test_fields, grid, seed=seed)
    zeta_specs = diagnostics.make_zeta_fields(cfg.cont_test_fields, grid, seed=seed)
    el = diagnostics.euler_lagrange_residual(
        sol.state, velocity, kernel, xi_specs, mollifier_cells=cfg.mollifier_cells
    )
    cont = diagnostics.continuity_equation_residual(
        prev, sol.state, velocity, cfg.h, zeta_specs, w2_squared=sol.w2_squared
    )
    return StepRecord(
        n=n,
        t=n * cfg.h,
        w2_step=w2,
        energy=sol.energy,
        mass=mass(sol.state),
        slope_estimates=((cfg.h, w2 / cfg.h),),
        el_residual=el.max_value(),
        cont_eq_residual=cont.max_ratio(),
        solver_iters=sol.inner_iters,
        fallback=sol.fallback,
        relaxed_objective=sol.relaxed_objective,
        binary_objective=sol.binary_objective,
        relaxation_gap=sol.binary_objective - sol.relaxed_objective,
        outer_iters=sol.outer_iters,
        sinkhorn_iters=sol.sinkhorn_iters,
        transport_method=sol.plan.method,
    )


def de_giorgi_interpolate(
    prev: DensityField, t: float, cfg: FlowConfig, kernel: Optional[Kernel] = None
) -> DensityField:
    """
    Minimizer of ``W2^2(E, prev) / 2t + E(E)`` for ``0 < t <= h``; the same
    deterministic solve as ``jko_step``, so ``t = h`` reproduces its output.

    Raises:
        InputError: If ``t`` lies outside ``(0, h]``.
    """
    return _interpolation_solve(prev, t, cfg, kernel).state


def _interpolation_solve(
    prev: DensityField, t: float, cfg: FlowConfig, kernel: Optional[Kernel]
) -> StepSolution:
    if not 0 < t <= cfg.h * (1 + 1e-12):
        raise InputError(f"Interpolation time must lie in (0, h], got {t}")
    return solve_step(prev, min(t, cfg.h), cfg, kernel)


def slope_samples(
    prev: DensityField,
    sol: StepSolution,
    cfg: FlowConfig,
    kernel: Kernel,
    times: Optional[Iterable[float]] = None,
) -> Tuple[Tuple[float, float], ...]:
    """
    ``(t, W2(E~(t), prev) / t)`` at the interpolation times. Each ``W2`` is the
    plan cost of the interpolation solve itself; the ``t = h`` entry reuses ``sol``.
    """
    times = list(times) if times is not None else cfg.sample_times()

    def one(t: float) -> Tuple[float, float]:
        interp = sol if t == cfg.h else _interpolation_solve(prev, t, cfg, kernel)
        return t, float(np.sqrt(interp.w2_squared) / t)

    if cfg.workers > 1 and len(times) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            return tuple(pool.map(one, times))
    return tuple(one(t) for t in times)


def _initial_state(init: DensityField, cfg: FlowConfig) -> DensityField:
    if cfg.normalize:
        return normalize_mass(init, 1.0)
    if init.is_binary:
        return init
    return threshold_with_mass(init, mass(init), cfg.mass_tol)


def run_flow(
    init: DensityField,
    cfg: FlowConfig,
    kernel: Optional[Kernel] = None,
    dump_steps: Iterable[int] = (),
) -> FlowLedger:
    """
    Run ``cfg.n_steps`` minimizing-movement steps from ``init``.

    The initial set is normalized to mass 1 (or thresholded at its own mass
    when ``cfg.normalize`` is off). A solver error stops the loop and the
    partial ledger is returned with ``error`` set.

    Args:
        init (DensityField): Initial set or relaxed density.
        cfg (FlowConfig): Run configuration.
        kernel (Kernel): Interaction kernel; built from ``cfg.kernel`` if omitted.
        dump_steps (Iterable[int]): Steps whose transport plans are kept.

    Returns:
        FlowLedger: Records and states ``0..n``.
    """
    if init.grid != cfg.grid():
        raise InputError(f"Initial set grid {init.grid} differs from config grid {cfg.grid()}")
    kernel = kernel if kernel is not None else kernel_from_spec(cfg.kernel, init.grid)
    dump_steps = set(dump_steps)
    state = _initial_state(init, cfg)
    energy = total_energy(state, kernel)
    if not np.isfinite(energy.total):
        raise InputError("Initial set has non-finite energy")
    if touches_boundary(state):
        logger.warning("Initial set touches the grid boundary")

    ledger = FlowLedger(cfg)
    zeros = tuple((t, 0.0) for t in cfg.sample_times())
    ledger.append(state, StepRecord(0, 0.0, 0.0, energy, mass(state), zeros, 0.0, 0.0, 0))
    logger.info(f"initial state: E={energy.total:.6g}, mass={mass(state)!r}")

    for n in range(1, cfg.n_steps + 1):
        prev = state
        try:
            sol = solve_step(prev, cfg.h, cfg, kernel)
            record = _record_for(n, prev, sol, cfg, kernel)
            slopes = slope_samples(prev, sol, cfg, kernel)
            record = dataclasses.replace(record, slope_estimates=slopes)
        except MsflowError as e:
            logger.error(f"Flow stopped at step {n}: {e}")
            ledger.error = f"step {n}: {e}"
            break
        state = sol.state
        if n in dump_steps:
            ledger.plans[n] = sol.plan
        if touches_boundary(state):
            logger.warning(f"State {n} touches the grid boundary; enlarge the domain")
        ledger.append(state, record)
        logger.info(
            f"step {n}/{cfg.n_steps}: E={record.energy.total:.6g}, W2={record.w2_step:.3e}, "
            f"fallback={record.fallback}"
        )
    return ledger
