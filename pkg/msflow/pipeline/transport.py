"""
Optimal transport between equal-mass densities on a grid.

Two solvers are provided. ``exact_ot`` returns a certified optimal plan, by
assignment for binary states and by the HiGHS dual simplex otherwise.
``sinkhorn_ot`` runs log-domain entropic iterations with an annealed
regularization and rounds the final coupling onto the exact marginals.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from msflow import base_config
from msflow.pipeline.grid_measure import (
    DensityField,
    Grid2D,
    check_equal_mass,
    check_same_grid,
    mass,
)
from msflow.utils.errors import (
    CellCapExceededError,
    SinkhornConvergenceError,
    TransportSolverError,
)

logger = logging.getLogger("<MSFLOW>")

# relative duality-gap bound for a certified exact plan
GAP_RTOL = 1e-9
# intermediate annealing stages stop at this multiple of the final tolerance
STAGE_TOL_FACTOR = 100.0


@dataclass(frozen=True)
class TransportSettings:
    """Solver parameters; ``eps_*`` are multiples of ``cell_size ** p``."""

    eps_start: float = float(base_config["transport"]["eps_start"])
    eps_end: float = float(base_config["transport"]["eps_end"])
    eps_decay: float = float(base_config["transport"]["eps_decay"])
    max_iters: int = int(base_config["transport"]["sinkhorn_max_iters"])
    marginal_tol: float = float(base_config["transport"]["marginal_tol"])
    duality_tol: float = float(base_config["transport"]["duality_tol"])
    mass_tol: float = float(base_config["transport"]["mass_tol"])
    cell_cap: int = int(base_config["transport"]["exact_ot_cell_cap"])
    assignment_cell_cap: int = int(base_config["transport"]["exact_assignment_cell_cap"])
    check_every: int = int(base_config["transport"]["check_every"])

    def eps_schedule(self, cell_size: float, p: int = 2) -> List[float]:
        """Geometric annealing from ``eps_start`` down to ``eps_end`` (absolute units)."""
        unit = cell_size**p
        start, end = self.eps_start * unit, self.eps_end * unit
        schedule = []
        eps = start
        while eps > end:
            schedule.append(eps)
            eps *= self.eps_decay
        schedule.append(end)
        return schedule


@dataclass(frozen=True)
class SinkhornInfo:
    iterations: int
    violation: float
    eps_final: float
    converged: bool
    dual_value: float
    f: np.ndarray
    g: np.ndarray
    debiased_cost: Optional[float] = None


@dataclass(frozen=True, eq=False)
class TransportPlan:
    """
    Coupling between the active cells of ``source`` and ``target``.

    ``coupling[r, c]`` is the volume sent from cell ``src_cells[r]`` to cell
    ``dst_cells[c]`` (C-order flat indices). ``dual_source`` / ``dual_target``
    hold the LP duals of an exact solve in cost units.
    """

    source: DensityField
    target: DensityField
    src_cells: np.ndarray
    dst_cells: np.ndarray
    coupling: sparse.csr_matrix
    cost_value: float
    p: int
    method: str
    dual_source: Optional[np.ndarray] = None
    dual_target: Optional[np.ndarray] = None
    duality_gap: float = float("nan")
    certified: bool = False
    info: Optional[SinkhornInfo] = None

    @property
    def grid(self) -> Grid2D:
        return self.source.grid

    def marginal_violation(self) -> float:
        """L1 error of both marginals against the cell masses."""
        area = self.grid.cell_area
        rows = np.asarray(self.coupling.sum(axis=1)).ravel()
        cols = np.asarray(self.coupling.sum(axis=0)).ravel()
        src = self.source.values.ravel()[self.src_cells] * area
        dst = self.target.values.ravel()[self.dst_cells] * area
        return float(np.abs(rows - src).sum() + np.abs(cols - dst).sum())

    def to_frame(self) -> pd.DataFrame:
        """Nonzero coupling entries as ``src_i,src_j,dst_i,dst_j,mass`` rows."""
        coo = self.coupling.tocoo()
        si, sj = np.unravel_index(self.src_cells[coo.row], self.grid.shape)
        di, dj = np.unravel_index(self.dst_cells[coo.col], self.grid.shape)
        frame = pd.DataFrame(
            {"src_i": si, "src_j": sj, "dst_i": di, "dst_j": dj, "mass": coo.data}
        )
        return frame[frame["mass"] > 0].reset_index(drop=True)


@dataclass(frozen=True, eq=False)
class Potentials:
    """
    Kantorovich pair for the cost ``|x - y|^2 / (2h)`` (``|x - y| / h`` for p=1),
    indexed like the plan's active cells.
    """

    phi: np.ndarray
    psi: np.ndarray
    src_cells: np.ndarray
    dst_cells: np.ndarray
    h: float
    p: int = 2

    def cost_scale(self) -> float:
        return 2.0 * self.h if self.p == 2 else self.h

    def feasibility_violation(
        self, grid: Grid2D, max_pairs: int = 1_000_000, seed: int = 0
    ) -> float:
        """``max(phi(x) + psi(y) - c(x, y))`` over all pairs, or a seeded row sample."""
        rows = np.arange(self.src_cells.size)
        n_cols = max(self.dst_cells.size, 1)
        if rows.size * n_cols > max_pairs:
            rng = np.random.default_rng(seed)
            rows = np.sort(rng.choice(rows, size=max(max_pairs // n_cols, 1), replace=False))
        if rows.size == 0 or self.dst_cells.size == 0:
            return 0.0
        C = _cost_matrix(
            grid.flat_coordinates(self.src_cells[rows]),
            grid.flat_coordinates(self.dst_cells),
            self.p,
        )
        slack = self.phi[rows, None] + self.psi[None, :] - C / self.cost_scale()
        return float(max(slack.max(), 0.0))


@dataclass(frozen=True, eq=False)
class VelocityField:
    """Per-cell velocity ``vectors`` of shape ``(nx, ny, 2)``."""

    grid: Grid2D
    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64, copy=True)
        if vectors.shape != self.grid.shape + (2,):
            raise ValueError(
                f"Velocity of shape {vectors.shape} does not match grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(vectors)):
            raise ValueError("Velocity must be finite")
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)

    @classmethod
    def zeros(cls, grid: Grid2D) -> "VelocityField":
        return cls(grid, np.zeros(grid.shape + (2,)))

    def sup_norm(self) -> float:
        return float(np.sqrt((self.vectors**2).sum(axis=-1)).max())


def _active(f: DensityField) -> Tuple[np.ndarray, np.ndarray]:
    """Flat indices and volumes of the cells carrying mass."""
    flat = f.values.ravel()
    cells = np.flatnonzero(flat > 0.0)
    return cells, flat[cells] * f.grid.cell_area


def _cost_matrix(xs: np.ndarray, ys: np.ndarray, p: int) -> np.ndarray:
    if p == 2:
        return cdist(xs, ys, "sqeuclidean")
    return cdist(xs, ys, "euclidean")


def _check_exponent(p: int) -> None:
    if p not in (1, 2):
        raise ValueError(f"Transport exponent must be 1 or 2, got {p}")


def _empty_plan(a: DensityField, b: DensityField, p: int, method: str) -> TransportPlan:
    empty = np.zeros(0, dtype=np.int64)
    return TransportPlan(
        a, b, empty, empty, sparse.csr_matrix((0, 0)), 0.0, p, method,
        np.zeros(0), np.zeros(0), 0.0, True,
    )


def _identity_plan(a: DensityField, b: DensityField, p: int) -> TransportPlan:
    """Optimal plan between identical densities: every cell stays put at zero cost."""
    cells, volumes = _active(a)
    zeros = np.zeros(cells.size)
    return TransportPlan(
        a, b, cells, cells.copy(), sparse.diags(volumes, format="csr"), 0.0, p, "exact",
        zeros, zeros.copy(), 0.0, True,
    )


def _is_uniform(volumes: np.ndarray) -> bool:
    return volumes.size > 0 and bool(np.ptp(volumes) <= 1e-12 * volumes.max())


def _is_assignment(ma: np.ndarray, mb: np.ndarray) -> bool:
    return ma.size == mb.size and _is_uniform(ma) and _is_uniform(mb)


def _exact_cap(ma: np.ndarray, mb: np.ndarray, settings: TransportSettings) -> int:
    return settings.assignment_cell_cap if _is_assignment(ma, mb) else settings.cell_cap


def _assignment_duals(C: np.ndarray, cols: np.ndarray) -> Tuple[np.ndarray, np.ndarray, bool]:
    """
    Duals of an optimal assignment ``i -> cols[i]`` by Bellman-Ford shortest paths.

    ``v[j]`` is the shortest distance to ``j`` in the graph with arcs
    ``cols[i] -> j`` of length ``C[i, j] - C[i, cols[i]]``; then
    ``u = C[i, cols[i]] - v[cols]`` closes the gap exactly. The last flag is
    False when the relaxation did not settle within ``n`` passes.
    """
    n = cols.size
    diag = C[np.arange(n), cols]
    v = np.zeros(n)
    tol = 1e-12 * max(float(np.abs(C).max()), 1.0)
    settled = False
    for _ in range(n + 1):
        relaxed = np.minimum(v, ((v[cols] - diag)[:, None] + C).min(axis=0))
        if np.all(v - relaxed <= tol):
            settled = True
            break
        v = relaxed
    return diag - v[cols], v, settled


def _certify(
    C: np.ndarray,
    cost: float,
    u: np.ndarray,
    v: np.ndarray,
    ma: np.ndarray,
    mb: np.ndarray,
    unit_cost: float,
    duality_tol: float,
) -> Tuple[float, bool]:
    gap = cost - float(u @ ma + v @ mb)
    infeasibility = float(max(-(C - u[:, None] - v[None, :]).min(), 0.0))
    scale = max(abs(cost), ma.sum() * unit_cost)
    certified = abs(gap) <= GAP_RTOL * scale and infeasibility <= duality_tol
    if not certified:
        logger.warning(
            f"Exact plan not certified: gap={gap:.3e}, dual infeasibility={infeasibility:.3e}"
        )
    return gap, certified


def exact_ot(
    a: DensityField,
    b: DensityField,
    p: int = 2,
    settings: Optional[TransportSettings] = None,
) -> TransportPlan:
    """
    Globally optimal plan for cost ``|x - y|^p``.

    Two equal-sized sets of equal cell volumes (binary states) reduce to an
    assignment problem, solved by ``linear_sum_assignment`` with duals from
    shortest paths on the residual graph. Anything else goes to the dual
    simplex method: the target masses are rescaled onto the source total so
    the equality system is consistent, and the last (redundant) constraint is
    dropped. Either way the result is certified when the duality gap is within
    ``GAP_RTOL`` of the cost scale and no reduced cost is below
    ``-duality_tol``; an uncertified plan is returned with ``certified=False``
    and a warning.

    Args:
        a (DensityField): Source density.
        b (DensityField): Target density on the same grid.
        p (int): Cost exponent, 1 or 2.
        settings (TransportSettings): Tolerances and the active-cell cap.

    Returns:
        TransportPlan: Exact plan with LP duals.

    Raises:
        MassMismatchError: If the masses differ by more than ``mass_tol``.
        CellCapExceededError: If more than ``cell_cap`` cells are active
            (``assignment_cell_cap`` for binary pairs).
        TransportSolverError: If HiGHS does not report an optimum.
    """
    settings = settings or TransportSettings()
    _check_exponent(p)
    check_same_grid(a, b)
    check_equal_mass(a, b, settings.mass_tol)

    src, ma = _active(a)
    dst, mb = _active(b)
    cap = _exact_cap(ma, mb, settings)
    if src.size + dst.size > cap:
        raise CellCapExceededError(
            f"{src.size + dst.size} active cells exceed the exact solver cap {cap}"
        )
    if src.size == 0 or dst.size == 0:
        return _empty_plan(a, b, p, "exact")
    if np.array_equal(a.values, b.values):
        return _identity_plan(a, b, p)

    mb = mb * (ma.sum() / mb.sum())
    n_s, n_t = src.size, dst.size
    C = _cost_matrix(a.grid.flat_coordinates(src), b.grid.flat_coordinates(dst), p)

    if _is_assignment(ma, mb):
        unit = ma.sum() / n_s
        mb = np.full(n_t, unit)
        rows, cols = linear_sum_assignment(C)
        u, v, settled = _assignment_duals(C, cols)
        if not settled:
            logger.warning("Assignment duals did not settle; certificate will fail")
        coupling = sparse.csr_matrix((np.full(n_s, unit), (rows, cols)), shape=(n_s, n_t))
        cost = float(unit * C[rows, cols].sum())
    else:
        row_sums = sparse.kron(sparse.identity(n_s), np.ones((1, n_t)), format="csr")
        col_sums = sparse.kron(np.ones((1, n_s)), sparse.identity(n_t), format="csr")
        A_eq = sparse.vstack([row_sums, col_sums], format="csr")[:-1]
        b_eq = np.concatenate([ma, mb])[:-1]

        res = linprog(C.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs-ds")
        if res.status != 0:
            logger.error(f"Exact transport LP failed: {res.message}")
            raise TransportSolverError(f"Exact transport LP failed: {res.message}")

        gamma = np.maximum(res.x.reshape(n_s, n_t), 0.0)
        duals = np.asarray(res.eqlin.marginals)
        u = duals[:n_s]
        v = np.append(duals[n_s:], 0.0)
        coupling = sparse.csr_matrix(gamma)
        cost = float((gamma * C).sum())

    gap, certified = _certify(
        C, cost, u, v, ma, mb, a.grid.cell_size**p, settings.duality_tol
    )
    logger.debug(f"exact_ot p={p}: {n_s}x{n_t} cells, cost={cost!r}, gap={gap:.3e}")

    return TransportPlan(
        source=a,
        target=b,
        src_cells=src,
        dst_cells=dst,
        coupling=coupling,
        cost_value=cost,
        p=p,
        method="exact",
        dual_source=u,
        dual_target=v,
        duality_gap=gap,
        certified=certified,
    )


def _sinkhorn_log(
    log_a: np.ndarray,
    log_b: np.ndarray,
    C: np.ndarray,
    schedule: List[float],
    max_iters: int,
    tol: float,
    check_every: int,
    g0: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray, int, float]:
    """Annealed log-domain iterations; returns ``(f, g, iterations, row violation)``."""
    a = np.exp(log_a)
    g = np.zeros(log_b.size) if g0 is None else np.array(g0, dtype=np.float64)
    f = np.zeros(log_a.size)
    total = 0
    violation = np.inf
    for stage, eps in enumerate(schedule):
        stage_tol = tol if stage == len(schedule) - 1 else tol * STAGE_TOL_FACTOR
        for it in range(max_iters):
            f = -eps * logsumexp(log_b[None, :] + (g[None, :] - C) / eps, axis=1)
            g = -eps * logsumexp(log_a[:, None] + (f[:, None] - C) / eps, axis=0)
            total += 1
            if (it + 1) % check_every == 0 or it == max_iters - 1:
                log_rows = log_a + logsumexp(
                    log_b[None, :] + (f[:, None] + g[None, :] - C) / eps, axis=1
                )
                violation = float(np.abs(np.exp(log_rows) - a).sum())
                if violation <= stage_tol:
                    break
        logger.debug(f"sinkhorn stage eps={eps:.3e}: violation={violation:.3e}")
    return f, g, total, violation


def _symmetric_potential(
    log_w: np.ndarray, C: np.ndarray, schedule: List[float], max_iters: int, tol: float
) -> np.ndarray:
    """Self-transport potential of ``w`` by averaged symmetric updates."""
    p = np.zeros(log_w.size)
    for eps in schedule:
        for _ in range(max_iters):
            update = -eps * logsumexp(log_w[None, :] + (p[None, :] - C) / eps, axis=1)
            step = 0.5 * (p + update)
            if np.abs(step - p).max() <= tol:
                p = step
                break
            p = step
    return p


def _round_to_marginals(P: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Scale down excess rows and columns, then add a rank-one correction."""
    rows = P.sum(axis=1)
    x = np.minimum(np.divide(a, rows, out=np.ones_like(a), where=rows > 0), 1.0)
    P = P * x[:, None]
    cols = P.sum(axis=0)
    y = np.minimum(np.divide(b, cols, out=np.ones_like(b), where=cols > 0), 1.0)
    P = P * y[None, :]
    err_a = a - P.sum(axis=1)
    err_b = b - P.sum(axis=0)
    total = err_a.sum()
    if total > 0:
        P = P + np.outer(err_a, err_b) / total
    return P


def sinkhorn_ot(
    a: DensityField,
    b: DensityField,
    p: int = 2,
    eps_schedule: Optional[List[float]] = None,
    h: float = 1.0,
    settings: Optional[TransportSettings] = None,
    init_g: Optional[np.ndarray] = None,
    debias: bool = True,
    strict: bool = True,
) -> Tuple[TransportPlan, Potentials]:
    """
    Entropic plan with annealed regularization, rounded onto exact marginals.

    ``cost_value`` is the transport cost of the rounded coupling, so it is an
    upper bound on the exact optimum. The Sinkhorn divergence (self-transport
    corrected) is stored in ``plan.info.debiased_cost`` unless ``debias`` is
    off, which saves two symmetric solves and leaves it ``None``.

    Args:
        a (DensityField): Source density.
        b (DensityField): Target density on the same grid.
        p (int): Cost exponent, 1 or 2.
        eps_schedule (List[float]): Absolute regularization values; defaults to
            ``settings.eps_schedule(cell_size, p)``.
        h (float): Time step used to scale the returned potentials.
        settings (TransportSettings): Tolerances and iteration limits.
        init_g (np.ndarray): Warm start for the target potential.
        debias (bool): Compute the debiased divergence.
        strict (bool): Raise when the marginal tolerance is not reached;
            otherwise log a warning and return the rounded plan.

    Returns:
        Tuple[TransportPlan, Potentials]: The plan and its potentials.

    Raises:
        SinkhornConvergenceError: If ``strict`` and the final violation exceeds
            ``marginal_tol * mass``.
    """
    settings = settings or TransportSettings()
    _check_exponent(p)
    check_same_grid(a, b)
    check_equal_mass(a, b, settings.mass_tol)

    src, ma = _active(a)
    dst, mb = _active(b)
    if src.size == 0 or dst.size == 0:
        plan = _empty_plan(a, b, p, "sinkhorn")
        return plan, kantorovich_potentials(plan, h)

    total_mass = ma.sum()
    mb = mb * (total_mass / mb.sum())
    schedule = list(eps_schedule) if eps_schedule else settings.eps_schedule(a.grid.cell_size, p)
    C = _cost_matrix(a.grid.flat_coordinates(src), b.grid.flat_coordinates(dst), p)
    log_a, log_b = np.log(ma), np.log(mb)
    tol = settings.marginal_tol * total_mass

    if init_g is not None and np.shape(init_g) != (dst.size,):
        init_g = None
    f, g, iterations, violation = _sinkhorn_log(
        log_a, log_b, C, schedule, settings.max_iters, tol, settings.check_every, init_g
    )
    converged = violation <= tol
    if not converged:
        if strict:
            logger.error(f"Sinkhorn did not converge: violation={violation:.3e}")
            raise SinkhornConvergenceError(
                "Sinkhorn did not reach the marginal tolerance", violation, iterations
            )
        logger.warning(
            f"Sinkhorn stopped at violation={violation:.3e} after {iterations} iterations"
        )

    eps = schedule[-1]
    P = np.exp(log_a[:, None] + log_b[None, :] + (f[:, None] + g[None, :] - C) / eps)
    P = _round_to_marginals(P, ma, mb)
    cost = float((P * C).sum())

    debiased = None
    if debias:
        xs = a.grid.flat_coordinates(src)
        ys = b.grid.flat_coordinates(dst)
        C_aa = _cost_matrix(xs, xs, p)
        C_bb = _cost_matrix(ys, ys, p)
        p_a = _symmetric_potential(log_a, C_aa, schedule, settings.max_iters, tol)
        p_b = _symmetric_potential(log_b, C_bb, schedule, settings.max_iters, tol)
        debiased = float((f - p_a) @ ma + (g - p_b) @ mb)

    info = SinkhornInfo(
        iterations=iterations,
        violation=violation,
        eps_final=eps,
        converged=converged,
        dual_value=float(f @ ma + g @ mb),
        f=f,
        g=g,
        debiased_cost=debiased,
    )
    plan = TransportPlan(
        source=a,
        target=b,
        src_cells=src,
        dst_cells=dst,
        coupling=sparse.csr_matrix(P),
        cost_value=cost,
        p=p,
        method="sinkhorn",
        certified=converged,
        info=info,
    )
    return plan, kantorovich_potentials(plan, h)


def kantorovich_potentials(plan: TransportPlan, h: float) -> Potentials:
    """
    Dual pair of ``plan`` for the cost ``c / (2h)`` (``c / h`` when p=1).

    Exact plans use the LP duals. Entropic plans take ``phi = f / (2h)`` and
    replace ``psi`` by the c-transform of ``phi``, which is feasible exactly.
    """
    scale = 2.0 * h if plan.p == 2 else h
    if plan.src_cells.size == 0:
        return Potentials(np.zeros(0), np.zeros(0), plan.src_cells, plan.dst_cells, h, plan.p)
    if plan.method == "exact":
        return Potentials(
            plan.dual_source / scale,
            plan.dual_target / scale,
            plan.src_cells,
            plan.dst_cells,
            h,
            plan.p,
        )
    phi = plan.info.f / scale
    C = _cost_matrix(
        plan.grid.flat_coordinates(plan.src_cells),
        plan.grid.flat_coordinates(plan.dst_cells),
        plan.p,
    )
    psi = (C / scale - phi[:, None]).min(axis=0)
    return Potentials(phi, psi, plan.src_cells, plan.dst_cells, h, plan.p)


def extend_source_potential(plan: TransportPlan, cells: np.ndarray) -> np.ndarray:
    """
    Entropic source potential ``f`` evaluated at arbitrary cells by the soft
    c-transform of the target potential. Requires an entropic plan.
    """
    info = plan.info
    cells = np.asarray(cells, dtype=np.int64)
    if info is None or plan.dst_cells.size == 0:
        return np.zeros(cells.size)
    mb = plan.target.values.ravel()[plan.dst_cells] * plan.grid.cell_area
    mb = mb * (plan.coupling.sum() / mb.sum())
    C = _cost_matrix(
        plan.grid.flat_coordinates(cells), plan.grid.flat_coordinates(plan.dst_cells), plan.p
    )
    eps = info.eps_final
    return -eps * logsumexp(np.log(mb)[None, :] + (info.g[None, :] - C) / eps, axis=1)


def solve_transport(
    a: DensityField,
    b: DensityField,
    p: int = 2,
    settings: Optional[TransportSettings] = None,
    strict: bool = True,
) -> TransportPlan:
    """Exact plan when the active cells fit under the exact cap, rounded entropic plan otherwise."""
    settings = settings or TransportSettings()
    src, ma = _active(a)
    dst, mb = _active(b)
    if src.size + dst.size <= _exact_cap(ma, mb, settings):
        return exact_ot(a, b, p, settings)
    plan, _ = sinkhorn_ot(a, b, p, settings=settings, debias=False, strict=strict)
    return plan


def w2_squared(
    a: DensityField, b: DensityField, settings: Optional[TransportSettings] = None
) -> float:
    """Squared 2-Wasserstein distance (volume times squared length)."""
    return solve_transport(a, b, 2, settings).cost_value


def w1(a: DensityField, b: DensityField, settings: Optional[TransportSettings] = None) -> float:
    """1-Wasserstein distance (volume times length)."""
    return solve_transport(a, b, 1, settings).cost_value


def displacement_velocity(plan: TransportPlan, h: float) -> VelocityField:
    """
    Barycentric velocity ``u(x) = (x - T(x)) / h`` pointing from the target
    (the earlier state) towards the source. Zero on cells without mass.
    """
    if not h > 0:
        raise ValueError(f"Time step must be positive, got {h}")
    if plan.p != 2:
        raise ValueError("Displacement velocity needs a quadratic-cost plan")
    grid = plan.grid
    vectors = np.zeros((grid.size, 2))
    if plan.src_cells.size:
        row_mass = np.asarray(plan.coupling.sum(axis=1)).ravel()
        ys = grid.flat_coordinates(plan.dst_cells)
        xs = grid.flat_coordinates(plan.src_cells)
        moved = np.asarray(plan.coupling @ ys)
        keep = row_mass > 0
        bary = np.where(keep[:, None], moved / np.where(keep, row_mass, 1.0)[:, None], xs)
        vectors[plan.src_cells] = (xs - bary) / h
    return VelocityField(grid, vectors.reshape(grid.shape + (2,)))


def kinetic_energy(velocity: VelocityField, source: DensityField, h: float) -> float:
    """``h * sum(|u|^2 * cell mass)``; equals ``W2^2 / h`` for a deterministic plan."""
    speed2 = (velocity.vectors**2).sum(axis=-1)
    return float((speed2 * source.cell_masses()).sum() * h)


@dataclass
class PotentialCache:
    """Target potential kept between solves against one fixed target."""

    target_cells: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    g: Optional[np.ndarray] = None

    def warm_start(self, target: DensityField) -> Optional[np.ndarray]:
        cells, _ = _active(target)
        if self.g is not None and np.array_equal(cells, self.target_cells):
            return self.g
        return None

    def update(self, plan: TransportPlan) -> None:
        if plan.info is not None:
            self.target_cells = plan.dst_cells
            self.g = plan.info.g
