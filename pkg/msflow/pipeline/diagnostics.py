"""
Numerical checks of the estimates satisfied by the discrete flow.

Every check returns a ``DiagnosticsReport``: a list of entries
``(check, param, value, bound, provenance, pass)``. Analytic bounds carry the
provenance ``analytic``; calibrated constants come from
``config/frozen_fits.yaml`` and carry ``frozen fit``, or ``uncalibrated`` while
their section of the file has not been written by a calibration run.
"""

import datetime
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml
from scipy import ndimage, sparse
from scipy.sparse.linalg import lsqr

from msflow import base_config, frozen_fits, frozen_fits_path
from msflow.pipeline.energy import (
    Kernel,
    first_variation,
    kernel_from_spec,
    node_divergence,
    perimeter_tv,
    total_variation,
)
from msflow.pipeline.grid_measure import (
    DensityField,
    FieldPair,
    Grid2D,
    mass,
    second_moment,
    symmetric_difference_volume,
    translate,
)
from msflow.pipeline.transport import (
    TransportSettings,
    VelocityField,
    displacement_velocity,
    solve_transport,
    w1,
    w2_squared,
)
from msflow.utils.errors import InputError

if TYPE_CHECKING:
    from msflow.config.flow_config import FlowConfig
    from msflow.pipeline.jko import FlowLedger

logger = logging.getLogger("<MSFLOW>")

_diag = base_config["diagnostics"]
ANALYTIC = "analytic"
FROZEN = "frozen fit"
FITTED = "fitted"
DEGENERATE = "degenerate"
SKIPPED = "skipped"
UNCALIBRATED = "uncalibrated"
FIT_SECTIONS = ("interpolation", "euler_lagrange", "holder_l1")

# analytic constant of the interpolation inequality for sets in the plane
C_ANALYTIC = 2.0 * np.pi
HOLDER_W2_CONSTANT = np.sqrt(2.0)
# relative round-off allowed on inequalities that hold exactly
EXACT_RTOL = 1e-9


@dataclass(frozen=True)
class ReportEntry:
    check: str
    param: str
    value: float
    bound: float
    provenance: str
    passed: bool


@dataclass
class DiagnosticsReport:
    entries: List[ReportEntry] = field(default_factory=list)

    def add(
        self,
        check: str,
        param: str,
        value: float,
        bound: float,
        provenance: str,
        passed: Optional[bool] = None,
    ) -> ReportEntry:
        """Append an entry; ``passed`` defaults to ``value <= bound``."""
        value, bound = float(value), float(bound)
        if passed is None:
            passed = bool(value <= bound)
        entry = ReportEntry(check, str(param), value, bound, provenance, bool(passed))
        self.entries.append(entry)
        return entry

    def extend(self, other: "DiagnosticsReport") -> "DiagnosticsReport":
        self.entries.extend(other.entries)
        return self

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def failed_checks(self) -> List[str]:
        return sorted({e.check for e in self.entries if not e.passed})

    def values(self, check: Optional[str] = None) -> np.ndarray:
        return np.array([e.value for e in self.entries if check is None or e.check == check])

    def max_value(self, check: Optional[str] = None) -> float:
        values = self.values(check)
        return float(values.max()) if values.size else 0.0

    def max_ratio(self, check: Optional[str] = None) -> float:
        """Largest ``value / bound`` over entries with a positive bound."""
        ratios = [
            e.value / e.bound
            for e in self.entries
            if (check is None or e.check == check) and e.bound > 0
        ]
        return float(max(ratios)) if ratios else 0.0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "check": e.check,
                    "param": e.param,
                    "value": e.value,
                    "bound": e.bound,
                    "provenance": e.provenance,
                    "pass": e.passed,
                }
                for e in self.entries
            ],
            columns=["check", "param", "value", "bound", "provenance", "pass"],
        )


# -- frozen constants ------------------------------------------------------


def el_tol(cell_size: float, fits: Optional[Dict] = None) -> float:
    """Euler-Lagrange residual bound ``prefactor * cell_size ** exponent``."""
    el = (fits or frozen_fits)["euler_lagrange"]
    return float(el["prefactor"]) * cell_size ** float(el["exponent"])


def c_fit(fits: Optional[Dict] = None) -> float:
    return float((fits or frozen_fits)["interpolation"]["c_fit"])


def c_prime(fits: Optional[Dict] = None) -> float:
    return float((fits or frozen_fits)["holder_l1"]["c_prime"])


def fit_provenance(section: str, fits: Optional[Dict] = None) -> str:
    """``frozen fit`` once ``section`` was written by a calibration run, ``uncalibrated`` before."""
    return FROZEN if (fits or frozen_fits)[section].get("calibrated", False) else UNCALIBRATED


def uncalibrated_sections(fits: Optional[Dict] = None) -> List[str]:
    fits = fits or frozen_fits
    return [name for name in FIT_SECTIONS if not fits[name].get("calibrated", False)]


# -- test fields -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TestFieldSpec:
    """
    Stream function ``psi = sum_k a_k exp(-|x - c_k|^2 / (2 s_k^2))``; the field
    is its rotated node gradient, which has zero node divergence.
    ``support`` is the box ``(xmin, xmax, ymin, ymax)`` holding the centres.
    """

    __test__ = False

    centers: np.ndarray
    amplitudes: np.ndarray
    widths: np.ndarray
    support: Tuple[float, float, float, float]
    seed: int


@dataclass(frozen=True)
class ZetaSpec:
    """Gaussian ``zeta(x) = exp(-|x - c|^2 / (2 s^2))``; ``sup |D^2 zeta| = 1 / s^2``."""

    center: Tuple[float, float]
    width: float

    @property
    def hessian_sup(self) -> float:
        return 1.0 / (self.width * self.width)

    def value(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        r2 = (X - self.center[0]) ** 2 + (Y - self.center[1]) ** 2
        return np.exp(-r2 / (2.0 * self.width**2))

    def gradient(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        z = self.value(X, Y)
        s2 = self.width**2
        return np.stack([-(X - self.center[0]) / s2 * z, -(Y - self.center[1]) / s2 * z], axis=-1)


def _inner_box(grid: Grid2D, fraction: float = 0.6) -> Tuple[float, float, float, float]:
    xs, ys = grid.axes()
    cx, cy = (xs[0] + xs[-1]) / 2.0, (ys[0] + ys[-1]) / 2.0
    hx, hy = fraction * (xs[-1] - xs[0]) / 2.0, fraction * (ys[-1] - ys[0]) / 2.0
    return (cx - hx, cx + hx, cy - hy, cy + hy)


def make_test_fields(
    n_fields: int, grid: Grid2D, seed: int = 0, bumps: int = 3
) -> List[TestFieldSpec]:
    """Seeded random stream functions; widths are 5-15% of the smaller domain side."""
    rng = np.random.default_rng(seed)
    box = _inner_box(grid)
    extent = min(grid.nx, grid.ny) * grid.cell_size
    specs = []
    for _ in range(n_fields):
        centers = np.column_stack(
            [rng.uniform(box[0], box[1], bumps), rng.uniform(box[2], box[3], bumps)]
        )
        widths = rng.uniform(0.05, 0.15, bumps) * extent
        amplitudes = rng.uniform(-1.0, 1.0, bumps) * widths
        specs.append(TestFieldSpec(centers, amplitudes, widths, box, seed))
    return specs


def make_zeta_fields(n_fields: int, grid: Grid2D, seed: int = 0) -> List[ZetaSpec]:
    rng = np.random.default_rng(seed + 7919)
    box = _inner_box(grid)
    extent = min(grid.nx, grid.ny) * grid.cell_size
    return [
        ZetaSpec(
            (float(rng.uniform(box[0], box[1])), float(rng.uniform(box[2], box[3]))),
            float(rng.uniform(0.1, 0.25) * extent),
        )
        for _ in range(n_fields)
    ]


def _node_coordinates(grid: Grid2D) -> Tuple[np.ndarray, np.ndarray]:
    cs = grid.cell_size
    ax = grid.origin[0] - cs / 2.0 + cs * np.arange(grid.nx + 1)
    ay = grid.origin[1] - cs / 2.0 + cs * np.arange(grid.ny + 1)
    return np.meshgrid(ax, ay, indexing="ij")


def stream_to_field(psi: np.ndarray, cell_size: float) -> np.ndarray:
    """Cell vectors ``(P_x d_y psi, -P_y d_x psi) / cell_size`` from node values."""
    vx = ((psi[:-1, 1:] - psi[:-1, :-1]) + (psi[1:, 1:] - psi[1:, :-1])) / (2.0 * cell_size)
    vy = -((psi[1:, :-1] - psi[:-1, :-1]) + (psi[1:, 1:] - psi[:-1, 1:])) / (2.0 * cell_size)
    return np.stack([vx, vy], axis=-1)


def divergence_free_field(spec: TestFieldSpec, grid: Grid2D) -> np.ndarray:
    """``(nx, ny, 2)`` field of ``spec``; its node divergence vanishes up to round-off."""
    NX, NY = _node_coordinates(grid)
    psi = np.zeros(NX.shape)
    for c, a, s in zip(spec.centers, spec.amplitudes, spec.widths):
        psi += a * np.exp(-((NX - c[0]) ** 2 + (NY - c[1]) ** 2) / (2.0 * s * s))
    return stream_to_field(psi, grid.cell_size)


def discrete_divergence(vectors: np.ndarray, cell_size: float) -> np.ndarray:
    """Node divergence used by the divergence-free precondition."""
    return node_divergence(vectors, cell_size)


def _stream_operator(grid: Grid2D) -> sparse.csr_matrix:
    """Sparse matrix of ``stream_to_field`` acting on C-order node values."""
    nx, ny, cs = grid.nx, grid.ny, grid.cell_size
    node = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    cell = np.arange(nx * ny).reshape(nx, ny)
    w = 1.0 / (2.0 * cs)
    rows, cols, vals = [], [], []

    def put(row_offset, nodes, weight):
        rows.append(row_offset + cell.ravel())
        cols.append(nodes.ravel())
        vals.append(np.full(cell.size, weight))

    # rows: x components of all cells, then y components
    put(0, node[:-1, 1:], w)
    put(0, node[:-1, :-1], -w)
    put(0, node[1:, 1:], w)
    put(0, node[1:, :-1], -w)
    n = cell.size
    put(n, node[1:, :-1], -w)
    put(n, node[:-1, :-1], w)
    put(n, node[1:, 1:], -w)
    put(n, node[:-1, 1:], w)
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(2 * n, node.size),
    )


def project_divergence_free(vectors: np.ndarray, grid: Grid2D) -> np.ndarray:
    """
    Least-squares projection of a cell field onto rotated node gradients,
    solved for the stream function with LSQR.
    """
    G = _stream_operator(grid)
    rhs = np.concatenate([vectors[..., 0].ravel(), vectors[..., 1].ravel()])
    psi = lsqr(G, rhs, atol=1e-12, btol=1e-12, iter_lim=20 * G.shape[1])[0]
    return stream_to_field(psi.reshape(grid.nx + 1, grid.ny + 1), grid.cell_size)


def _sup(vectors: np.ndarray) -> float:
    return float(np.sqrt((vectors**2).sum(axis=-1)).max()) if vectors.size else 0.0


# -- step residuals --------------------------------------------------------


def euler_lagrange_residual(
    state: DensityField,
    velocity: VelocityField,
    k: Kernel,
    xi_specs: Sequence[TestFieldSpec],
    mollifier_cells: int = int(base_config["energy"]["mollifier_cells"]),
    tol: Optional[float] = None,
) -> DiagnosticsReport:
    """
    ``|int_E u . xi + first_variation(E, k, xi)| / (sup|xi| (P(E) + 1))`` per
    test field, against ``el_tol(cell_size)``.
    """
    grid = state.grid
    tol = el_tol(grid.cell_size) if tol is None else tol
    provenance = fit_provenance("euler_lagrange")
    perimeter = perimeter_tv(state)
    report = DiagnosticsReport()
    for i, spec in enumerate(xi_specs):
        xi = divergence_free_field(spec, grid)
        sup = _sup(xi)
        if sup == 0:
            report.add("euler_lagrange", f"xi_{i}", 0.0, tol, provenance)
            continue
        transport_side = float(
            ((velocity.vectors * xi).sum(axis=-1) * state.cell_masses()).sum()
        )
        fv = first_variation(state, k, xi, mollifier_cells=mollifier_cells)
        residual = abs(transport_side + fv) / (sup * (perimeter + 1.0))
        report.add("euler_lagrange", f"xi_{i}", residual, tol, provenance)
    return report


def continuity_equation_residual(
    prev: DensityField,
    next_: DensityField,
    velocity: VelocityField,
    h: float,
    zeta_specs: Sequence[ZetaSpec],
    w2_squared: Optional[float] = None,
    slack_cells: float = float(_diag["cont_slack_cells"]),
    settings: Optional[TransportSettings] = None,
) -> DiagnosticsReport:
    """
    ``|(1/h) int (chi_next - chi_prev) zeta - int_next grad zeta . u|`` per test
    function, against ``sup|D^2 zeta| (W2^2 / 2h + slack_cells * cell_size)``.
    """
    grid = prev.grid
    if w2_squared is None:
        w2_squared = solve_transport(next_, prev, 2, settings, strict=False).cost_value
    X, Y = grid.centers()
    area = grid.cell_area
    report = DiagnosticsReport()
    for i, zeta in enumerate(zeta_specs):
        z = zeta.value(X, Y)
        lhs = float(((next_.values - prev.values) * z).sum() * area) / h
        rhs = float(((zeta.gradient(X, Y) * velocity.vectors).sum(axis=-1) * next_.cell_masses()).sum())
        bound = zeta.hessian_sup * (w2_squared / (2.0 * h) + slack_cells * grid.cell_size)
        report.add("continuity_equation", f"zeta_{i}", abs(lhs - rhs), bound, ANALYTIC)
    return report


def slope_lower_bound_check(
    state: DensityField,
    velocity: VelocityField,
    k: Kernel,
    xi_specs: Sequence[TestFieldSpec],
    slope: float,
    mollifier_cells: int = int(base_config["energy"]["mollifier_cells"]),
    tol: Optional[float] = None,
    with_velocity: bool = True,
) -> DiagnosticsReport:
    """
    ``-first_variation(E, k, +-xi) - 1/2 int_E |xi|^2 <= slope^2 / 2 + slack`` for
    every spec and sign, where ``slope`` is the step's ``W2 / h`` and the slack
    is the Euler-Lagrange tolerance scaled by ``sup|xi| (P(E) + 1)``.

    With ``with_velocity`` the recovered velocity, smoothed and projected onto
    divergence-free fields, is tested too and its gap to the bound reported.
    """
    grid = state.grid
    tol = el_tol(grid.cell_size) if tol is None else tol
    perimeter = perimeter_tv(state)
    masses = state.cell_masses()
    bound0 = 0.5 * slope * slope
    report = DiagnosticsReport()

    fields = [(f"xi_{i}", divergence_free_field(s, grid)) for i, s in enumerate(xi_specs)]
    if with_velocity and velocity.vectors.any():
        smooth = np.stack(
            [ndimage.gaussian_filter(velocity.vectors[..., a], 1.0, mode="constant") for a in range(2)],
            axis=-1,
        )
        fields.append(("recovered_velocity", project_divergence_free(smooth, grid)))

    for name, xi in fields:
        fv = first_variation(state, k, xi, mollifier_cells=mollifier_cells)
        quad = 0.5 * float(((xi**2).sum(axis=-1) * masses).sum())
        slack = tol * _sup(xi) * (perimeter + 1.0)
        for sign, label in ((1.0, "+"), (-1.0, "-")):
            rhs = -sign * fv - quad
            report.add("slope_lower_bound", f"{name}{label}", rhs, bound0 + slack, ANALYTIC)
        if name == "recovered_velocity":
            gap = bound0 - max(-fv - quad, fv - quad)
            report.add("slope_velocity_gap", name, gap, np.inf, ANALYTIC, passed=True)
    return report


# -- pair inequalities -----------------------------------------------------


def check_interpolation_inequality(
    pairs: Sequence[FieldPair],
    fit: Optional[float] = None,
    settings: Optional[TransportSettings] = None,
) -> DiagnosticsReport:
    """
    ``|E△F|^2 <= C (P(E) + P(F)) W1(E, F)`` per pair: the max ratio is compared
    with the frozen ``C_fit`` and the analytic ``2 pi``. Each pair also reports
    ``W1 <= W2 sqrt(mass)``.
    """
    fit = c_fit() if fit is None else fit
    provenance = fit_provenance("interpolation")
    report = DiagnosticsReport()
    ratios = []
    for i, pair in enumerate(pairs):
        left = symmetric_difference_volume(pair.a, pair.b) ** 2
        dist1 = w1(pair.a, pair.b, settings)
        right = (perimeter_tv(pair.a) + perimeter_tv(pair.b)) * dist1
        if left == 0:
            ratio = 0.0
        else:
            ratio = left / right if right > 0 else np.inf
        ratios.append(ratio)
        report.add("interpolation_ratio", f"pair_{i}", ratio, fit, provenance)

        dist2 = np.sqrt(max(w2_squared(pair.a, pair.b, settings), 0.0))
        jensen = dist2 * np.sqrt(mass(pair.a))
        report.add("jensen_w1_w2", f"pair_{i}", dist1, jensen * (1 + 1e-6) + 1e-12, ANALYTIC)

    worst = max(ratios) if ratios else 0.0
    report.add("interpolation_max_ratio", "frozen", worst, fit, provenance)
    report.add("interpolation_max_ratio", "analytic", worst, C_ANALYTIC, ANALYTIC)
    return report


def check_interpolation_bv(
    pairs: Sequence[Tuple[DensityField, DensityField]],
    fit: Optional[float] = None,
    settings: Optional[TransportSettings] = None,
) -> DiagnosticsReport:
    """``||u - v||_1^2 <= C W1(u, v) TV(u - v)`` for relaxed densities of equal mass."""
    fit = c_fit() if fit is None else fit
    provenance = fit_provenance("interpolation")
    report = DiagnosticsReport()
    for i, (u, v) in enumerate(pairs):
        left = symmetric_difference_volume(u, v) ** 2
        if left == 0:
            report.add("interpolation_bv", f"pair_{i}", 0.0, fit, provenance)
            continue
        right = w1(u, v, settings) * total_variation(u.values - v.values, u.grid.cell_size)
        report.add(
            "interpolation_bv", f"pair_{i}", left / right if right > 0 else np.inf, fit, provenance
        )
    return report


def check_spatial_modulus(
    states: Iterable[DensityField], shifts: Sequence[Tuple[int, int]] = ((1, 0), (0, 1), (2, 1), (3, -2))
) -> DiagnosticsReport:
    """``int |chi(x + z) - chi(x)| <= |z|_1 P(E)`` for lattice shifts ``z``."""
    report = DiagnosticsReport()
    for n, state in enumerate(states):
        perimeter = perimeter_tv(state)
        cs = state.grid.cell_size
        for di, dj in shifts:
            left = symmetric_difference_volume(translate(state, di, dj), state)
            bound = (abs(di) + abs(dj)) * cs * perimeter
            report.add(
                "spatial_modulus", f"state_{n}:z=({di},{dj})", left, bound * (1 + EXACT_RTOL), ANALYTIC
            )
    return report


def interpolation_corpus(
    seed: int, n_pairs: int, grid: Grid2D, fill: Tuple[float, float] = (0.05, 0.2)
) -> List[FieldPair]:
    """Frozen corpus of matched-mass random binary pairs (random blobs)."""
    from msflow.getters.shapes import random_blobs

    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        n_cells = int(rng.uniform(*fill) * grid.size)
        smoothing = float(rng.uniform(0.5, 3.0))
        a = random_blobs(grid, n_cells, rng, smoothing)
        b = random_blobs(grid, n_cells, rng, smoothing)
        pairs.append(FieldPair(a, b))
    return pairs


# -- ledger checks ---------------------------------------------------------


def _slope_matrix(frame: pd.DataFrame) -> Tuple[List[float], np.ndarray]:
    """Sample fractions ``t / h`` ascending and the matching slope columns."""
    cols = [c for c in frame.columns if c.startswith("slope_h")]
    fracs = [1.0 if c == "slope_h" else 1.0 / float(c[len("slope_h"):]) for c in cols]
    order = np.argsort(fracs)
    return [fracs[i] for i in order], frame[[cols[i] for i in order]].to_numpy(dtype=np.float64)


def de_giorgi_quadrature(slopes: np.ndarray, times: Sequence[float]) -> np.ndarray:
    """``1/2 sum_{i >= 1} slope(t_i)^2 (t_i - t_{i-1})`` per row; empty for one node."""
    times = np.asarray(times, dtype=np.float64)
    if times.size < 2:
        return np.zeros(slopes.shape[0])
    dt = np.diff(times)
    return 0.5 * (slopes[:, 1:] ** 2 * dt[None, :]).sum(axis=1)


def check_dissipation_ledger(
    frame: pd.DataFrame, h: float, accept_slack: float
) -> DiagnosticsReport:
    """
    One-step competitor inequality, the De Giorgi inequality per step and its
    telescoped form over every window ``n0 < n1``:
    ``sum (w2^2 / 2h + quadrature) <= E(n0) - E(n1) + slack``, with slack
    ``3 accept_slack E(n-1)`` per step.
    """
    report = DiagnosticsReport()
    energy = frame["total_energy"].to_numpy(dtype=np.float64)
    if energy.size < 2:
        report.add("dissipation_one_step", "none", 0.0, 0.0, ANALYTIC, passed=True)
        return report
    w2 = frame["w2_step"].to_numpy(dtype=np.float64)[1:]
    fracs, slopes = _slope_matrix(frame)
    quad = de_giorgi_quadrature(slopes[1:], [f * h for f in fracs])
    metric = w2 * w2 / (2.0 * h)
    drop = energy[:-1] - energy[1:]
    slack = 3.0 * accept_slack * np.abs(energy[:-1])

    for n in range(1, energy.size):
        i = n - 1
        report.add(
            "dissipation_one_step",
            f"n={n}",
            metric[i] - drop[i],
            accept_slack * abs(energy[i]),
            ANALYTIC,
        )
        report.add("de_giorgi_step", f"n={n}", metric[i] + quad[i] - drop[i], slack[i], ANALYTIC)

    cum_lhs = np.concatenate([[0.0], np.cumsum(metric + quad)])
    cum_slack = np.concatenate([[0.0], np.cumsum(slack)])
    worst, worst_pair = -np.inf, (0, 1)
    for n0 in range(energy.size - 1):
        n1 = np.arange(n0 + 1, energy.size)
        excess = (cum_lhs[n1] - cum_lhs[n0]) - (energy[n0] - energy[n1]) - (cum_slack[n1] - cum_slack[n0])
        j = int(np.argmax(excess))
        if excess[j] > worst:
            worst, worst_pair = float(excess[j]), (n0, int(n1[j]))
    report.add("dissipation_telescoped", f"n0={worst_pair[0]},n1={worst_pair[1]}", worst, 0.0, ANALYTIC)
    return report


def _pair_distances(
    states: Dict[int, DensityField],
    h: float,
    settings: Optional[TransportSettings],
    workers: int = 1,
) -> pd.DataFrame:
    keys = sorted(states)
    index = [(s, t) for a, s in enumerate(keys) for t in keys[a + 1:]]

    def one(pair: Tuple[int, int]) -> Dict:
        s, t = pair
        return {
            "s": s,
            "t": t,
            "dt": (t - s) * h,
            "w2": float(np.sqrt(max(w2_squared(states[s], states[t], settings), 0.0))),
            "l1": symmetric_difference_volume(states[s], states[t]),
        }

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, index))
    else:
        rows = [one(pair) for pair in index]
    return pd.DataFrame(rows, columns=["s", "t", "dt", "w2", "l1"])


def _fit_exponent(dt: np.ndarray, dist: np.ndarray) -> Optional[Tuple[float, float]]:
    keep = dist > 0
    if np.count_nonzero(keep) < 2 or np.unique(dt[keep]).size < 2:
        return None
    slope, intercept = np.polyfit(np.log(dt[keep]), np.log(dist[keep]), 1)
    return float(slope), float(np.exp(intercept))


def check_holder_curves(
    states: Dict[int, DensityField],
    h: float,
    energy0: float,
    accept_slack: float = float(base_config["solver"]["accept_slack"]),
    min_steps: int = int(_diag["holder_min_steps"]),
    w2_floor: float = float(_diag["w2_exponent_floor"]),
    l1_floor: float = float(_diag["l1_exponent_floor"]),
    settings: Optional[TransportSettings] = None,
    fits: Optional[Dict] = None,
    workers: int = 1,
) -> DiagnosticsReport:
    """
    Log-log fits of W2 and ``|E(t) △ E(s)|`` against ``t - s`` over all pairs
    of recorded states, plus the pointwise bounds
    ``W2 <= sqrt(2) sqrt(E0 (1 + accept_slack)^n) sqrt(t - s)`` and
    ``|E(t) △ E(s)| <= C' E0^(3/4) (t - s)^(1/4)``.

    Raises:
        InputError: With fewer than ``min_steps`` steps recorded.
    """
    steps = max(states) - min(states) if states else 0
    if steps < min_steps:
        raise InputError(f"Hölder check needs at least {min_steps} steps, got {steps}")
    report = DiagnosticsReport()
    pairs = _pair_distances(states, h, settings, workers)
    dt, dw2, dl1 = (pairs[c].to_numpy(dtype=np.float64) for c in ("dt", "w2", "l1"))
    e0 = max(energy0, 0.0)

    for name, dist, floor in (("w2", dw2, w2_floor), ("l1", dl1, l1_floor)):
        fit = _fit_exponent(dt, dist)
        if fit is None:
            report.add(f"holder_{name}_exponent", "fit", 0.0, floor, DEGENERATE, passed=True)
            continue
        exponent, prefactor = fit
        report.add(f"holder_{name}_exponent", "fit", exponent, floor, FITTED, passed=exponent >= floor)
        report.add(f"holder_{name}_prefactor", "fit", prefactor, np.inf, FITTED, passed=True)

    # E(E_s) - E(E_t) + slack is at most E0 (1 + accept_slack)^t
    later = pairs["t"].to_numpy(dtype=np.float64)
    bound_w2 = HOLDER_W2_CONSTANT * np.sqrt(e0 * (1.0 + accept_slack) ** later * dt)
    ratio_w2 = np.divide(dw2, bound_w2, out=np.zeros_like(dw2), where=bound_w2 > 0)
    report.add("holder_w2_bound", "max_ratio", ratio_w2.max() if ratio_w2.size else 0.0, 1.0 + 1e-6, ANALYTIC)

    bound_l1 = e0**0.75 * dt**0.25
    ratio_l1 = np.divide(dl1, bound_l1, out=np.zeros_like(dl1), where=bound_l1 > 0)
    report.add(
        "holder_l1_bound",
        "max_ratio",
        ratio_l1.max() if ratio_l1.size else 0.0,
        c_prime(fits),
        fit_provenance("holder_l1", fits),
    )
    return report


def check_ledger_residuals(frame: pd.DataFrame, cell_size: float) -> DiagnosticsReport:
    """Per-step EL residuals against ``el_tol`` and continuity ratios against 1."""
    report = DiagnosticsReport()
    tol = el_tol(cell_size)
    provenance = fit_provenance("euler_lagrange")
    for n, el, cont in frame[["n", "el_residual", "cont_residual"]].iloc[1:].itertuples(index=False):
        report.add("euler_lagrange", f"n={int(n)}", el, tol, provenance)
        report.add("continuity_equation", f"n={int(n)}", cont, 1.0, ANALYTIC)
    return report


def check_energy_bounds(
    frame: pd.DataFrame,
    cell_area: float,
    accept_slack: float,
    states: Optional[Dict[int, DensityField]] = None,
) -> DiagnosticsReport:
    """
    ``P(E_n) <= E(E_0) (1 + accept_slack)^n``, ``|mass(E_n) - mass(E_0)|`` within
    one cell, and a finite second moment for every stored state.
    """
    report = DiagnosticsReport()
    e0 = float(frame["total_energy"].iloc[0])
    m0 = float(frame["mass"].iloc[0])
    for n, perimeter, m in frame[["n", "perimeter", "mass"]].itertuples(index=False):
        n = int(n)
        report.add("perimeter_bound", f"n={n}", perimeter, e0 * (1 + accept_slack) ** n, ANALYTIC)
        report.add("mass_conservation", f"n={n}", abs(m - m0), cell_area * (1 + EXACT_RTOL), ANALYTIC)
    for n, state in sorted((states or {}).items()):
        moment = second_moment(state)
        report.add("second_moment", f"n={n}", moment, np.inf, ANALYTIC, passed=bool(np.isfinite(moment)))
    return report


def _sampled_steps(available: Sequence[int], n_sampled: int) -> List[int]:
    """Up to ``n_sampled`` evenly spread steps ``n`` with state ``n - 1`` also stored."""
    steps = [n for n in available if n >= 1 and n - 1 in available]
    if len(steps) <= n_sampled:
        return steps
    picks = np.linspace(0, len(steps) - 1, n_sampled).round().astype(int)
    return sorted({steps[i] for i in picks})


def check_run(
    frame: pd.DataFrame,
    states: Dict[int, DensityField],
    cfg: "FlowConfig",
    k: Optional[Kernel] = None,
    n_sampled: int = int(_diag["slope_sampled_steps"]),
    n_slope_fields: int = int(_diag["slope_test_fields"]),
) -> DiagnosticsReport:
    """
    Every ledger-level check on one run: dissipation, residuals, energy and
    mass bounds, the spatial modulus, Hölder curves when the run is long
    enough, and the slope lower bound on ``n_sampled`` steps. A run with steps
    but no stored pair ``(n - 1, n)`` gets a failing ``skipped`` slope entry.

    Args:
        frame (pd.DataFrame): Ledger table (``ledger.csv`` columns).
        states (Dict[int, DensityField]): Stored states by step index.
        cfg (FlowConfig): Configuration of the run.
        k (Kernel): Interaction kernel; built from ``cfg.kernel`` if omitted.

    Returns:
        DiagnosticsReport: All entries in a fixed order.
    """
    grid = cfg.grid()
    k = k if k is not None else kernel_from_spec(cfg.kernel, grid)
    settings = cfg.transport_settings()
    pending = uncalibrated_sections()
    if pending:
        logger.warning(f"Frozen fits not calibrated for {pending}; run `msflow calibrate`")
    report = check_dissipation_ledger(frame, cfg.h, cfg.accept_slack)
    report.extend(check_ledger_residuals(frame, cfg.cell_size))
    report.extend(check_energy_bounds(frame, grid.cell_area, cfg.accept_slack, states))
    report.extend(check_spatial_modulus(states[n] for n in sorted(states)))

    if states and max(states) - min(states) >= int(_diag["holder_min_steps"]):
        report.extend(
            check_holder_curves(
                states,
                cfg.h,
                float(frame["total_energy"].iloc[0]),
                cfg.accept_slack,
                settings=settings,
                workers=cfg.workers,
            )
        )
    else:
        logger.info("Run too short for the Hölder check; skipped")

    slopes = frame.set_index("n")["slope_h"]
    sampled = _sampled_steps(sorted(states), n_sampled)
    if not sampled and len(frame) > 1:
        logger.warning("No stored state has its predecessor; slope lower bound not checked")
        report.add(
            "slope_lower_bound", "no stored pair (n-1, n)", 0.0, 0.0, SKIPPED, passed=False
        )
    for n in sampled:
        plan = solve_transport(states[n], states[n - 1], 2, settings, strict=False)
        velocity = displacement_velocity(plan, cfg.h)
        specs = make_test_fields(n_slope_fields, grid, seed=cfg.seed + n)
        step = slope_lower_bound_check(
            states[n], velocity, k, specs, float(slopes.loc[n]), mollifier_cells=cfg.mollifier_cells
        )
        for e in step.entries:
            report.add(e.check, f"n={n}:{e.param}", e.value, e.bound, e.provenance, e.passed)
    return report


def check_flow(ledger: "FlowLedger", k: Optional[Kernel] = None) -> DiagnosticsReport:
    """``check_run`` on an in-memory ledger."""
    return check_run(ledger.to_frame(), dict(enumerate(ledger.states)), ledger.config, k)


# -- calibration -----------------------------------------------------------


def calibrate_frozen_fits(
    out_path: Optional[str] = None,
    seed: Optional[int] = None,
    n_pairs: Optional[int] = None,
    corpus_grid: Optional[int] = None,
    el_points: Sequence[Tuple[float, float]] = (),
    holder_ratio: Optional[float] = None,
    margin: float = 1.25,
) -> Dict:
    """
    Recompute the frozen constants and write them to ``out_path`` (defaults to
    the packaged ``frozen_fits.yaml``).

    Args:
        seed, n_pairs, corpus_grid: Interpolation corpus; default to the
            values recorded in the current file.
        el_points: ``(cell_size, residual)`` pairs from disk refinement runs;
            when at least two are given the el_tol curve is refitted.
        holder_ratio: Max L1 Hölder ratio of a reference run; refits ``C'``.
        margin: Safety factor applied to every fitted constant.

    Returns:
        Dict: The new constants.
    """
    fits = {key: dict(value) for key, value in frozen_fits.items()}
    today = datetime.date.today().isoformat()
    interp = fits["interpolation"]
    seed = int(interp["corpus_seed"] if seed is None else seed)
    n_pairs = int(interp["corpus_pairs"] if n_pairs is None else n_pairs)
    corpus_grid = int(interp["corpus_grid"] if corpus_grid is None else corpus_grid)

    grid = Grid2D.centered(corpus_grid, corpus_grid, 1.0 / corpus_grid)
    report = check_interpolation_inequality(interpolation_corpus(seed, n_pairs, grid), fit=np.inf)
    worst = report.max_value("interpolation_ratio")
    interp.update(
        c_fit=float(margin * worst),
        corpus_seed=seed,
        corpus_pairs=n_pairs,
        corpus_grid=corpus_grid,
        max_ratio=float(worst),
        calibrated=True,
        provenance=f"calibrated {today}: max corpus ratio {worst:.6g} x {margin}",
    )
    logger.info(f"Interpolation constant: max ratio {worst:.6g}, C_fit {interp['c_fit']:.6g}")

    if len(el_points) >= 2:
        cs, res = np.array(el_points, dtype=np.float64).T
        exponent, log_pref = np.polyfit(np.log(cs), np.log(np.maximum(res, 1e-300)), 1)
        fits["euler_lagrange"] = {
            "prefactor": float(margin * np.exp(log_pref)),
            "exponent": float(exponent),
            "cell_sizes": [float(c) for c in cs],
            "residuals": [float(r) for r in res],
            "calibrated": True,
            "provenance": f"calibrated {today}: {len(el_points)} refinement levels x {margin}",
        }
    if holder_ratio is not None:
        fits["holder_l1"] = {
            "c_prime": float(margin * holder_ratio),
            "reference_ratio": float(holder_ratio),
            "calibrated": True,
            "provenance": f"calibrated {today}: reference run max ratio {holder_ratio:.6g} x {margin}",
        }

    with open(out_path or frozen_fits_path, "w") as file:
        yaml.safe_dump(fits, file, sort_keys=False)
    return fits


def disk_el_residual(resolution: int, extent: float = 3.2, n_fields: int = 4, seed: int = 0) -> float:
    """Max EL residual of the unit-area disk at rest (zero velocity, no kernel)."""
    from msflow.getters.shapes import make_init

    grid = Grid2D.centered(resolution, resolution, extent / resolution)
    disk = make_init("ball", grid)
    report = euler_lagrange_residual(
        disk, VelocityField.zeros(grid), Kernel.zero(grid.cell_size), make_test_fields(n_fields, grid, seed)
    )
    return report.max_value()

