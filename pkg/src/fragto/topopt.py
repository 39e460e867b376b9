"""SIMP and BESO compliance minimisation with a pluggable energy-field engine.

An *engine* is any callable ``engine(density) -> EngineResult``. The loop in
:func:`run_to` never looks inside it, so the same code runs with a fine-scale
FEM solve (:class:`FemEngine`) or with a learned coarse-to-fine lift.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np
from scipy.ndimage import correlate

from . import fem
from .grid import ELASTIC, TOProblem, uniform_density

SIMP_FLOOR = 1e-3
BESO_FLOOR = 1e-6


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "beso"
    penal: float = 3.0
    filter_radius: float | None = None   # None: width / 32, at least 1
    move_limit: float = 0.2
    oc_damping: float = 0.5
    beso_evolution_rate: float = 0.02
    max_iters: int = 200
    convergence_tol: float = 1e-3
    window: int = 5
    solver: str = "direct"

    def __post_init__(self):
        if self.method not in ("simp", "beso"):
            raise ValueError(f"method must be 'simp' or 'beso', got {self.method!r}")
        if self.penal < 1:
            raise ValueError("penal must be >= 1")
        if self.filter_radius is not None and self.filter_radius < 1:
            raise ValueError("filter_radius must be >= 1")
        if not 0 < self.beso_evolution_rate < 1:
            raise ValueError("beso_evolution_rate must lie in (0, 1)")
        if not 0 < self.move_limit <= 1:
            raise ValueError("move_limit must lie in (0, 1]")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")

    def radius_for(self, problem: TOProblem) -> float:
        if self.filter_radius is not None:
            return float(self.filter_radius)
        return max(1.0, problem.width / 32)


@dataclass
class EngineResult:
    energy: np.ndarray
    compliance: float
    coarse_energy: np.ndarray | None = None
    coarse_compliance: float | None = None
    timings: dict = field(default_factory=dict)


class Engine(Protocol):
    def __call__(self, density: np.ndarray) -> EngineResult: ...


class FemEngine:
    """Fine-scale FEM: the ground-truth energy provider."""

    def __init__(self, problem: TOProblem, penal: float = 3.0, solver: str = "direct"):
        self.problem = problem
        self.penal = penal
        self.solver = solver
        self._last = None

    def __call__(self, density):
        t0 = time.perf_counter()
        sol = fem.assemble_and_solve(self.problem, density, self.penal,
                                     solver=self.solver, x0=self._last)
        if self.solver == "pcg":
            self._last = sol.nodal
        return EngineResult(sol.energy, sol.compliance,
                            timings={"fem": time.perf_counter() - t0})


def _filter_kernel(radius):
    r = int(np.ceil(radius)) - 1
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    return np.maximum(0.0, radius - np.hypot(dy, dx))


def sensitivity_filter(raw: np.ndarray, radius: float, density: np.ndarray, *,
                       density_weighted: bool = True, active: np.ndarray | None = None
                       ) -> np.ndarray:
    """Weighted average over a disc with cone weights ``max(0, radius - dist)``.

    With ``density_weighted`` each neighbour also counts in proportion to its
    density. Elements outside ``active`` neither contribute nor receive a value
    (their output is the raw value).
    """
    if radius < 1:
        raise ValueError("filter radius must be >= 1")
    raw = np.asarray(raw, dtype=np.float64)
    w = np.asarray(density, dtype=np.float64) if density_weighted else np.ones_like(raw)
    if active is not None:
        w = np.where(active, w, 0.0)
    kernel = _filter_kernel(radius)
    num = correlate(w * raw, kernel, mode="constant", cval=0.0)
    den = correlate(w, kernel, mode="constant", cval=0.0)
    out = raw.copy()
    ok = den > 0
    if active is not None:
        ok &= active
    out[ok] = num[ok] / den[ok]
    return out


def compliance_sensitivity(density, energy, penal, physics):
    """dC/dx from element energies, valid for both physics.

    Elastic energies are ``E(x) u'k0u / 2`` with ``C`` carrying the same 1/2,
    thermal ones ``E(x) t'k0t`` with no 1/2, so in both cases
    ``dC/dx = -p x^(p-1) (1 - floor) energy / E(x)``.
    """
    floor = fem.ELASTIC_FLOOR if physics == ELASTIC else fem.THERMAL_FLOOR
    e = fem.material_scale(density, penal, physics)
    return -penal * np.asarray(density) ** (penal - 1) * (1 - floor) * energy / e


def simp_step(density: np.ndarray, energy: np.ndarray, target_volume: float,
              cfg: OptimizerConfig, problem: TOProblem) -> np.ndarray:
    """One optimality-criteria update with bisection on the volume multiplier."""
    active = problem.domain.active
    dc = compliance_sensitivity(density, energy, cfg.penal, problem.physics)
    dc = sensitivity_filter(dc, cfg.radius_for(problem), density, active=active)
    dc = dc[active]
    if np.any(dc > 0):
        raise ValueError("positive compliance sensitivity; the energy field is corrupted")
    x = density[active]
    lo_x = np.maximum(SIMP_FLOOR, x - cfg.move_limit)
    hi_x = np.minimum(1.0, x + cfg.move_limit)
    if not lo_x.sum() <= target_volume <= hi_x.sum():
        raise ValueError("volume target unreachable within the move limit")
    neg = -dc

    def update(lam):
        return np.clip(x * (neg / lam) ** cfg.oc_damping, lo_x, hi_x)

    # bracket the multiplier in log space
    l1, l2 = 1e-30, 1e30
    for _ in range(200):
        mid = np.sqrt(l1 * l2)
        if update(mid).sum() > target_volume:
            l1 = mid
        else:
            l2 = mid
        if l2 / l1 - 1 < 1e-14:
            break
    xn = update(np.sqrt(l1 * l2))
    if abs(xn.sum() - target_volume) > 1e-6 * target_volume:
        raise ValueError("OC bisection failed to meet the volume target")
    out = np.zeros_like(density)
    out[active] = xn
    return out


def beso_step(density: np.ndarray, energy_history: list, target_volume_this_iter: float,
              cfg: OptimizerConfig, problem: TOProblem) -> np.ndarray:
    """Hard-kill ranking update.

    ``energy_history`` holds filtered sensitivities, newest last; the two
    newest are averaged. The ``round(target)`` highest-ranked active elements
    become solid, the rest drop to the soft-kill floor. Ties keep the element
    that is currently solid, then the lower index.

    Elements under a point load always stay solid: a uniformly loaded patch
    moves almost rigidly, so its low strain energy would otherwise rank it
    for removal and leave the loaded nodes hanging.
    """
    active = problem.domain.active
    recent = [np.asarray(h) for h in energy_history[-2:]]
    sens = recent[0] if len(recent) == 1 else 0.5 * (recent[0] + recent[1])
    s = np.where(problem.loaded_elements, np.inf, sens)[active]
    x = density[active]
    n_solid = int(np.clip(round(target_volume_this_iter), 0, s.size))
    order = np.lexsort((np.arange(s.size), -x, -s))
    xn = np.full(s.size, BESO_FLOOR)
    xn[order[:n_solid]] = 1.0
    out = np.zeros_like(density)
    out[active] = xn
    return out


@dataclass
class IterRecord:
    iteration: int
    compliance: float
    volume_fraction: float
    density: np.ndarray | None
    energy: np.ndarray | None
    coarse_energy: np.ndarray | None
    coarse_compliance: float | None
    seconds: float
    timings: dict


@dataclass
class TOTrace:
    records: list
    converged: bool
    final_density: np.ndarray
    problem_name: str
    method: str

    @property
    def compliances(self) -> np.ndarray:
        return np.array([r.compliance for r in self.records])

    @property
    def volume_fractions(self) -> np.ndarray:
        return np.array([r.volume_fraction for r in self.records])

    @property
    def n_iters(self) -> int:
        return len(self.records)


def has_converged(compliances, window: int, tol: float) -> bool:
    """Relative change between the means of the last two ``window``-long blocks."""
    if len(compliances) < 2 * window:
        return False
    last = np.sum(compliances[-window:])
    prev = np.sum(compliances[-2 * window:-window])
    return abs(last - prev) / abs(last) < tol


def run_to(problem: TOProblem, cfg: OptimizerConfig, engine: Callable | None = None, *,
           n_iters: int | None = None, keep_fields: bool = True,
           callback: Callable | None = None) -> TOTrace:
    """Drive SIMP or BESO with ``engine`` supplying the element energy field.

    Stops at convergence or ``cfg.max_iters``; with ``n_iters`` it runs exactly
    that many iterations regardless of convergence (data harvesting).
    """
    if engine is None:
        engine = FemEngine(problem, cfg.penal, cfg.solver)
    beso = cfg.method == "beso"
    active = problem.domain.active
    n_active = problem.domain.n_active
    target = problem.target_volume
    radius = cfg.radius_for(problem)
    limit = n_iters if n_iters is not None else cfg.max_iters

    x = uniform_density(problem, solid=beso)
    vol_k = float(n_active)
    sens_prev = None
    compliances = []
    records = []
    converged = False

    for it in range(1, limit + 1):
        t0 = time.perf_counter()
        res = engine(x)
        compliances.append(res.compliance)
        t_engine = time.perf_counter()

        at_target = (not beso) or vol_k <= target
        if n_iters is None and at_target and has_converged(
                compliances, cfg.window, cfg.convergence_tol):
            converged = True

        x_next = None
        if not converged and it < limit:
            if beso:
                vol_k = max(vol_k * (1.0 - cfg.beso_evolution_rate), target)
                sens = sensitivity_filter(res.energy, radius, x, density_weighted=False,
                                          active=active)
                history = [sens] if sens_prev is None else [sens_prev, sens]
                x_next = beso_step(x, history, vol_k, cfg, problem)
                sens_prev = sens if sens_prev is None else 0.5 * (sens + sens_prev)
            else:
                x_next = simp_step(x, res.energy, target, cfg, problem)
        t_update = time.perf_counter()

        timings = dict(res.timings)
        timings["update"] = t_update - t_engine
        rec = IterRecord(
            iteration=it,
            compliance=float(res.compliance),
            volume_fraction=float(x[active].sum() / n_active),
            density=x.copy() if keep_fields else None,
            energy=np.array(res.energy) if keep_fields else None,
            coarse_energy=(None if res.coarse_energy is None or not keep_fields
                           else np.array(res.coarse_energy)),
            coarse_compliance=res.coarse_compliance,
            seconds=t_update - t0,
            timings=timings,
        )
        records.append(rec)
        if callback is not None:
            callback(rec)
        if x_next is None:
            break
        x = x_next

    return TOTrace(records, converged, x.copy(), problem.name, cfg.method)


def with_method(cfg: OptimizerConfig, method: str) -> OptimizerConfig:
    return replace(cfg, method=method)
