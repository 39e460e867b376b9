"""Workflows: harvest training data, train, lift fields inside TO, evaluate."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import fem
from .fragmap import (FragmentBatch, FragmentSpec, NormalizationFactors, ScaleSpec,
                      coarsen_density, defragment, denormalize, estimate_normalization,
                      fragment, normalize)
from .grid import TOProblem, coarsen_problem
from .mapnet import MapNetModel, TrainConfig, build_model, train
from .topopt import (BESO_FLOOR, EngineResult, FemEngine, OptimizerConfig, TOTrace,
                     beso_step, run_to, sensitivity_filter, simp_step)

log = logging.getLogger(__name__)

NORM_PROBE_ITERS = 5


@dataclass
class Dataset:
    """Per-iteration (coarse energy, fine density, fine energy) triples of one TO run."""

    problem: str
    method: str
    scale: ScaleSpec
    coarse: np.ndarray
    density: np.ndarray
    fine: np.ndarray
    iterations: np.ndarray
    norm: NormalizationFactors | None = None

    def __post_init__(self):
        n = len(self.iterations)
        if not (len(self.coarse) == len(self.density) == len(self.fine) == n):
            raise ValueError("dataset arrays differ in sample count")
        s = self.scale
        if n and (self.coarse.shape[1:] != (s.coarse_h, s.coarse_w)
                  or self.density.shape[1:] != (s.fine_h, s.fine_w)
                  or self.fine.shape[1:] != (s.fine_h, s.fine_w)):
            raise ValueError("dataset arrays do not match the scale spec")

    def __len__(self):
        return len(self.iterations)

    def _take(self, mask):
        return replace(self, coarse=self.coarse[mask], density=self.density[mask],
                       fine=self.fine[mask], iterations=self.iterations[mask])

    def first(self, n: int) -> "Dataset":
        return self._take(slice(0, n))

    def window(self, after: int, upto: int | None = None) -> "Dataset":
        """Samples with ``after < iteration <= upto``."""
        it = self.iterations
        mask = it > after
        if upto is not None:
            mask &= it <= upto
        return self._take(mask)


class HarvestEngine(FemEngine):
    """Fine FEM plus the coarse FEM of the coarsened density, as training data needs."""

    def __init__(self, problem, scale: ScaleSpec, penal=3.0, solver="direct"):
        super().__init__(problem, penal, solver)
        self.scale = scale
        self.coarse_problem = coarsen_problem(problem, scale.ratio)

    def __call__(self, density):
        res = super().__call__(density)
        t0 = time.perf_counter()
        sol = fem.assemble_and_solve(self.coarse_problem, coarsen_density(density, self.scale),
                                     self.penal, solver="direct")
        res.coarse_energy = sol.energy
        res.coarse_compliance = sol.compliance
        res.timings["coarse_fem"] = time.perf_counter() - t0
        return res


def generate_dataset(problem: TOProblem, cfg: OptimizerConfig, n_iters: int,
                     scale: ScaleSpec | None = None, *, callback=None) -> Dataset:
    """Run fine FEM-TO for exactly ``n_iters`` iterations and keep every field."""
    if n_iters < 1 or n_iters > cfg.max_iters:
        raise ValueError(f"n_iters must lie in [1, {cfg.max_iters}], got {n_iters}")
    if scale is None:
        scale = ScaleSpec(problem.width, problem.height)
    if (scale.fine_w, scale.fine_h) != (problem.width, problem.height):
        raise ValueError("scale spec does not match the problem size")
    engine = HarvestEngine(problem, scale, cfg.penal, cfg.solver)
    trace = run_to(problem, cfg, engine, n_iters=n_iters, callback=callback)
    return dataset_from_trace(trace, scale, cfg.method)


def dataset_from_trace(trace: TOTrace, scale: ScaleSpec, method: str) -> Dataset:
    recs = trace.records
    return Dataset(
        problem=trace.problem_name,
        method=method,
        scale=scale,
        coarse=np.stack([r.coarse_energy for r in recs]),
        density=np.stack([r.density for r in recs]),
        fine=np.stack([r.energy for r in recs]),
        iterations=np.array([r.iteration for r in recs]),
    )


def estimate_factors(data: Dataset, n: int = NORM_PROBE_ITERS) -> NormalizationFactors:
    head = data.first(min(n, len(data)))
    return NormalizationFactors(estimate_normalization(head.coarse),
                                estimate_normalization(head.fine))


def fragment_dataset(data: Dataset, fspec: FragmentSpec, norm: NormalizationFactors
                     ) -> FragmentBatch:
    """Normalized fragments of every sample, sample-major."""
    return FragmentBatch.concat(
        fragment(normalize(c, norm.coarse), d, normalize(f, norm.fine), fspec)
        for c, d, f in zip(data.coarse, data.density, data.fine))


def train_mapnet(data: Dataset, fspec: FragmentSpec, tcfg: TrainConfig, *,
                 norm: NormalizationFactors | None = None, channels_base: int = 16,
                 callback=None):
    """Fragment ``data`` and fit a fresh network. Returns ``(model, loss history)``."""
    if fspec.ratio != data.scale.ratio:
        raise ValueError("fragment ratio differs from the dataset's coarsening ratio")
    if norm is None:
        norm = data.norm or estimate_factors(data)
    batch = fragment_dataset(data, fspec, norm)
    model = build_model(fspec, channels_base, seed=tcfg.seed, norm=norm)
    return train(model, batch, tcfg, callback=callback)


class LiftedEngine:
    """Coarsen, solve coarse, fragment, map, defragment: the learned energy provider."""

    def __init__(self, model: MapNetModel, problem: TOProblem, scale: ScaleSpec,
                 fspec: FragmentSpec, penal: float = 3.0):
        if tuple(model.fingerprint) != tuple(fspec.fingerprint):
            raise ValueError(
                f"model fingerprint {model.fingerprint} != fragment spec {fspec.fingerprint}")
        if (scale.fine_w, scale.fine_h) != (problem.width, problem.height):
            raise ValueError("scale spec does not match the problem size")
        if scale.ratio != fspec.ratio:
            raise ValueError("scale and fragment specs disagree on the ratio")
        self.model = model
        self.problem = problem
        self.scale = scale
        self.fspec = fspec
        self.penal = penal
        self.coarse_problem = coarsen_problem(problem, scale.ratio)

    def __call__(self, density):
        t = time.perf_counter
        t0 = t()
        sol = fem.assemble_and_solve(self.coarse_problem, coarsen_density(density, self.scale),
                                     self.penal, solver="direct")
        t1 = t()
        norm = self.model.norm
        batch = fragment(normalize(sol.energy, norm.coarse), density, None, self.fspec)
        t2 = t()
        pred = self.model.predict(batch.coarse, batch.density)
        t3 = t()
        field_ = denormalize(defragment(pred, batch.origins, self.fspec,
                                        self.scale.fine_w, self.scale.fine_h), norm.fine)
        field_[self.problem.domain.passive] = 0.0
        t4 = t()
        return EngineResult(
            energy=field_,
            compliance=float(field_.sum()),
            coarse_energy=sol.energy,
            coarse_compliance=sol.compliance,
            timings={"fem": t1 - t0, "fragment": (t2 - t1) + (t4 - t3), "network": t3 - t2},
        )


def lifted_energy_provider(model, problem, scale, fspec, penal=3.0) -> LiftedEngine:
    return LiftedEngine(model, problem, scale, fspec, penal)


def probe_normalization(problem: TOProblem, cfg: OptimizerConfig, scale: ScaleSpec,
                        n: int = NORM_PROBE_ITERS) -> NormalizationFactors:
    """Factors from the first ``n`` fine FEM-TO iterations.

    This is the only place a fine-scale solve happens in a lifted run, and it
    is logged as such.
    """
    log.warning("auto-norm: running %d fine-scale FEM iterations on %s", n, problem.name)
    return estimate_factors(generate_dataset(problem, replace(cfg, max_iters=max(n, cfg.max_iters)),
                                             n, scale), n)


def run_lifted_to(model: MapNetModel, problem: TOProblem, cfg: OptimizerConfig,
                  fspec: FragmentSpec, *, norm: NormalizationFactors | None = None,
                  auto_norm: bool = False, keep_fields: bool = False, callback=None) -> TOTrace:
    """MapNet-TO on ``problem`` with the model's factors unless overridden."""
    scale = ScaleSpec(problem.width, problem.height, fspec.ratio)
    if auto_norm:
        norm = probe_normalization(problem, cfg, scale)
    if norm is not None:
        model = replace(model.copy(), norm=norm)
    engine = LiftedEngine(model, problem, scale, fspec, cfg.penal)
    return run_to(problem, cfg, engine, keep_fields=keep_fields, callback=callback)


def fine_compliance(problem: TOProblem, density: np.ndarray, penal: float = 3.0) -> float:
    """Ground-truth compliance of a design (used to score lifted runs)."""
    return fem.assemble_and_solve(problem, density, penal, solver="direct").compliance


# ---------------------------------------------------------------- evaluation

def l2_over_n(pred, target) -> float:
    """``sqrt(sum((pred - target)^2)) / N`` with ``N`` the number of compared values."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.sqrt(np.sum(d * d)) / d.size) if d.size else 0.0


@dataclass
class EvalReport:
    l2n_fragment: float
    l2n_defrag: float
    plain_mse_fragment: float
    plain_mse_defrag: float
    per_sample: np.ndarray
    n_fragments: int
    fragments_per_sample: int
    timings: dict = field(default_factory=dict)
    total_seconds: float = 0.0
    normalized: bool = True


def evaluate(model: MapNetModel, held_out: Dataset, fspec: FragmentSpec) -> EvalReport:
    """Errors on normalized values, at fragment level and on defragmented fields."""
    if len(held_out) == 0:
        raise ValueError("held-out dataset is empty")
    norm = model.norm
    clock = time.perf_counter
    t_start = clock()
    timings = {"fragment": 0.0, "network": 0.0, "defragment": 0.0, "metrics": 0.0}
    sq_frag = sq_def = 0.0
    n_frag_vals = n_def_vals = 0
    n_fragments = 0
    per_sample = []
    s = held_out.scale
    for c, d, f in zip(held_out.coarse, held_out.density, held_out.fine):
        t0 = clock()
        fine_n = normalize(f, norm.fine)
        batch = fragment(normalize(c, norm.coarse), d, fine_n, fspec)
        t1 = clock()
        pred = model.predict(batch.coarse, batch.density)
        t2 = clock()
        field_ = defragment(pred, batch.origins, fspec, s.fine_w, s.fine_h)
        t3 = clock()
        e_frag = pred - batch.fine
        e_def = field_ - fine_n
        sq_frag += float(np.sum(e_frag * e_frag))
        sq_def += float(np.sum(e_def * e_def))
        n_frag_vals += e_frag.size
        n_def_vals += e_def.size
        n_fragments += len(batch)
        per_sample.append(float(np.mean(e_def * e_def)))
        t4 = clock()
        timings["fragment"] += t1 - t0
        timings["network"] += t2 - t1
        timings["defragment"] += t3 - t2
        timings["metrics"] += t4 - t3
    total = clock() - t_start
    return EvalReport(
        l2n_fragment=float(np.sqrt(sq_frag)) / n_frag_vals,
        l2n_defrag=float(np.sqrt(sq_def)) / n_def_vals,
        plain_mse_fragment=sq_frag / n_frag_vals,
        plain_mse_defrag=sq_def / n_def_vals,
        per_sample=np.array(per_sample),
        n_fragments=n_fragments,
        fragments_per_sample=n_fragments // len(held_out),
        timings=timings,
        total_seconds=total,
    )


def detect_nonuniqueness(batch: FragmentBatch, tol: float = 1e-12) -> list:
    """Index pairs with matching inputs (coarse and density within ``tol``)
    whose targets differ by more than ``tol`` somewhere."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    if batch.fine is None or len(batch) < 2:
        return []
    n = len(batch)
    x = np.concatenate([batch.coarse.reshape(n, -1), batch.density.reshape(n, -1)], axis=1)
    y = batch.fine.reshape(n, -1)
    key = x[:, 0]
    order = np.argsort(key, kind="stable")
    sorted_key = key[order]
    upper = np.searchsorted(sorted_key, sorted_key + tol, side="right")
    pairs = []
    for pos in range(n):
        hi = upper[pos]
        if hi <= pos + 1:
            continue
        i = order[pos]
        cand = order[pos + 1:hi]
        same_in = np.all(np.abs(x[cand] - x[i]) <= tol, axis=1)
        cand = cand[same_in]
        if cand.size == 0:
            continue
        differ = np.any(np.abs(y[cand] - y[i]) > tol, axis=1)
        for j in cand[differ]:
            pairs.append((min(i, j), max(i, j)))
    return sorted(set((int(a), int(b)) for a, b in pairs))


def _ablation_job(train_data: Dataset, test: Dataset, fspec: FragmentSpec,
                  norm: NormalizationFactors, tcfg: TrainConfig, channels_base: int) -> dict:
    t1 = time.perf_counter()
    model, losses = train_mapnet(train_data, fspec, tcfg, norm=norm, channels_base=channels_base)
    t2 = time.perf_counter()
    rep = evaluate(model, test, fspec)
    nonunique = len(detect_nonuniqueness(fragment_dataset(train_data, fspec, norm)))
    n = len(train_data)
    return dict(
        ratio=fspec.ratio, crop_scale=fspec.crop_scale, coarse_patch=fspec.coarse_patch,
        n_train_iters=n, overlap=int(fspec.overlap), seed=tcfg.seed,
        fragments_per_sample=rep.fragments_per_sample,
        n_train_fragments=n * rep.fragments_per_sample,
        l2n_fragment=rep.l2n_fragment, l2n_defrag=rep.l2n_defrag,
        plain_mse_defrag=rep.plain_mse_defrag, final_loss=float(losses[-1]),
        nonunique_pairs=nonunique, t_train=t2 - t1, t_eval=rep.total_seconds,
    )


def ablation_suite(problem: TOProblem, scales, crops, ns, *, cfg: OptimizerConfig,
                   tcfg: TrainConfig, test_iters: int = 40, overlap: bool = False,
                   seeds=(0,), channels_base: int = 16, datasets: dict | None = None,
                   workers: int = 1) -> list:
    """Train/evaluate over ``scales x crops x ns x seeds``; one dict per configuration.

    ``scales`` are coarsening ratios. Each ratio harvests one run of
    ``max(ns) + test_iters`` iterations; the test window is the iterations
    after ``max(ns)``. ``datasets`` may pre-supply harvested runs per ratio.
    With ``workers > 1`` configurations train in separate processes; rows
    come back in the same order either way.
    """
    scales, crops, ns = list(scales), list(crops), list(ns)
    if not (scales and crops and ns):
        return []
    n_max = max(ns)
    jobs, gen_times = [], []
    for ratio in scales:
        scale = ScaleSpec(problem.width, problem.height, ratio)
        t0 = time.perf_counter()
        data = (datasets or {}).get(ratio)
        if data is None:
            run_cfg = replace(cfg, max_iters=max(cfg.max_iters, n_max + test_iters))
            data = generate_dataset(problem, run_cfg, n_max + test_iters, scale)
        t_gen = time.perf_counter() - t0
        test = data.window(n_max)
        for crop in crops:
            fspec = FragmentSpec.from_crop_scale(scale.coarse_w, crop, ratio, overlap)
            for n in ns:
                train_data = data.first(n)
                norm = estimate_factors(train_data)
                for seed in seeds:
                    jobs.append((train_data, test, fspec, norm, replace(tcfg, seed=seed),
                                 channels_base))
                    gen_times.append(t_gen)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            rows = list(pool.map(_ablation_job, *zip(*jobs)))
    else:
        rows = [_ablation_job(*job) for job in jobs]
    for row, t_gen in zip(rows, gen_times):
        row["t_generate"] = t_gen
    return rows


# ---------------------------------------------------------------- timing

BENCH_PHASES = ("fem", "network", "fragment", "update", "total")


def bench_iteration(problem: TOProblem, cfg: OptimizerConfig, model: MapNetModel,
                    fspec: FragmentSpec, repeats: int = 5, density=None) -> list:
    """Median per-phase seconds of one TO iteration under each engine.

    Returns ``len(BENCH_PHASES) * 2`` rows ``(engine, phase, median_seconds)``.
    """
    if repeats < 1:
        raise ValueError("repeats must be positive")
    scale = ScaleSpec(problem.width, problem.height, fspec.ratio)
    engines = {"fem": FemEngine(problem, cfg.penal, cfg.solver),
               "mapnet": LiftedEngine(model, problem, scale, fspec, cfg.penal)}
    if density is None:
        density = np.where(problem.domain.active,
                           1.0 if cfg.method == "beso" else problem.volume_fraction, 0.0)
    radius = cfg.radius_for(problem)
    active = problem.domain.active
    rows = []
    for name, engine in engines.items():
        samples = {p: [] for p in BENCH_PHASES}
        for _ in range(repeats):
            t0 = time.perf_counter()
            res = engine(density)
            t1 = time.perf_counter()
            if cfg.method == "beso":
                sens = sensitivity_filter(res.energy, radius, density, density_weighted=False,
                                          active=active)
                vol = max(active.sum() * (1 - cfg.beso_evolution_rate), problem.target_volume)
                beso_step(density, [sens], vol, cfg, problem)
            else:
                simp_step(density, res.energy, problem.target_volume, cfg, problem)
            t2 = time.perf_counter()
            samples["fem"].append(res.timings.get("fem", 0.0))
            samples["network"].append(res.timings.get("network", 0.0))
            samples["fragment"].append(res.timings.get("fragment", 0.0))
            samples["update"].append(t2 - t1)
            samples["total"].append(t2 - t0)
        for phase in BENCH_PHASES:
            rows.append((name, phase, float(np.median(samples[phase]))))
    return rows


__all__ = [
    "BESO_FLOOR", "Dataset", "EvalReport", "HarvestEngine", "LiftedEngine", "ablation_suite",
    "bench_iteration", "dataset_from_trace", "detect_nonuniqueness", "estimate_factors",
    "evaluate", "fine_compliance", "fragment_dataset", "generate_dataset",
    "lifted_energy_provider", "l2_over_n", "probe_normalization", "run_lifted_to",
    "train_mapnet",
]
