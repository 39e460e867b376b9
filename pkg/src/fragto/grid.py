"""Design domains, boundary conditions and the benchmark problem catalog.

Grids are stored row-major with shape ``(height, width)``; row 0 is the top
of the domain. Nodes live on a ``(height + 1, width + 1)`` lattice and the
vertical direction is positive upwards, so a downward load is negative.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HORIZONTAL = 0
VERTICAL = 1
TEMPERATURE = 0

ELASTIC = "elastic"
THERMAL = "thermal"

DEFAULT_RATIO = 16

CATALOG = (
    "cantilever_single",
    "cantilever_multi",
    "l_beam",
    "bridge",
    "thermal_small_sink",
    "thermal_large_sink",
)


class ProblemError(ValueError):
    """Raised for an unknown catalog name or an unusable domain size."""


@dataclass(frozen=True)
class DomainSpec:
    width: int
    height: int
    passive: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ProblemError(f"domain must be at least 2x2, got {self.width}x{self.height}")
        passive = np.asarray(self.passive, dtype=bool)
        if passive.shape != (self.height, self.width):
            raise ProblemError(
                f"passive mask shape {passive.shape} != {(self.height, self.width)}")
        passive.setflags(write=False)
        object.__setattr__(self, "passive", passive)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def active(self) -> np.ndarray:
        return ~self.passive

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    @property
    def node_shape(self) -> tuple[int, int]:
        return (self.height + 1, self.width + 1)


@dataclass(frozen=True)
class BoundaryCondition:
    """Fixed degrees of freedom as ``(node_row, node_col, direction)`` rows."""

    fixed: np.ndarray = field(repr=False)
    prescribed_value: float = 0.0

    def __post_init__(self):
        fixed = np.asarray(self.fixed, dtype=np.int64).reshape(-1, 3)
        fixed = np.unique(fixed, axis=0)
        fixed.setflags(write=False)
        object.__setattr__(self, "fixed", fixed)


@dataclass(frozen=True)
class LoadSpec:
    """Nodal point loads (elasticity) and/or a per-element source grid (thermal)."""

    nodes: np.ndarray = field(repr=False)
    directions: np.ndarray = field(repr=False)
    magnitudes: np.ndarray = field(repr=False)
    source: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.int64).reshape(-1, 2)
        dirs = np.asarray(self.directions, dtype=np.int64).reshape(-1)
        mags = np.asarray(self.magnitudes, dtype=np.float64).reshape(-1)
        if not (len(nodes) == len(dirs) == len(mags)):
            raise ProblemError("load nodes, directions and magnitudes differ in length")
        if not np.all(np.isfinite(mags)):
            raise ProblemError("load magnitudes must be finite")
        for arr in (nodes, dirs, mags):
            arr.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "directions", dirs)
        object.__setattr__(self, "magnitudes", mags)
        if self.source is not None:
            src = np.asarray(self.source, dtype=np.float64)
            if np.any(src < 0):
                raise ProblemError("thermal source must be nonnegative")
            src.setflags(write=False)
            object.__setattr__(self, "source", src)


@dataclass(frozen=True)
class TOProblem:
    domain: DomainSpec
    bc: BoundaryCondition
    loads: LoadSpec
    volume_fraction: float
    physics: str
    name: str

    def __post_init__(self):
        if not 0.0 < self.volume_fraction < 1.0:
            raise ProblemError(f"volume fraction must lie in (0, 1), got {self.volume_fraction}")
        if self.physics not in (ELASTIC, THERMAL):
            raise ProblemError(f"unknown physics {self.physics!r}")
        rows, cols = self.domain.node_shape
        for nodes in (self.bc.fixed[:, :2], self.loads.nodes):
            if len(nodes) and (nodes.min() < 0 or np.any(nodes[:, 0] >= rows)
                               or np.any(nodes[:, 1] >= cols)):
                raise ProblemError("boundary condition or load references a node off the grid")

    @property
    def width(self) -> int:
        return self.domain.width

    @property
    def height(self) -> int:
        return self.domain.height

    @property
    def target_volume(self) -> float:
        return self.volume_fraction * self.domain.n_active

    @property
    def dofs_per_node(self) -> int:
        return 2 if self.physics == ELASTIC else 1

    @property
    def loaded_elements(self) -> np.ndarray:
        """Active elements with a corner node carrying a nonzero point load."""
        h, w = self.domain.shape
        mask = np.zeros((h + 1, w + 1), dtype=bool)
        nodes = self.loads.nodes[self.loads.magnitudes != 0]
        mask[nodes[:, 0], nodes[:, 1]] = True
        touched = mask[:-1, :-1] | mask[:-1, 1:] | mask[1:, :-1] | mask[1:, 1:]
        return touched & self.domain.active


def _patch(rows, cols):
    r, c = np.meshgrid(np.asarray(rows), np.asarray(cols), indexing="ij")
    return np.column_stack([r.ravel(), c.ravel()])


def _centered(n_nodes, count):
    start = (n_nodes - count) // 2
    return np.arange(start, start + count)


def _distributed(nodes, direction, total):
    nodes = np.asarray(nodes).reshape(-1, 2)
    n = len(nodes)
    return nodes, np.full(n, direction), np.full(n, total / n)


def _merge_loads(*parts):
    nodes = np.concatenate([p[0] for p in parts])
    dirs = np.concatenate([p[1] for p in parts])
    mags = np.concatenate([p[2] for p in parts])
    return nodes, dirs, mags


def _clamp_all(nodes):
    nodes = np.asarray(nodes).reshape(-1, 2)
    return np.concatenate([
        np.column_stack([nodes, np.full(len(nodes), HORIZONTAL)]),
        np.column_stack([nodes, np.full(len(nodes), VERTICAL)]),
    ])


def make_problem(name: str, width: int, height: int, *, ratio: int = DEFAULT_RATIO,
                 volume_fraction: float | None = None) -> TOProblem:
    """Build a catalog problem on a ``width`` x ``height`` element grid.

    ``ratio`` is the coarsening ratio the problem will be used with; both
    dimensions must be divisible by it (pass ``ratio=1`` to skip the check).
    """
    if name not in CATALOG:
        raise ProblemError(f"unknown problem {name!r}; choose from {', '.join(CATALOG)}")
    if ratio < 1 or width % ratio or height % ratio:
        raise ProblemError(f"size {width}x{height} is not divisible by coarsening ratio {ratio}")

    L = width
    side = max(1, L // 16)
    rows_n, cols_n = height + 1, width + 1
    passive = np.zeros((height, width), dtype=bool)
    vf = 0.4
    physics = ELASTIC
    source = None

    if name == "cantilever_single":
        fixed = _clamp_all(_patch(np.arange(rows_n), [0]))
        loads = _distributed(_patch(np.arange(side), np.arange(cols_n - side, cols_n)),
                             VERTICAL, -1.0)
    elif name == "cantilever_multi":
        fixed = _clamp_all(_patch(np.arange(rows_n), [0]))
        mid_c = _centered(cols_n, side)
        mid_r = _centered(rows_n, side)
        loads = _merge_loads(
            _distributed(_patch(np.arange(side), mid_c), VERTICAL, -1.0),
            _distributed(_patch(mid_r, np.arange(cols_n - side, cols_n)), VERTICAL, -1.0),
            _distributed(_patch(np.arange(rows_n - side, rows_n), mid_c), VERTICAL, -1.0),
        )
    elif name == "l_beam":
        if width != height:
            raise ProblemError("l_beam needs a square domain")
        half = width // 2
        # upper-right quadrant is void: vertical arm on the left, horizontal arm below
        passive[:half, half:] = True
        fixed = _clamp_all(_patch([0], np.arange(half + 1)))
        loads = _distributed(_patch(np.arange(half, half + side), np.arange(cols_n - side, cols_n)),
                             VERTICAL, -1.0)
    elif name == "bridge":
        if width != 2 * height:
            raise ProblemError("bridge needs a 2:1 domain")
        pin = max(1, L // 32)
        fixed = _clamp_all(np.concatenate([
            _patch([rows_n - 1], np.arange(pin)),
            _patch([rows_n - 1], np.arange(cols_n - pin, cols_n)),
        ]))
        loads = _distributed(_patch([0], np.arange(cols_n)), VERTICAL, -1.0)
    else:
        if width != height:
            raise ProblemError(f"{name} needs a square domain")
        physics = THERMAL
        sink = max(1, L // 16) if name == "thermal_small_sink" else max(1, L // 2)
        if name == "thermal_large_sink":
            vf = 0.6
        sink_nodes = _patch([0], _centered(cols_n, sink))
        fixed = np.column_stack([sink_nodes, np.full(len(sink_nodes), TEMPERATURE)])
        loads = (np.zeros((0, 2)), np.zeros(0), np.zeros(0))
        source = np.ones((height, width))

    if volume_fraction is not None:
        vf = volume_fraction
    return TOProblem(
        domain=DomainSpec(width, height, passive),
        bc=BoundaryCondition(fixed),
        loads=LoadSpec(*loads, source=source),
        volume_fraction=vf,
        physics=physics,
        name=name,
    )


def mirror_symmetric_cantilever(width: int, height: int) -> TOProblem:
    """Cantilever with the load patch centred on the right edge.

    Symmetric about the horizontal mid-line, used to check that the optimizer
    preserves mirror symmetry. The patch has an odd node count so it is
    centred exactly.
    """
    rows_n, cols_n = height + 1, width + 1
    side = max(1, width // 16)
    if (rows_n - side) % 2:
        side += 1
    fixed = _clamp_all(_patch(np.arange(rows_n), [0]))
    loads = _distributed(_patch(_centered(rows_n, side), np.arange(cols_n - side, cols_n)),
                         VERTICAL, -1.0)
    return TOProblem(
        domain=DomainSpec(width, height, np.zeros((height, width), dtype=bool)),
        bc=BoundaryCondition(fixed),
        loads=LoadSpec(*loads),
        volume_fraction=0.4,
        physics=ELASTIC,
        name="cantilever_mirror",
    )


def coarsen_problem(problem: TOProblem, ratio: int) -> TOProblem:
    """The same physical problem on a mesh ``ratio`` times coarser per axis.

    Fixed nodes and point loads snap to the nearest coarse node (loads are
    summed so the total is preserved), thermal sources are summed per block,
    and a coarse element is passive only when its whole fine block is.
    """
    h, w = problem.height, problem.width
    if h % ratio or w % ratio:
        raise ProblemError(f"size {w}x{h} is not divisible by ratio {ratio}")
    ch, cw = h // ratio, w // ratio

    def snap(nodes):
        return np.floor(np.asarray(nodes) / ratio + 0.5).astype(np.int64)

    fixed = problem.bc.fixed.copy()
    fixed[:, :2] = snap(fixed[:, :2])

    ld = problem.loads
    nodes = snap(ld.nodes)
    if len(nodes):
        key = np.column_stack([nodes, ld.directions])
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        mags = np.zeros(len(uniq))
        np.add.at(mags, inv.ravel(), ld.magnitudes)
        keep = mags != 0
        uniq, mags = uniq[keep], mags[keep]
        nodes, dirs = uniq[:, :2], uniq[:, 2]
    else:
        dirs, mags = ld.directions, ld.magnitudes
    source = None
    if ld.source is not None:
        source = ld.source.reshape(ch, ratio, cw, ratio).sum(axis=(1, 3))

    passive = problem.domain.passive.reshape(ch, ratio, cw, ratio).all(axis=(1, 3))
    return TOProblem(
        domain=DomainSpec(cw, ch, passive),
        bc=BoundaryCondition(fixed, problem.bc.prescribed_value),
        loads=LoadSpec(nodes, dirs, mags, source=source),
        volume_fraction=problem.volume_fraction,
        physics=problem.physics,
        name=problem.name,
    )


def uniform_density(problem: TOProblem, *, solid: bool = False) -> np.ndarray:
    """Initial design: ``volume_fraction`` everywhere (SIMP) or 1.0 (BESO, ``solid=True``)."""
    value = 1.0 if solid else problem.volume_fraction
    x = np.full(problem.domain.shape, value)
    x[problem.domain.passive] = 0.0
    return x
