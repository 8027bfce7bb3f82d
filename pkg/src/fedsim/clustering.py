"""Client profiling and density-based resource clustering.

Clients are profiled by how long a fixed reference workload takes.  The
simulator draws durations as ``speed_factor * workload_units * (1 + eps)``
with truncated Gaussian relative noise; real measurements can be supplied via
a durations file instead.

The duration sample is then smoothed with a Gaussian kernel density estimate
(Silverman's rule bandwidth by default) and split at the interior local
minima of the estimated density: each valley is a cluster boundary, so the
number of clusters is discovered from the data rather than fixed up front.
Every cluster finally receives a width-pruning rate ``t_fastest / t_cluster``
(the fastest cluster trains the full model at rate 1.0), optionally snapped
to a discrete ladder of supported rates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from fedsim.errors import ConfigError, DimensionError

GRID_POINTS = 512


@dataclass(frozen=True)
class ClientProfile:
    """One simulated device: identity, relative speed and local data size."""

    client_id: int
    speed_factor: float  # seconds per workload unit, > 0
    data_size: int = 0
    measured_duration: float | None = None

    def __post_init__(self):
        if self.speed_factor <= 0:
            raise ConfigError(
                f"client {self.client_id}: speed factor must be positive, "
                f"got {self.speed_factor}"
            )


@dataclass(frozen=True)
class DensityEstimate:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    """Clusters over the profiled clients, ordered fastest (0) to slowest."""

    durations: np.ndarray  # aligned with the profile order used for clustering
    cluster_of: np.ndarray  # cluster index per client
    boundaries: np.ndarray  # interior valley positions, ascending
    cluster_means: np.ndarray  # mean duration per cluster, ascending
    rates: np.ndarray | None = None

    @property
    def cluster_count(self) -> int:
        return int(self.cluster_means.size)

    @property
    def fastest_mean(self) -> float:
        return float(self.cluster_means[0])

    def members(self, cluster_id: int) -> np.ndarray:
        return np.flatnonzero(self.cluster_of == cluster_id)


def measure_durations(
    profiles: list[ClientProfile], workload_units: float, noise_sd: float, seed
) -> list[ClientProfile]:
    """Simulate profiling: ``speed * units * (1 + eps)``, eps ~ N(0, sd) clipped at 3 sd.

    ``noise_sd`` must stay below 1/3 so durations remain positive even at the
    clipping boundary.  Profiles that already carry a measured duration are
    re-measured (the old value is replaced).
    """

    if workload_units <= 0:
        raise ConfigError(f"workload units must be positive, got {workload_units}")
    if not (0.0 <= noise_sd < 1.0 / 3.0):
        raise ConfigError(f"profiling noise sd must lie in [0, 1/3), got {noise_sd}")
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, noise_sd, size=len(profiles)) if noise_sd > 0 else np.zeros(len(profiles))
    eps = np.clip(eps, -3.0 * noise_sd, 3.0 * noise_sd)
    return [
        replace(p, measured_duration=float(p.speed_factor * workload_units * (1.0 + e)))
        for p, e in zip(profiles, eps)
    ]


def save_durations(path, profiles: list[ClientProfile]) -> None:
    """Write ``client_id,duration_seconds`` lines (profiles must be measured)."""

    lines = ["# client_id,duration_seconds"]
    for p in profiles:
        if p.measured_duration is None:
            raise ConfigError(f"client {p.client_id} has no measured duration")
        lines.append(f"{p.client_id},{p.measured_duration!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_durations(path) -> dict[int, float]:
    """Parse a durations file written by :func:`save_durations` (or by hand)."""

    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"durations file {p} does not exist")
    out: dict[int, float] = {}
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ConfigError(f"{p}:{lineno}: expected 'client_id,duration', got {line!r}")
        try:
            client_id = int(parts[0])
            duration = float(parts[1])
        except ValueError as exc:
            raise ConfigError(f"{p}:{lineno}: {exc}") from exc
        if duration <= 0:
            raise ConfigError(f"{p}:{lineno}: duration must be positive, got {duration}")
        if client_id in out:
            raise ConfigError(f"{p}:{lineno}: duplicate client id {client_id}")
        out[client_id] = duration
    if not out:
        raise ConfigError(f"{p}: no duration entries found")
    return out


def apply_durations(profiles: list[ClientProfile], durations: dict[int, float]) -> list[ClientProfile]:
    """Attach file-loaded durations to matching profiles; ids must line up."""

    missing = [p.client_id for p in profiles if p.client_id not in durations]
    if missing:
        raise ConfigError(f"durations file lacks entries for clients {missing}")
    extra = sorted(set(durations) - {p.client_id for p in profiles})
    if extra:
        raise ConfigError(f"durations file names unknown clients {extra}")
    return [replace(p, measured_duration=durations[p.client_id]) for p in profiles]


def gaussian_kernel(u: np.ndarray) -> np.ndarray:
    """The standard normal density ``exp(-u^2/2) / sqrt(2 pi)``."""

    u = np.asarray(u, dtype=np.float64)
    return np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)


def silverman_bandwidth(values: np.ndarray) -> float:
    """``0.9 * min(std, iqr/1.34) * n^(-1/5)`` with a positive floor.

    Degenerate samples (zero spread) fall back to a floor proportional to the
    sample magnitude so the estimate stays well defined.
    """

    values = np.asarray(values, dtype=np.float64)
    n = values.size
    if n < 1:
        raise DimensionError("cannot estimate a bandwidth from an empty sample")
    floor = 1e-3 * max(1.0, float(np.abs(values).max(initial=0.0)))
    if n == 1:
        return floor
    std = float(np.std(values, ddof=1))
    iqr = float(np.percentile(values, 75) - np.percentile(values, 25))
    candidates = [c for c in (std, iqr / 1.34) if c > 0]
    if not candidates:
        return floor
    return max(0.9 * min(candidates) * n ** (-0.2), floor)


def kde_density(durations: np.ndarray, bandwidth: float | None = None) -> DensityEstimate:
    """Gaussian KDE on a 512-point grid spanning ``[min - 3h, max + 3h]``."""

    x = np.asarray(durations, dtype=np.float64)
    if x.size < 1:
        raise DimensionError("cannot estimate a density from an empty sample")
    if bandwidth is None:
        bandwidth = silverman_bandwidth(x)
    if bandwidth <= 0:
        raise ConfigError(f"bandwidth must be positive, got {bandwidth}")
    h = float(bandwidth)
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, GRID_POINTS)
    density = gaussian_kernel((grid[:, None] - x[None, :]) / h).mean(axis=1) / h
    return DensityEstimate(grid, density, h)


def _valley_runs(density: np.ndarray) -> list[tuple[int, int]]:
    """Index runs ``[a, b]`` of interior local minima (plateaus as one run)."""

    runs = []
    i = 1
    last = density.size - 1
    while i < last:
        j = i
        while j < last and density[j + 1] == density[i]:
            j += 1
        # run [i, j] of equal density, strictly interior
        if density[i - 1] > density[i] and j < last and density[j + 1] > density[j]:
            runs.append((i, j))
        i = j + 1
    return runs


def _interior_minima(density: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Positions of interior local minima; plateau minima use their midpoint."""

    return np.asarray(
        [0.5 * (grid[a] + grid[b]) for a, b in _valley_runs(density)], dtype=np.float64
    )


def _deep_minima(density: np.ndarray, grid: np.ndarray, depth_ratio: float) -> np.ndarray:
    """Interior minima whose valley dips below ``depth_ratio`` of both flanks."""

    runs = _valley_runs(density)
    kept = []
    for k, (a, b) in enumerate(runs):
        left_start = runs[k - 1][1] if k > 0 else 0
        right_end = runs[k + 1][0] if k + 1 < len(runs) else density.size - 1
        left_peak = density[left_start : a + 1].max()
        right_peak = density[b : right_end + 1].max()
        if density[a] <= depth_ratio * min(left_peak, right_peak):
            kept.append(0.5 * (grid[a] + grid[b]))
    return np.asarray(kept, dtype=np.float64)


def cluster_by_density(estimate: DensityEstimate, durations: np.ndarray) -> ClusterAssignment:
    """Split clients at the valleys of the density estimate.

    Clients whose duration falls exactly on a boundary join the lower
    (faster) cluster.  Valley intervals that contain no client are dropped
    and cluster ids are renumbered, so cluster means are strictly increasing.
    """

    durations = np.asarray(durations, dtype=np.float64)
    if durations.size < 1:
        raise DimensionError("cannot cluster an empty duration sample")
    boundaries = _interior_minima(estimate.density, estimate.grid)
    raw = np.searchsorted(boundaries, durations, side="left")
    # renumber to occupied valley intervals only, keeping duration order
    occupied = np.unique(raw)
    remap = {int(old): new for new, old in enumerate(occupied)}
    cluster_of = np.array([remap[int(c)] for c in raw], dtype=np.int64)
    # the effective boundary between consecutive occupied intervals is the
    # last valley below the upper interval
    kept_boundaries = np.array(
        [boundaries[occupied[j + 1] - 1] for j in range(occupied.size - 1)],
        dtype=np.float64,
    )
    means = np.array(
        [durations[cluster_of == c].mean() for c in range(occupied.size)], dtype=np.float64
    )
    return ClusterAssignment(durations, cluster_of, kept_boundaries, means)


def assign_pruning_rates(
    assignment: ClusterAssignment, ladder: list[float] | None = None
) -> ClusterAssignment:
    """Rate per cluster: ``fastest_mean / cluster_mean``, optionally snapped.

    The fastest cluster always gets exactly 1.0.  With a ladder, each rate
    snaps to the nearest ladder value; ties prefer the smaller value.
    """

    rates = assignment.fastest_mean / assignment.cluster_means
    if ladder is not None:
        steps = np.sort(np.asarray(ladder, dtype=np.float64))
        if steps.size == 0 or steps[0] <= 0 or steps[-1] > 1.0:
            raise ConfigError(f"rate ladder values must lie in (0, 1], got {ladder}")
        snapped = []
        for r in rates:
            dist = np.abs(steps - r)
            best = dist.min()
            # ties prefer the smaller ladder value: first index at minimal distance
            snapped.append(float(steps[int(np.flatnonzero(dist == best)[0])]))
        rates = np.array(snapped)
    return replace(assignment, rates=rates)


MIN_REFINE_SIZE = 6
REFINE_DEPTH_RATIO = 0.45


def _assign_to_boundaries(values: np.ndarray, boundaries: np.ndarray) -> np.ndarray:
    """Interval index per value; a value exactly on a boundary goes below it."""

    return np.searchsorted(boundaries, values, side="left")


def refine_clusters(
    durations: np.ndarray, bandwidth: float | None = None
) -> ClusterAssignment:
    """Hierarchical valley clustering: split, then re-estimate within clusters.

    A single sample-wide bandwidth oversmooths when cluster scales differ a
    lot (e.g. durations of 2 s and 30 s in one sample make Silverman's rule
    merge nearby modes): the first pass is the plain valley split of
    :func:`cluster_by_density`, and each resulting cluster is then
    re-estimated on its own and split again, until nothing splits further.

    Two guards keep refinement from shredding genuine clusters, whose small
    subsamples produce unstable density estimates: clusters smaller than
    ``MIN_REFINE_SIZE`` are never re-examined, and a refinement valley only
    counts when its density dips below ``REFINE_DEPTH_RATIO`` of both
    flanking peaks.  Every boundary reported is a valley of some
    (sub)sample's density estimate; an explicit ``bandwidth`` is reused at
    every level.
    """

    durations = np.asarray(durations, dtype=np.float64)
    if durations.size < 1:
        raise DimensionError("cannot cluster an empty duration sample")
    first = cluster_by_density(kde_density(durations, bandwidth), durations)
    boundaries = [float(b) for b in first.boundaries]
    queue = [np.flatnonzero(first.cluster_of == c) for c in range(first.cluster_count)]
    final_groups: list[np.ndarray] = []
    while queue:
        idx = queue.pop()
        vals = durations[idx]
        if idx.size < MIN_REFINE_SIZE or np.unique(vals).size < 2:
            final_groups.append(idx)
            continue
        estimate = kde_density(vals, bandwidth)
        deep = _deep_minima(estimate.density, estimate.grid, REFINE_DEPTH_RATIO)
        if deep.size == 0:
            final_groups.append(idx)
            continue
        parts = _assign_to_boundaries(vals, deep)
        occupied = np.unique(parts)
        if occupied.size == 1:
            final_groups.append(idx)
            continue
        boundaries.extend(float(deep[occupied[j + 1] - 1]) for j in range(occupied.size - 1))
        for c in occupied:
            queue.append(idx[parts == c])
    final_groups.sort(key=lambda g: float(durations[g].mean()))
    cluster_of = np.empty(durations.size, dtype=np.int64)
    for cid, group in enumerate(final_groups):
        cluster_of[group] = cid
    means = np.array([durations[g].mean() for g in final_groups])
    return ClusterAssignment(
        durations, cluster_of, np.sort(np.asarray(boundaries)), means
    )


def cluster_profiles(
    profiles: list[ClientProfile],
    bandwidth: float | None = None,
    ladder: list[float] | None = None,
    refine: bool = True,
) -> ClusterAssignment:
    """Measured profiles -> density clusters -> pruning rates, in one call.

    ``refine=True`` (the default) applies :func:`refine_clusters`;
    ``refine=False`` stops after a single sample-wide density split.
    """

    durations = []
    for p in profiles:
        if p.measured_duration is None:
            raise ConfigError(f"client {p.client_id} has no measured duration")
        durations.append(p.measured_duration)
    values = np.asarray(durations)
    if refine:
        assignment = refine_clusters(values, bandwidth)
    else:
        assignment = cluster_by_density(kde_density(values, bandwidth), values)
    return assign_pruning_rates(assignment, ladder)


def format_cluster_report(assignment: ClusterAssignment, profiles: list[ClientProfile] | None = None) -> str:
    """Human-readable summary: one line per cluster plus the boundary list."""

    lines = [
        f"clusters: {assignment.cluster_count}",
        "boundaries: "
        + (", ".join(f"{b:.6g}" for b in assignment.boundaries) or "(none)"),
    ]
    for c in range(assignment.cluster_count):
        members = assignment.members(c)
        ids = (
            [profiles[i].client_id for i in members] if profiles is not None else list(members)
        )
        rate = f"{assignment.rates[c]:.4f}" if assignment.rates is not None else "-"
        lines.append(
            f"cluster {c}: size={members.size} mean_duration={assignment.cluster_means[c]:.6g}s "
            f"rate={rate} clients={ids}"
        )
    return "\n".join(lines)
