"""
Discrete-event simulation of the processor-sharing queue with Poisson
arrivals, and comparison of its fluid-scaled state with the fluid model.

With n jobs present every residual service time drops at rate 1/n. Instead
of touching every residual at each event the queue keeps the service V
attained by any job present since time zero; a job of size s arriving when
V = v is stored under the key v + s and departs when V reaches its key.
"""

from __future__ import annotations

import functools
import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from .config import settings, get_logger
from .distributions import ServiceDistribution
from .exceptions import InvalidScaleError, ValidationError
from .fluid_solver import FluidSolution, measure_at
from .measures import EmpiricalTail, GridMeasure, mass_and_moment
from .metrics import prohorov, total_variation
from .utils import parallel_map

logger = get_logger(__name__)

# Stream purposes for the (seed, replica, purpose) key
INITIAL, INTERARRIVAL, SERVICE = 0, 1, 2
BATCH = 4096


def make_stream(seed: int, replica: int, purpose: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, replica, purpose)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, replica, purpose])))


class _Buffered:
    """Hands out draws one at a time from batches."""

    def __init__(self, draw: Callable[[int], np.ndarray], batch: int = BATCH):
        self._draw = draw
        self._batch = batch
        self._values: list[float] = []
        self._index = 0

    def next(self) -> float:
        if self._index == len(self._values):
            self._values = self._draw(self._batch).tolist()
            self._index = 0
        value = self._values[self._index]
        self._index += 1
        return value


class ProcessorSharingQueue:
    def __init__(self):
        self.clock = 0.0
        self.attained = 0.0
        self.arrivals = 0
        self.departures = 0
        self._heap: list[tuple[float, int]] = []
        self._seq = 0

    @property
    def count(self) -> int:
        return len(self._heap)

    def add_job(self, size: float):
        if not size >= 0:
            raise ValidationError(f"Job size must be nonnegative, got {size}.")
        heapq.heappush(self._heap, (self.attained + size, self._seq))
        self._seq += 1
        self.arrivals += 1

    def next_departure(self) -> float:
        """Time until the next departure (inf when empty)."""
        if not self._heap:
            return math.inf
        return max(self._heap[0][0] - self.attained, 0.0) * len(self._heap)

    def advance(self, dt: float):
        """Serves every job present for dt time units without crossing a departure."""
        if dt < 0:
            raise ValidationError(f"Cannot advance by a negative time {dt}.")
        if dt > self.next_departure() * (1 + 1e-12) + 1e-12:
            raise ValidationError("Advance would pass a departure; pop it first.")
        if self._heap:
            self.attained += dt / len(self._heap)
        self.clock += dt

    def pop_departure(self) -> float:
        """Removes the job with the least residual; V is set to its key exactly."""
        key, _ = heapq.heappop(self._heap)
        self.attained = max(self.attained, key)
        self.departures += 1
        return key

    def residuals(self) -> np.ndarray:
        keys = np.fromiter((key for key, _ in self._heap), dtype=float, count=len(self._heap))
        return np.maximum(np.sort(keys) - self.attained, 0.0)

    def workload(self) -> float:
        return float(np.sum(self.residuals()))


@dataclass(frozen=True, eq=False)
class Trajectory:
    r: float
    snapshot_times: np.ndarray
    snapshots: list[GridMeasure]
    seed: int
    replica: int = 0
    residuals: list[np.ndarray] = field(default_factory=list)
    initial_count: int = 0
    # arrivals and departures since time zero, one entry per snapshot
    arrivals: list[int] = field(default_factory=list)
    departures: list[int] = field(default_factory=list)


def scaled_snapshot(residuals: np.ndarray, r: float, h: float, x_max: float) -> GridMeasure:
    """(1/r)·Σ δ_{residual}, smeared uniformly over grid cells; residuals past x_max form the tail."""
    n = int(round(x_max / h))
    edges = h * np.arange(n + 1)
    counts, _ = np.histogram(residuals, bins=edges)
    beyond = residuals[residuals > edges[-1]]
    cdf = np.concatenate(([0.0], np.cumsum(counts))) / r
    tail = EmpiricalTail(beyond, 1.0 / r) if beyond.size else None
    return GridMeasure(h=h, cdf=cdf, tail_mass=beyond.size / r, tail=tail)


def simulate(
    d: ServiceDistribution,
    xi: GridMeasure,
    r: float,
    snapshot_times,
    seed: int,
    replica: int = 0,
    h: float | None = None,
    x_max: float | None = None,
) -> Trajectory:
    """
    Runs the queue started from ⌊r⟨1, ξ⟩⌋ i.i.d. draws of ξ/⟨1, ξ⟩ with
    Poisson(α) arrivals, and records (1/r)·(residual measure) at clock r·t.
    """
    if not r >= 1:
        raise InvalidScaleError(f"The scale r must be at least 1, got {r}.")
    times = np.asarray(snapshot_times, dtype=float)
    if times.size == 0 or np.any(times < 0) or np.any(np.diff(times) < 0):
        raise ValidationError("Snapshot times must be nonempty, nonnegative and nondecreasing.")
    h = h or xi.h
    x_max = x_max or xi.x_max

    queue = ProcessorSharingQueue()
    initial_count = int(math.floor(r * xi.total_mass + 1e-9))
    for size in xi.draw(make_stream(seed, replica, INITIAL), initial_count):
        queue.add_job(float(size))
    queue.arrivals = 0

    inter_rng = make_stream(seed, replica, INTERARRIVAL)
    service_rng = make_stream(seed, replica, SERVICE)
    interarrivals = _Buffered(lambda k: inter_rng.exponential(1.0 / d.alpha, k))
    services = _Buffered(lambda k: d.sample(service_rng, k))
    next_arrival = interarrivals.next()

    snapshots, residuals, arrivals, departures = [], [], [], []
    for t in times:
        target = r * t
        while True:
            to_departure = queue.next_departure()
            to_arrival = next_arrival - queue.clock
            if min(to_departure, to_arrival) > target - queue.clock:
                queue.advance(max(target - queue.clock, 0.0))
                queue.clock = target
                break
            if to_departure <= to_arrival:
                queue.advance(to_departure)
                queue.pop_departure()
            else:
                queue.advance(to_arrival)
                queue.add_job(services.next())
                next_arrival += interarrivals.next()
        current = queue.residuals()
        residuals.append(current)
        arrivals.append(queue.arrivals)
        departures.append(queue.departures)
        snapshots.append(scaled_snapshot(current, r, h, x_max))

    logger.debug(
        f"Simulated r={r:g} seed={seed}: {initial_count} initial jobs, "
        f"{queue.arrivals} arrivals, {queue.departures} departures"
    )
    return Trajectory(r, times, snapshots, seed, replica, residuals, initial_count, arrivals, departures)


@functools.singledispatch
def workload_of(state, scale: float = 1.0) -> float:
    """Total residual work: Σ residuals, or r·⟨χ, snapshot⟩ for a scaled snapshot."""
    values = np.asarray(state, dtype=float)
    return float(np.sum(values))


@workload_of.register
def _(state: ProcessorSharingQueue, scale: float = 1.0) -> float:
    return state.workload()


@workload_of.register
def _(state: GridMeasure, scale: float = 1.0) -> float:
    if state.is_zero:
        return 0.0
    return scale * mass_and_moment(state, 1.0).value


def compare_to_fluid(traj: Trajectory, sol: FluidSolution) -> pd.DataFrame:
    """
    Prohorov distance (and TV when neither measure has mass past the grid)
    between each snapshot and the fluid state at the same time.
    """
    rows = []
    for t, snap in zip(traj.snapshot_times, traj.snapshots):
        fluid = measure_at(sol, t)
        rho = prohorov(snap, fluid)
        row = {"t": float(t), "rho": rho.value, "rho_error": rho.error, "tv": math.nan, "tv_error": math.nan}
        if snap.tail_mass == 0 and fluid.tail_mass == 0:
            tv = total_variation(snap, fluid)
            row.update(tv=tv.value, tv_error=tv.error)
        rows.append(row)
    return pd.DataFrame(rows, columns=["t", "rho", "rho_error", "tv", "tv_error"])


def _simulate_task(args) -> Trajectory:
    d, xi, r, times, seed, replica = args
    return simulate(d, xi, r, times, seed, replica)


def replicate(
    d: ServiceDistribution,
    xi: GridMeasure,
    r: float,
    times,
    seeds: Sequence[int],
    replica: int = 0,
    threads: int | None = None,
) -> list[Trajectory]:
    """Independent runs, one per seed, returned in seed order."""
    tasks = [(d, xi, r, np.asarray(times, dtype=float), int(seed), replica) for seed in seeds]
    return parallel_map(_simulate_task, tasks, threads)


def _distance_task(args) -> np.ndarray:
    d, xi, sol, r, times, seed = args
    return compare_to_fluid(simulate(d, xi, r, times, seed), sol)["rho"].to_numpy()


def median_distances(
    sol: FluidSolution,
    scales: Sequence[float],
    times,
    seeds: Sequence[int],
    threads: int | None = None,
) -> pd.DataFrame:
    """Median over seeds of ρ(snapshot, μ̄(t)) for every (r, t)."""
    times = np.asarray(times, dtype=float)
    tasks = [(sol.dist, sol.xi, sol, float(r), times, int(seed)) for r in scales for seed in seeds]
    logger.info(f"Running {len(tasks)} simulations for scales {list(scales)}...")
    distances = parallel_map(_distance_task, tasks, threads or settings.THREADS)
    rows = []
    for i, r in enumerate(scales):
        block = np.vstack(distances[i * len(seeds) : (i + 1) * len(seeds)])
        for j, t in enumerate(times):
            rows.append({"r": float(r), "t": float(t), "median_rho": float(np.median(block[:, j])), "seeds": len(seeds)})
    return pd.DataFrame(rows, columns=["r", "t", "median_rho", "seeds"])
