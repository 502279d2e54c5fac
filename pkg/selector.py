#!/usr/bin/env python3
"""
Measurement Plane Selection
Clustered sequential backward selection (CSBS) over a candidate multiset of planes,
an exhaustive oracle for small instances, and the focal-plane baseline.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from errors import InvalidArgumentError, InvalidStateError
from optics import SieveParams, SpectralSetup, focal_length

logger = logging.getLogger(__name__)

# Guard on the number of sub-multisets the exhaustive oracle will enumerate
EXHAUSTIVE_LIMIT = 1_000_000

# Relative decrease tolerated between consecutive elimination costs before it is an error
MONOTONIC_TOLERANCE = 1e-9

CostFunction = Callable[[np.ndarray], float]


@dataclass(frozen=True, eq=False)
class CandidateSet:
    """
    C candidate detector distances and the copies of each the selection starts from.

    Args:
        plane_distances: Strictly increasing positive distances (m)
        initial_multiplicity: Copies per plane, each >= 1 (defaults to one copy each)
    """
    plane_distances: Tuple[float, ...]
    initial_multiplicity: Optional[np.ndarray] = None

    def __post_init__(self):
        distances = tuple(float(d) for d in self.plane_distances)
        object.__setattr__(self, 'plane_distances', distances)
        if not distances:
            raise InvalidArgumentError("at least one candidate plane is required")
        if any(d <= 0 for d in distances):
            raise InvalidArgumentError(f"plane distances must be positive, got {distances}")
        if any(b <= a for a, b in zip(distances, distances[1:])):
            raise InvalidArgumentError("plane distances must be strictly increasing")

        if self.initial_multiplicity is None:
            counts = np.ones(len(distances), dtype=np.int64)
        else:
            counts = np.array(self.initial_multiplicity, dtype=np.int64)
        if counts.shape != (len(distances),):
            raise InvalidArgumentError(
                f"initial_multiplicity needs {len(distances)} entries, got shape {counts.shape}")
        if np.any(counts < 1):
            raise InvalidArgumentError(f"initial multiplicities must be >= 1, got {counts.tolist()}")
        counts.setflags(write=False)
        object.__setattr__(self, 'initial_multiplicity', counts)

    @classmethod
    def uniform(cls, min_distance: float, max_distance: float, count: int,
                copies: int = 1) -> 'CandidateSet':
        """`count` evenly spaced planes on [min_distance, max_distance], `copies` each."""
        if count < 1:
            raise InvalidArgumentError(f"count must be >= 1, got {count}")
        if count > 1 and not max_distance > min_distance:
            raise InvalidArgumentError("max_distance must exceed min_distance")
        distances = np.linspace(min_distance, max_distance, count)
        return cls(tuple(distances), np.full(count, copies, dtype=np.int64))

    @property
    def num_planes(self) -> int:
        return len(self.plane_distances)

    @property
    def total(self) -> int:
        return int(self.initial_multiplicity.sum())


@dataclass
class SelectionState:
    """
    Progress of a backward elimination.

    `history` holds (eliminated plane index, cost after the elimination) in order;
    `evaluations` counts trial evaluations only (the starting cost is not counted).
    """
    multiplicity: np.ndarray
    plane_distances: Tuple[float, ...]
    history: List[Tuple[int, float]] = field(default_factory=list)
    evaluations: int = 0
    initial_cost: float = math.nan

    @property
    def total(self) -> int:
        return int(self.multiplicity.sum())

    def cost_trace(self) -> List[float]:
        """Cost at every configuration size, starting from the full candidate set."""
        return [self.initial_cost] + [cost for _, cost in self.history]

    @property
    def final_cost(self) -> float:
        return self.history[-1][1] if self.history else self.initial_cost

    def selected_distances(self) -> List[float]:
        """Distance of every retained copy, ascending."""
        return [self.plane_distances[c] for c in np.repeat(np.arange(self.multiplicity.size),
                                                            self.multiplicity)]


def _incremental(cost_fn) -> bool:
    return all(hasattr(cost_fn, name) for name in ('reset', 'trial_without', 'remove'))


def _trial_costs(cost_fn, multiplicity: np.ndarray, active: List[int],
                 workers: int) -> List[float]:
    """Cost after removing one copy of each active plane, in the order of `active`."""
    incremental = _incremental(cost_fn)

    def trial(plane: int) -> float:
        if incremental:
            if workers > 1:
                return cost_fn.trial_without_copy(plane)
            return cost_fn.trial_without(plane)
        reduced = multiplicity.copy()
        reduced[plane] -= 1
        return float(cost_fn(reduced))

    if workers <= 1:
        return [trial(plane) for plane in active]

    costs = [math.nan] * len(active)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        future_to_slot = {executor.submit(trial, plane): slot for slot, plane in enumerate(active)}
        for future in as_completed(future_to_slot):
            costs[future_to_slot[future]] = future.result()
    return costs


def csbs(candidates: CandidateSet, target_m: int, cost_fn: CostFunction,
         workers: int = 1) -> SelectionState:
    """
    Greedy backward elimination down to `target_m` measurements.

    Each iteration tries removing one copy of every plane still present and drops the
    one whose removal raises the cost least; ties go to the lowest plane index.

    Args:
        candidates: Candidate planes and their starting copies
        target_m: Number of measurements to keep (M)
        cost_fn: Cost over a multiplicity vector. Objects exposing reset/trial_without/
            remove (GramCost) are driven incrementally; plain callables are re-evaluated.
        workers: > 1 evaluates the trials of one iteration in a thread pool; trials only
            read the live Gram field, so costs match a serial run bit for bit

    Returns:
        SelectionState with the final multiplicity, elimination history and trial count
    """
    if target_m < 1:
        raise InvalidArgumentError(f"target_m must be >= 1, got {target_m}")
    if target_m > candidates.total:
        raise InvalidArgumentError(
            f"target_m={target_m} exceeds the {candidates.total} available measurements")
    if workers < 1:
        raise InvalidArgumentError(f"workers must be >= 1, got {workers}")

    multiplicity = candidates.initial_multiplicity.copy()
    incremental = _incremental(cost_fn)
    initial_cost = cost_fn.reset(multiplicity) if incremental else float(cost_fn(multiplicity))
    state = SelectionState(multiplicity=multiplicity, plane_distances=candidates.plane_distances,
                           initial_cost=float(initial_cost))

    steps = candidates.total - target_m
    logger.info(f"🚀 CSBS: {candidates.total} -> {target_m} measurements over "
                f"{candidates.num_planes} planes ({steps} eliminations)")
    previous = state.initial_cost
    for step in range(1, steps + 1):
        active = [int(c) for c in np.flatnonzero(multiplicity)]
        costs = _trial_costs(cost_fn, multiplicity, active, workers)
        state.evaluations += len(active)
        if any(math.isnan(c) for c in costs):
            raise InvalidStateError(f"trial cost is NaN at elimination {step}")

        best = int(np.argmin(costs))
        plane, cost = active[best], float(costs[best])
        if cost < previous - MONOTONIC_TOLERANCE * abs(previous):
            raise InvalidStateError(
                f"cost decreased from {previous!r} to {cost!r} when removing plane {plane}")
        if incremental:
            cost_fn.remove(plane)
        multiplicity[plane] -= 1
        state.history.append((plane, cost))
        previous = cost

        logger.info(f"📍 Elimination {step}/{steps} ({100.0 * step / steps:.1f}%): "
                    f"plane {plane} (d={candidates.plane_distances[plane]:.6f} m), cost {cost:.6e}")

    logger.info(f"✅ CSBS done: {state.evaluations} cost evaluations, final cost {state.final_cost:.6e}")
    return state


def count_submultisets(multiplicity: Sequence[int], size: int) -> int:
    """Number of sub-multisets of exactly `size` elements (0 <= v_c <= multiplicity[c])."""
    ways = [1] + [0] * size
    for limit in multiplicity:
        updated = [0] * (size + 1)
        for total, count in enumerate(ways):
            if count:
                for take in range(min(int(limit), size - total) + 1):
                    updated[total + take] += count
        ways = updated
    return ways[size]


def _submultisets(limits: Sequence[int], size: int) -> Iterator[Tuple[int, ...]]:
    """Sub-multisets of `size` elements in lexicographic order of their vectors."""
    if not limits:
        if size == 0:
            yield ()
        return
    remaining = sum(limits[1:])
    for take in range(max(0, size - remaining), min(limits[0], size) + 1):
        for rest in _submultisets(limits[1:], size - take):
            yield (take,) + rest


class ExhaustiveResult(NamedTuple):
    multiplicity: np.ndarray
    cost: float
    evaluations: int


def exhaustive(candidates: CandidateSet, target_m: int, cost_fn: CostFunction,
               limit: int = EXHAUSTIVE_LIMIT) -> ExhaustiveResult:
    """
    Minimum-cost size-M sub-multiset by enumeration.

    Ties keep the lexicographically smallest multiplicity vector. Refuses when more
    than `limit` sub-multisets exist.
    """
    if target_m < 1 or target_m > candidates.total:
        raise InvalidArgumentError(
            f"target_m must be in [1, {candidates.total}], got {target_m}")
    limits = [int(m) for m in candidates.initial_multiplicity]
    count = count_submultisets(limits, target_m)
    if count > limit:
        raise InvalidArgumentError(
            f"exhaustive search over {count} configurations exceeds the limit of {limit}")

    logger.info(f"Exhaustive search over {count} configurations")
    best_vector, best_cost = None, math.inf
    evaluations = 0
    for vector in _submultisets(limits, target_m):
        cost = float(cost_fn(np.asarray(vector, dtype=np.int64)))
        evaluations += 1
        if cost < best_cost:
            best_vector, best_cost = vector, cost
    return ExhaustiveResult(np.asarray(best_vector, dtype=np.int64), best_cost, evaluations)


def focal_plane_config(sieve: SieveParams, setup: SpectralSetup, total_m: int,
                       candidates: CandidateSet) -> np.ndarray:
    """
    Baseline configuration with copies at the candidate plane nearest each f(λ_s).

    total_m is split evenly; the remainder goes to the shortest wavelengths first.
    """
    if total_m < setup.count:
        raise InvalidArgumentError(
            f"total_m={total_m} is smaller than the {setup.count} spectral components")
    base, remainder = divmod(total_m, setup.count)
    distances = np.asarray(candidates.plane_distances)
    multiplicity = np.zeros(candidates.num_planes, dtype=np.int64)
    for s, wavelength in enumerate(setup.wavelengths):
        nearest = int(np.argmin(np.abs(distances - focal_length(sieve, wavelength))))
        multiplicity[nearest] += base + (1 if s < remainder else 0)
    return multiplicity


def evaluation_count(num_planes: int, target_m: int, total: Optional[int] = None) -> int:
    """
    Trial evaluations CSBS performs going from `total` copies down to `target_m`.

    Exact for one copy per plane (Σ_{k=M+1}^{C} k); with repeated copies the count
    Σ_{k=M+1}^{T} min(C, k) is an upper bound.
    """
    total = num_planes if total is None else total
    if target_m > total:
        raise InvalidArgumentError(f"target_m={target_m} exceeds total={total}")
    return sum(min(num_planes, k) for k in range(target_m + 1, total + 1))
