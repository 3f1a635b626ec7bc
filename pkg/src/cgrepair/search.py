"""Counterexample search: a sound sampling falsifier and exhaustive grid verification.

Both searchers only ever report initial states whose rollout was actually
simulated and found unsafe, so every reported counterexample re-confirms.
The grid verifier is complete with respect to the finite grid it checks,
never beyond it; callers should report "safe on grid" rather than an
unconditional safety claim.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field

import numpy as np

from .cmdp import Environment, HorizonConfig, Trajectory, is_safe, safety_value, simulate

SAFE_ON_GRID = "safe_on_grid"
UNSAFE = "unsafe"


class GridCapExceeded(ValueError):
    """The requested resolution would enumerate more grid points than allowed."""

    def __init__(self, required: int, cap: int):
        super().__init__(
            f"grid would contain {required} points, exceeding the cap of {cap}; "
            f"coarsen the resolution or raise the cap to at least {required}"
        )
        self.required = required
        self.cap = cap


@dataclass(frozen=True)
class SearchConfig:
    """Knobs for the falsifier and grid verifier."""

    falsify_budget: int = 256
    falsify_batch: int = 16
    descent_steps: int = 12
    descent_top_k: int = 8
    descent_step_frac: float = 0.05
    dedup_radius: float = 1e-3
    grid_resolution: float = 0.1
    grid_cap: int = 10_000_000
    max_reported: int = 256

    def __post_init__(self):
        if self.falsify_budget < 1:
            raise ValueError(f"falsify_budget must be >= 1, got {self.falsify_budget}")
        if self.falsify_batch < 1:
            raise ValueError(f"falsify_batch must be >= 1, got {self.falsify_batch}")
        if self.descent_steps < 0 or self.descent_top_k < 0:
            raise ValueError("descent_steps and descent_top_k must be nonnegative")
        if self.descent_step_frac <= 0:
            raise ValueError(f"descent_step_frac must be positive, got {self.descent_step_frac}")
        if self.dedup_radius < 0:
            raise ValueError(f"dedup_radius must be nonnegative, got {self.dedup_radius}")
        if self.grid_resolution <= 0:
            raise ValueError(f"grid_resolution must be positive, got {self.grid_resolution}")
        if self.grid_cap < 1 or self.max_reported < 1:
            raise ValueError("grid_cap and max_reported must be >= 1")


@dataclass(frozen=True, eq=False)
class VerificationOutcome:
    verdict: str
    counterexamples: tuple[np.ndarray, ...]
    grid_resolution: float
    states_checked: int

    def __post_init__(self):
        if self.verdict not in (SAFE_ON_GRID, UNSAFE):
            raise ValueError(f"unknown verdict {self.verdict!r}")
        if self.verdict == UNSAFE and not self.counterexamples:
            raise ValueError("an unsafe verdict requires at least one counterexample")


@dataclass(frozen=True, eq=False)
class CounterexampleEntry:
    initial_state: np.ndarray
    witness: Trajectory
    found_at_iteration: int


class CounterexampleSet:
    """Retained counterexample initial states with their unsafe witness rollouts.

    Entries only ever accumulate; nothing is removed when a later policy
    fixes an initial state.  Near-duplicates (within ``dedup_radius`` in the
    infinity norm) are rejected at insertion so the constraint set stays
    well-spread.
    """

    def __init__(self, dedup_radius: float = 1e-3):
        if dedup_radius < 0:
            raise ValueError(f"dedup_radius must be nonnegative, got {dedup_radius}")
        self.dedup_radius = dedup_radius
        self.entries: list[CounterexampleEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def insert(self, initial_state: np.ndarray, witness: Trajectory, found_at_iteration: int) -> bool:
        """Add an entry unless a retained one is within the dedup radius."""
        state = np.asarray(initial_state, dtype=np.float64)
        for entry in self.entries:
            if np.max(np.abs(entry.initial_state - state)) <= self.dedup_radius:
                return False
        self.entries.append(CounterexampleEntry(state, witness, found_at_iteration))
        return True

    def initial_states(self) -> np.ndarray:
        if not self.entries:
            return np.empty((0, 0))
        return np.stack([entry.initial_state for entry in self.entries])

    def witnesses(self) -> list[Trajectory]:
        return [entry.witness for entry in self.entries]

    def live_entries(self, env: Environment, policy, cfg: HorizonConfig) -> list[CounterexampleEntry]:
        """Entries whose initial state is still a counterexample for ``policy``."""
        return [e for e in self.entries if confirm(env, policy, cfg, e.initial_state) is not None]

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(len(self.entries).to_bytes(8, "little"))
        for entry in self.entries:
            digest.update(entry.initial_state.tobytes())
        return digest.hexdigest()


def confirm(env: Environment, policy, cfg: HorizonConfig, s0: np.ndarray) -> Trajectory | None:
    """Witness trajectory if ``s0`` is a counterexample for the policy, else None.

    Evaluates the dynamics regardless of whether ``s0`` lies in the initial
    box; membership is the caller's concern.
    """
    traj = simulate(env, policy, s0, cfg)
    if is_safe(env, traj):
        return None
    return traj


def falsify(
    env: Environment,
    policy,
    cfg: HorizonConfig,
    budget: int,
    seed: int,
    *,
    batch: int = 16,
    descent_steps: int = 12,
    descent_top_k: int = 8,
    descent_step_frac: float = 0.05,
    dedup_radius: float = 1e-3,
) -> list[np.ndarray]:
    """Search the initial box for counterexample initial states.

    Draws ``budget`` uniform candidates, then sharpens the closest near-misses
    by coordinate-wise finite-difference descent on the safety value, projected
    into the box.  Sound by construction: every returned state re-simulates to
    an unsafe rollout.  May return an empty list; that is not a safety proof.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    rng = np.random.default_rng(seed)
    low, high = env.initial_low, env.initial_high
    width = high - low
    candidates = rng.uniform(low, high, size=(budget, env.state_dim))
    values = np.array([safety_value(env, policy, c, cfg) for c in candidates])
    hits = [candidates[i] for i in range(budget) if values[i] < 0.0]

    active = [d for d in range(env.state_dim) if width[d] > 0.0]
    miss_order = [int(i) for i in np.argsort(values, kind="stable") if values[i] >= 0.0]
    for i in miss_order[:descent_top_k]:
        s = candidates[i].copy()
        for _ in range(descent_steps):
            grad = np.zeros(env.state_dim)
            for d in active:
                h = 1e-3 * width[d]
                up = s.copy()
                up[d] = min(s[d] + h, high[d])
                down = s.copy()
                down[d] = max(s[d] - h, low[d])
                span = up[d] - down[d]
                if span <= 0.0:
                    continue
                grad[d] = (
                    safety_value(env, policy, up, cfg) - safety_value(env, policy, down, cfg)
                ) / span
            top = np.max(np.abs(grad))
            if top == 0.0:
                break
            s = np.clip(s - descent_step_frac * width * (grad / top), low, high)
            if safety_value(env, policy, s, cfg) < 0.0:
                hits.append(s)
                break

    deduped: list[np.ndarray] = []
    for s in sorted(hits, key=tuple):
        if all(np.max(np.abs(s - u)) > dedup_radius for u in deduped):
            deduped.append(s)
    deduped = deduped[:batch]
    return [s for s in deduped if confirm(env, policy, cfg, s) is not None]


def _axis_points(low: float, high: float, resolution: float) -> np.ndarray:
    width = high - low
    if width <= 0.0:
        return np.array([low])
    count = int(np.floor(width / resolution + 1e-9)) + 1
    points = low + resolution * np.arange(count)
    if high - points[-1] > 1e-9 * max(1.0, abs(width)):
        points = np.append(points, high)
    return points


def grid_size(env: Environment, resolution: float) -> int:
    total = 1
    for d in range(env.state_dim):
        total *= len(_axis_points(env.initial_low[d], env.initial_high[d], resolution))
    return total


def verify_grid(
    env: Environment,
    policy,
    cfg: HorizonConfig,
    resolution: float,
    *,
    grid_cap: int = 10_000_000,
    max_reported: int = 256,
) -> VerificationOutcome:
    """Simulate every grid point of the initial box, inclusive of both endpoints
    per axis.  Equivalent to brute-force enumeration by construction; the
    verdict is exhaustive for the checked grid only.
    """
    if resolution <= 0.0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    axes = [
        _axis_points(env.initial_low[d], env.initial_high[d], resolution)
        for d in range(env.state_dim)
    ]
    total = 1
    for axis in axes:
        total *= len(axis)
    if total > grid_cap:
        raise GridCapExceeded(total, grid_cap)
    found: list[np.ndarray] = []
    checked = 0
    for point in itertools.product(*axes):
        s0 = np.array(point)
        checked += 1
        if safety_value(env, policy, s0, cfg) < 0.0:
            if len(found) < max_reported:
                found.append(s0)
    verdict = UNSAFE if found else SAFE_ON_GRID
    return VerificationOutcome(verdict, tuple(found), resolution, checked)
