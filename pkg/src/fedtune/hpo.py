"""Search space, low-fidelity grids, samplers and the feedback store.

The search space restricts every hyperparameter to a coarse grid
(low-fidelity mode). Two samplers are provided: uniform random search
over the grid and a step-wise adaptive sampler that, each feedback
cycle, probes one grid neighbor per tuned hyperparameter and performs a
coordinate-descent move using only the latest probe feedback.
"""

import hashlib
import json
import math
import threading
from dataclasses import dataclass

import numpy as np

from .common import ConfigurationError, FeedbackError

SCALES = ("log10", "log_e", "linear", "pow2")


@dataclass(frozen=True)
class HpDim:
    """One hyperparameter domain with its low-fidelity step rule."""

    name: str
    scale: str
    low: float
    high: float
    step: float
    integer: bool = False

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ConfigurationError(f"{self.name}: unknown scale {self.scale!r}")
        if not self.low < self.high:
            raise ConfigurationError(f"{self.name}: low must be < high")
        if self.step <= 0:
            raise ConfigurationError(f"{self.name}: step must be > 0")
        if self.scale in ("log10", "log_e", "pow2") and self.low <= 0:
            raise ConfigurationError(f"{self.name}: log scales need low > 0")


def grid(dim: HpDim) -> list:
    """The low-fidelity grid: all admissible values from low to high.

    Multiplicative scales step by the given factor (log10 -> x10,
    log_e -> xe, pow2 -> x2); linear scales step arithmetically. The grid
    always contains `low` and never exceeds `high`.
    """
    vals = []
    if dim.scale == "linear":
        k = 0
        while True:
            x = dim.low + k * dim.step
            if x > dim.high * (1 + 1e-12) + 1e-12:
                break
            vals.append(round(x, 12))
            k += 1
    else:
        # multiplicative scales: step is the per-point factor
        factor = dim.step
        if factor <= 1:
            raise ConfigurationError(f"{dim.name}: multiplicative step must be > 1")
        k = 0
        while True:
            x = dim.low * factor**k
            if x > dim.high * (1 + 1e-9):
                break
            vals.append(x)
            k += 1
    if dim.integer:
        vals = [int(round(v)) for v in vals]
    return vals


def _coord(dim: HpDim, x: float) -> float:
    if dim.scale == "log10":
        return math.log10(x)
    if dim.scale == "log_e":
        return math.log(x)
    if dim.scale == "pow2":
        return math.log2(x)
    return float(x)


def snap(dim: HpDim, x: float):
    """Clamp x into [low, high], then take the nearest grid point in the
    dim's scale coordinate; ties resolve toward the lower grid point."""
    x = min(max(x, dim.low), dim.high)
    g = grid(dim)
    cx = _coord(dim, x)
    best, best_d = g[0], abs(_coord(dim, g[0]) - cx)
    for v in g[1:]:
        d = abs(_coord(dim, v) - cx)
        if d < best_d - 1e-12:
            best, best_d = v, d
    return best


def grid_index(dim: HpDim, x) -> int:
    """Index of x on the dim's grid (x must lie on the grid)."""
    g = grid(dim)
    cx = _coord(dim, x)
    diffs = [abs(_coord(dim, v) - cx) for v in g]
    i = int(np.argmin(diffs))
    if diffs[i] > 1e-9:
        raise ConfigurationError(f"{dim.name}: value {x} is not on the grid")
    return i


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple

    def __getitem__(self, name: str) -> HpDim:
        for d in self.dims:
            if d.name == name:
                return d
        raise KeyError(name)

    def names(self) -> list[str]:
        return [d.name for d in self.dims]


def default_search_space() -> SearchSpace:
    """The five low-fidelity hyperparameter grids used throughout."""
    return SearchSpace(
        dims=(
            HpDim("learning_rate", "log10", 1e-5, 1e-1, 10.0),
            HpDim("weight_decay", "log_e", 1e-5, 1e-1, math.e),
            HpDim("epochs", "linear", 0, 10, 1, integer=True),
            HpDim("batch_size", "pow2", 16, 256, 2.0, integer=True),
            HpDim("dropout", "linear", 0.1, 0.5, 0.2),
        )
    )


def _canonical(values: dict) -> str:
    items = {k: (int(v) if isinstance(v, (int, np.integer)) else float(v))
             for k, v in values.items()}
    return json.dumps(items, sort_keys=True, separators=(",", ":"))


def make_config_id(values: dict) -> str:
    return hashlib.sha256(_canonical(values).encode()).hexdigest()[:16]


class HpConfig:
    """An assignment of grid values to hyperparameters, with a stable id."""

    __slots__ = ("values", "config_id")

    def __init__(self, values: dict):
        self.values = dict(values)
        self.config_id = make_config_id(self.values)

    def __eq__(self, other):
        return isinstance(other, HpConfig) and self.config_id == other.config_id

    def __hash__(self):
        return hash(self.config_id)

    def __repr__(self):
        return f"HpConfig({self.values})"

    def replace(self, name, value) -> "HpConfig":
        vals = dict(self.values)
        vals[name] = value
        return HpConfig(vals)


def validate_on_grid(space: SearchSpace, config: HpConfig):
    for name, value in config.values.items():
        grid_index(space[name], value)


@dataclass
class FeedbackRecord:
    """One loss feedback event tied to a config and communication round."""

    config_id: str
    round_index: int
    kind: str  # "local", "global" or "probe"
    train_loss: float
    val_loss: float
    group_size: int = 1
    probe_target: str | None = None
    client_id: int | None = None

    def to_dict(self) -> dict:
        return {
            "config_id": self.config_id,
            "round": self.round_index,
            "kind": self.kind,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "group_size": self.group_size,
            "probe_target": self.probe_target,
            "client_id": self.client_id,
        }


class FeedbackStore:
    """Per-config running mean of combined feedback plus full history.

    Access is serialized with a lock so concurrent record/read calls
    behave as if executed in some total order.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._sum: dict[str, float] = {}
        self._count: dict[str, int] = {}
        self.history: list[FeedbackRecord] = []

    def record(self, config_id: str, combined: float, detail: FeedbackRecord | None = None):
        if not math.isfinite(combined):
            raise FeedbackError(f"non-finite combined feedback for {config_id}")
        with self._lock:
            self._sum[config_id] = self._sum.get(config_id, 0.0) + combined
            self._count[config_id] = self._count.get(config_id, 0) + 1
            if detail is not None:
                self.history.append(detail)

    def append_history(self, record: FeedbackRecord):
        with self._lock:
            self.history.append(record)

    def mean(self, config_id: str) -> float:
        with self._lock:
            return self._sum[config_id] / self._count[config_id]

    def count(self, config_id: str) -> int:
        with self._lock:
            return self._count.get(config_id, 0)

    def config_ids(self) -> list[str]:
        with self._lock:
            return list(self._count)

    def export_jsonl(self, path):
        with open(path, "w", newline="\n") as fh:
            for rec in self.history:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def combine_feedback(lf, gf: float, n_j: int) -> float:
    """Weighted mix of one global and n_j local feedbacks.

    The global loss counts as n_j votes against one vote per local loss:
    combined = (n_j * gf + sum(lf)) / (2 * n_j).
    """
    if n_j < 1 or len(lf) != n_j:
        raise FeedbackError(f"expected {n_j} local feedbacks, got {len(lf)}")
    if not math.isfinite(gf) or not all(math.isfinite(x) for x in lf):
        raise FeedbackError("non-finite feedback value")
    return (n_j * gf + sum(lf)) / (2.0 * n_j)


def suggest_random(space: SearchSpace, rng) -> HpConfig:
    """Uniform draw over every dim's grid, independent across dims."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    values = {}
    for dim in space.dims:
        g = grid(dim)
        values[dim.name] = g[int(rng.integers(len(g)))]
    return HpConfig(values)


def probe_set(
    space: SearchSpace,
    current: HpConfig,
    tuned,
    directions: dict | None = None,
) -> list[HpConfig]:
    """The current config plus one grid neighbor per tuned hyperparameter.

    Each neighbor differs from `current` in exactly one HP by one grid
    step. The probe direction is the last accepted improvement direction
    for that HP (from `directions`), defaulting to upward; at a grid
    boundary the only feasible direction is used. Single-point grids are
    skipped.
    """
    directions = directions or {}
    out = [current]
    for name in tuned:
        dim = space[name]
        g = grid(dim)
        if len(g) < 2:
            continue
        i = grid_index(dim, current.values[name])
        d = directions.get(name, +1)
        j = i + d
        if not 0 <= j < len(g):
            j = i - d
        out.append(current.replace(name, g[j]))
    return out


def probe_target_of(space: SearchSpace, current: HpConfig, probe: HpConfig) -> str | None:
    """Name of the single HP in which a probe differs from current."""
    diff = [n for n in current.values if probe.values[n] != current.values[n]]
    return diff[0] if diff else None


def suggest_adaptive(
    space: SearchSpace,
    current: HpConfig,
    latest_probe_results,
    tuned,
    epsilon: float = 0.0,
    rng=None,
) -> HpConfig:
    """Coordinate-descent move from the latest probe feedback only.

    For each tuned HP independently the neighbor's value is adopted when
    its combined feedback is strictly lower than the current config's.
    With probability epsilon one tuned HP is replaced by a uniform grid
    draw. The result is snapped back onto the grid.
    """
    if not latest_probe_results:
        return current
    cur_combined = None
    for cfg, comb in latest_probe_results:
        if cfg.config_id == current.config_id:
            cur_combined = comb
    if cur_combined is None:
        return current
    values = dict(current.values)
    for cfg, comb in latest_probe_results:
        if cfg.config_id == current.config_id:
            continue
        name = probe_target_of(space, current, cfg)
        if name is None or name not in tuned:
            continue
        if comb < cur_combined:
            values[name] = cfg.values[name]
    if epsilon > 0 and rng is not None and tuned and rng.random() < epsilon:
        name = tuned[int(rng.integers(len(tuned)))]
        g = grid(space[name])
        values[name] = g[int(rng.integers(len(g)))]
    values = {n: snap(space[n], v) if not space[n].integer else int(snap(space[n], v))
              for n, v in values.items()}
    return HpConfig(values)


class RandomSampler:
    """Stateless random search; config for evaluation e depends only on
    (seed, e) so the draw sequence is independent of scheduling."""

    def __init__(self, space: SearchSpace, seed: int):
        self.space = space
        self.seed = seed

    def start_config(self, eval_index: int, store: FeedbackStore) -> HpConfig:
        from .common import derive_seed

        return suggest_random(self.space, derive_seed(self.seed, "rand-cfg", eval_index))

    def probes(self, current):
        return None

    def step(self, current, probe_results):
        return current


class AdaptiveSampler:
    """Step-wise adaptive sampler with per-HP neighbor probes.

    New evaluations start from the incumbent (lowest running-mean
    combined feedback seen so far); within an evaluation the config moves
    by coordinate descent on the latest probe results. A per-HP direction
    memory biases the next probe toward the last accepted improvement.
    """

    def __init__(self, space: SearchSpace, tuned, epsilon: float = 0.1, seed: int = 0):
        self.space = space
        self.tuned = list(tuned)
        self.epsilon = epsilon
        self.rng = np.random.default_rng(seed)
        self.directions: dict[str, int] = {}
        self._seen: dict[str, HpConfig] = {}

    def start_config(self, eval_index: int, store: FeedbackStore) -> HpConfig:
        best, best_mean = None, math.inf
        for cid, cfg in self._seen.items():
            if store.count(cid) > 0 and store.mean(cid) < best_mean:
                best, best_mean = cfg, store.mean(cid)
        if best is None:
            best = suggest_random(self.space, self.rng)
        self._seen[best.config_id] = best
        return best

    def probes(self, current: HpConfig) -> list[HpConfig]:
        return probe_set(self.space, current, self.tuned, self.directions)

    def step(self, current: HpConfig, probe_results) -> HpConfig:
        new = suggest_adaptive(
            self.space, current, probe_results, self.tuned, self.epsilon, self.rng
        )
        for name in self.tuned:
            if new.values[name] != current.values[name]:
                dim = self.space[name]
                delta = grid_index(dim, new.values[name]) - grid_index(dim, current.values[name])
                if delta != 0:
                    self.directions[name] = 1 if delta > 0 else -1
        self._seen[new.config_id] = new
        return new
