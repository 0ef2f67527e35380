"""The federated loop: broadcast, local training, FedAvg, global evaluation.

One communication round broadcasts the global weights to a client
cohort, trains every client locally under the current hyperparameter
config, aggregates the updates (sample-count weighted by default) and,
on evaluation-cadence rounds, scores the new global model on the
server-side validation set.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import models, sched
from .common import AggregationError, NumericDivergenceError, derive_seed
from .data import DataShard, EvalSet
from .hpo import FeedbackRecord, HpConfig
from .models import ModelSpec, TrainHp, WeightVector


@dataclass
class ClientState:
    client_id: int
    shard: DataShard
    latency: sched.LatencyProfile
    local_weights: WeightVector | None = None


@dataclass
class GlobalEvaluator:
    val_set: EvalSet
    cadence: int = 5

    def __post_init__(self):
        if self.cadence < 1:
            raise ValueError("eval cadence must be >= 1")


@dataclass
class RoundState:
    round_index: int
    max_rounds: int
    global_weights: WeightVector
    current_hp: HpConfig


@dataclass
class ExperimentWorld:
    """Everything a trial needs: model, clients, server evaluator, seeds."""

    model_spec: ModelSpec
    clients: list[ClientState]
    evaluator: GlobalEvaluator
    hp_defaults: dict
    base_seed: int
    agg_mode: str = "weighted"


@dataclass
class TrialResult:
    config: HpConfig  # final config (may differ from initial under adaptive stepping)
    initial_config_id: str
    objective: float  # sample-count-weighted final validation loss
    test_accuracy: float
    trace: list = field(default_factory=list)  # rows: round, loss, accuracy, sim_time
    sim_time: float = 0.0
    failed: bool = False
    final_weights: WeightVector | None = None
    feedbacks: list = field(default_factory=list)


def fedavg_aggregate(updates, mode: str = "weighted") -> WeightVector:
    """FedAvg over (WeightVector, n_samples) pairs.

    weighted: sum (n_c / sum n) * w_c; uniform: plain mean.
    """
    if not updates:
        raise AggregationError("fedavg_aggregate: no updates")
    if mode not in ("weighted", "uniform"):
        raise AggregationError(f"fedavg_aggregate: unknown mode {mode!r}")
    layout = updates[0][0].layout_id
    for w, n in updates:
        if w.layout_id != layout:
            raise AggregationError(
                f"layout mismatch: {w.layout_id} vs {layout}"
            )
        if mode == "weighted" and n < 1:
            raise AggregationError("weighted mode requires n_samples >= 1")
    if mode == "weighted":
        total = float(sum(n for _, n in updates))
        acc = np.zeros_like(updates[0][0].values)
        for w, n in updates:
            acc += (n / total) * w.values
    else:
        acc = np.mean([w.values for w, _ in updates], axis=0)
    if not np.all(np.isfinite(acc)):
        raise AggregationError("aggregate produced non-finite entries")
    return WeightVector(acc, layout)


def to_train_hp(config: HpConfig, defaults: dict) -> TrainHp:
    """Build a TrainHp from a sampled config, filling untuned fields from defaults."""
    v = dict(defaults)
    v.update(config.values)
    return TrainHp(
        learning_rate=float(v["learning_rate"]),
        weight_decay=float(v["weight_decay"]),
        local_epochs=int(v["epochs"]),
        batch_size=int(v["batch_size"]),
        dropout=float(v["dropout"]),
    )


def weighted_objective(losses_and_counts) -> float:
    """Sample-count-weighted mean of per-client losses: sum (n_c/n) * loss_c."""
    total = float(sum(n for _, n in losses_and_counts))
    return sum(loss * n for loss, n in losses_and_counts) / total


def run_round(state: RoundState, clients: list[ClientState], world: ExperimentWorld,
              trial_index: int = 0):
    """Execute one communication round over the given cohort.

    Returns (next RoundState, feedback records). Clients are processed in
    client_id order so aggregation is independent of any worker ordering.
    A global feedback record is appended on evaluation-cadence rounds.
    """
    if not clients:
        raise AggregationError("run_round: empty cohort")
    hp = to_train_hp(state.current_hp, world.hp_defaults)
    spec = world.model_spec
    j = state.round_index
    updates = []
    feedbacks = []
    for c in sorted(clients, key=lambda c: c.client_id):
        seed = derive_seed(world.base_seed, "train", trial_index, j, c.client_id)
        try:
            new_w, tl, vl = models.local_train(
                spec, state.global_weights, hp,
                c.shard.train.features, c.shard.train.labels,
                c.shard.val.features, c.shard.val.labels,
                seed,
            )
        except NumericDivergenceError as err:
            raise NumericDivergenceError(
                f"client {c.client_id} diverged in round {j}: {err}",
                client_id=c.client_id,
                round_index=j,
                config_id=state.current_hp.config_id,
            ) from err
        c.local_weights = new_w
        updates.append((new_w, len(c.shard.train)))
        feedbacks.append(FeedbackRecord(
            config_id=state.current_hp.config_id,
            round_index=j,
            kind="local",
            train_loss=tl,
            val_loss=vl,
            group_size=len(clients),
            client_id=c.client_id,
        ))
    new_global = fedavg_aggregate(updates, world.agg_mode)
    if j % world.evaluator.cadence == 0:
        gl, _ = models.evaluate(
            spec, new_global,
            world.evaluator.val_set.features, world.evaluator.val_set.labels,
        )
        feedbacks.append(FeedbackRecord(
            config_id=state.current_hp.config_id,
            round_index=j,
            kind="global",
            train_loss=gl,
            val_loss=gl,
            group_size=len(clients),
        ))
    next_state = RoundState(j + 1, state.max_rounds, new_global, state.current_hp)
    return next_state, feedbacks


def _round_time(clients, hp: TrainHp, world, trial_index: int, round_index: int) -> float:
    """Simulated duration of one round: the slowest cohort member."""
    times = []
    for c in clients:
        seed = derive_seed(world.base_seed, "time", trial_index, round_index, c.client_id)
        times.append(sched.completion_time(
            c.latency, hp.local_epochs, max(1, len(c.shard.train)), seed
        ))
    return max(times)


def run_trial(
    hp: HpConfig,
    budget_rounds: int,
    world: ExperimentWorld,
    clients: list[ClientState] | None = None,
    trial_index: int = 0,
    on_cadence=None,
    patience: int = 0,
) -> TrialResult:
    """Train a fresh model for budget_rounds under hp and score it.

    on_cadence, when given, is called after every evaluation-cadence
    round as on_cadence(state, clients, world, trial_index, global_loss)
    and may return (new HpConfig, extra simulated time) to implement
    step-wise adaptive hyperparameter updates mid-trial. patience > 0
    stops early after that many cadence evaluations without improvement
    of the global validation loss.
    """
    if budget_rounds < 1:
        raise ValueError("budget_rounds must be >= 1")
    cohort = sorted(clients or world.clients, key=lambda c: c.client_id)
    spec = world.model_spec
    w0 = models.init_weights(spec, derive_seed(world.base_seed, "init", trial_index))
    state = RoundState(1, budget_rounds, w0, hp)
    sim_time = 0.0
    trace = []
    all_feedbacks = []
    best_gl = np.inf
    stall = 0
    for j in range(1, budget_rounds + 1):
        train_hp = to_train_hp(state.current_hp, world.hp_defaults)
        next_state, feedbacks = run_round(state, cohort, world, trial_index)
        sim_time += _round_time(cohort, train_hp, world, trial_index, j)
        all_feedbacks.extend(feedbacks)
        if j % world.evaluator.cadence == 0:
            gl, gacc = models.evaluate(
                spec, next_state.global_weights,
                world.evaluator.val_set.features, world.evaluator.val_set.labels,
            )
            trace.append({"round": j, "loss": gl, "accuracy": gacc, "sim_time": sim_time})
            if on_cadence is not None:
                new_cfg, extra = on_cadence(next_state, cohort, world, trial_index, gl)
                sim_time += extra
                if new_cfg is not None:
                    next_state.current_hp = new_cfg
            if patience > 0:
                if gl < best_gl - 1e-12:
                    best_gl, stall = gl, 0
                else:
                    stall += 1
                    if stall >= patience:
                        state = next_state
                        break
        state = next_state
    final_w = state.global_weights
    val_losses = []
    test_hits = []
    for c in cohort:
        vl, _ = models.evaluate(spec, final_w, c.shard.val.features, c.shard.val.labels) \
            if len(c.shard.val) else (np.nan, 0.0)
        if len(c.shard.val):
            val_losses.append((vl, len(c.shard.train)))
        if len(c.shard.test):
            _, acc = models.evaluate(spec, final_w, c.shard.test.features, c.shard.test.labels)
            test_hits.append((acc, len(c.shard.test)))
    objective = weighted_objective(val_losses) if val_losses else np.inf
    test_acc = (sum(a * n for a, n in test_hits) / sum(n for _, n in test_hits)) \
        if test_hits else 0.0
    return TrialResult(
        config=state.current_hp,
        initial_config_id=hp.config_id,
        objective=float(objective),
        test_accuracy=float(test_acc),
        trace=trace,
        sim_time=sim_time,
        final_weights=final_w,
        feedbacks=all_feedbacks,
    )


STATE_FORMAT_VERSION = 1


def save_round_state(state: RoundState, path):
    """Serialize a RoundState snapshot as versioned JSON."""
    doc = {
        "version": STATE_FORMAT_VERSION,
        "round_index": state.round_index,
        "max_rounds": state.max_rounds,
        "layout_id": state.global_weights.layout_id,
        "weights": state.global_weights.values.tolist(),
        "hp_values": state.current_hp.values,
    }
    with open(path, "w", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_round_state(path) -> RoundState:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != STATE_FORMAT_VERSION:
        raise ValueError(f"unsupported state version {doc.get('version')}")
    return RoundState(
        round_index=doc["round_index"],
        max_rounds=doc["max_rounds"],
        global_weights=WeightVector(np.asarray(doc["weights"]), doc["layout_id"]),
        current_hp=HpConfig(doc["hp_values"]),
    )
