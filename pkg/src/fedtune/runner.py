"""Experiment runner: build the world, dispatch HP evaluations, emit metrics."""

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import data, flcore, hpo, models, sched
from .common import NumericDivergenceError, derive_seed
from .config import ExperimentConfig
from .data import EvalSet
from .flcore import ExperimentWorld, GlobalEvaluator, to_train_hp
from .hpo import FeedbackRecord, FeedbackStore, combine_feedback

HP_COLUMNS = ("learning_rate", "weight_decay", "epochs", "batch_size", "dropout")


@dataclass
class TrialRow:
    seed: int
    sampler: str
    trial_index: int
    group_id: int
    config_id: str
    hp_values: dict
    objective: float
    accuracy: float
    sim_time: float
    trace: list = field(default_factory=list)
    failed: bool = False


@dataclass
class SeedReport:
    seed: int
    best: dict
    trials: list[TrialRow]
    events: list
    makespan: float
    best_weights: models.WeightVector | None = None
    feedback_history: list = field(default_factory=list)


@dataclass
class ExperimentReport:
    config: dict
    per_seed: list[SeedReport]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seeds": [
                {
                    "seed": sr.seed,
                    "best": sr.best,
                    "makespan": sr.makespan,
                    "trials": [
                        {
                            "seed": t.seed,
                            "sampler": t.sampler,
                            "trial": t.trial_index,
                            "group_id": t.group_id,
                            "config_id": t.config_id,
                            "hp": t.hp_values,
                            "objective": _jsonable(t.objective),
                            "accuracy": t.accuracy,
                            "sim_time": t.sim_time,
                            "failed": t.failed,
                        }
                        for t in sr.trials
                    ],
                }
                for sr in self.per_seed
            ],
        }


def _jsonable(x: float):
    return "inf" if math.isinf(x) else x


def build_world(cfg: ExperimentConfig, seed: int) -> ExperimentWorld:
    """Generate data, carve the server validation set, partition, attach latencies."""
    ds_cfg = cfg["dataset"]
    if ds_cfg["type"] == "synthetic":
        ds = data.gen_synthetic(
            int(ds_cfg["num_classes"]), int(ds_cfg["input_dim"]), int(ds_cfg["n"]),
            float(ds_cfg["class_sep"]), derive_seed(seed, "data"),
        )
        num_classes = int(ds_cfg["num_classes"])
    else:
        ds = data.load_csv(ds_cfg["path"])
        num_classes = int(ds.labels.max()) + 1

    # server-side validation set, disjoint from every client shard
    frac = float(cfg["server_val_fraction"])
    rng = np.random.default_rng(derive_seed(seed, "server-val"))
    order = rng.permutation(len(ds))
    n_server = int(round(frac * len(ds)))
    server_idx, client_idx = order[:n_server], order[n_server:]
    server_val = EvalSet(ds.features[server_idx], ds.labels[server_idx])
    client_ds = data.Dataset(ds.features[client_idx], ds.labels[client_idx])

    shards = data.partition_dirichlet(
        client_ds, int(cfg["n_clients"]), float(cfg["alpha"]),
        tuple(float(f) for f in cfg["split"]), seed=derive_seed(seed, "partition"),
    )

    lat = cfg["latency"]
    clients = []
    for shard in shards:
        lat_rng = np.random.default_rng(derive_seed(seed, "latency", shard.client_id))
        base = lat_rng.uniform(float(lat["base_min"]), float(lat["base_max"]))
        clients.append(flcore.ClientState(
            client_id=shard.client_id,
            shard=shard,
            latency=sched.LatencyProfile(base, float(lat["jitter_sigma"])),
        ))

    model_cfg = cfg["model"]
    spec = models.ModelSpec(
        kind=model_cfg["kind"],
        input_dim=ds.features.shape[1],
        num_classes=num_classes,
        hidden_dim=int(model_cfg.get("hidden_dim", 0)) if model_cfg["kind"] == "mlp" else 0,
        dropout_rate=float(model_cfg.get("dropout_rate", 0.0)),
    )
    return ExperimentWorld(
        model_spec=spec,
        clients=clients,
        evaluator=GlobalEvaluator(server_val, int(cfg["eval_cadence"])),
        hp_defaults=dict(cfg["hp_defaults"]),
        base_seed=seed,
        agg_mode=cfg["aggregation"],
    )


def make_groups(cfg: ExperimentConfig, world: ExperimentWorld, seed: int) -> list[sched.ClientGroup]:
    """One all-clients group in sync mode; calibration-round grouping in async."""
    if cfg["grouping"]["mode"] == "sync":
        return [sched.ClientGroup(0, sorted(c.client_id for c in world.clients))]
    epochs = max(1, int(world.hp_defaults["epochs"]))
    completions = []
    for c in world.clients:
        t = sched.completion_time(
            c.latency, epochs, max(1, len(c.shard.train)),
            derive_seed(seed, "calibration", c.client_id),
        )
        completions.append((c.client_id, t))
    window = cfg["grouping"]["window"]
    if window == "auto":
        window = 0.25 * float(np.median([t for _, t in completions]))
    return sched.form_groups(completions, float(window))


def run_probe_cycle(state, cohort, world, trial_index, sampler, pending):
    """Step-wise feedback: evaluate the probe set and move the config.

    Each probe config is trained for its own epoch count by every cohort
    member from the current global weights; the probe updates are
    aggregated and scored on the server validation set, then combined
    with the local validation losses. Probe feedback is queued in
    `pending` for commit at the evaluation's simulated finish time.
    """
    current = state.current_hp
    probes = sampler.probes(current)
    spec = world.model_spec
    n = len(cohort)
    results = []
    extra_time = 0.0
    for p in probes:
        probe_hp = to_train_hp(p, world.hp_defaults)
        lf = []
        updates = []
        times = []
        for c in cohort:
            pseed = derive_seed(world.base_seed, "probe", trial_index,
                                state.round_index, p.config_id, c.client_id)
            w, _, vl = models.local_train(
                spec, state.global_weights, probe_hp,
                c.shard.train.features, c.shard.train.labels,
                c.shard.val.features, c.shard.val.labels, pseed,
            )
            lf.append(vl)
            updates.append((w, len(c.shard.train)))
            times.append(sched.completion_time(
                c.latency, probe_hp.local_epochs, max(1, len(c.shard.train)), pseed
            ))
        wp = flcore.fedavg_aggregate(updates, world.agg_mode)
        gf, _ = models.evaluate(
            spec, wp, world.evaluator.val_set.features, world.evaluator.val_set.labels
        )
        combined = combine_feedback(lf, gf, n)
        results.append((p, combined))
        extra_time += max(times)
        target = hpo.probe_target_of(sampler.space, current, p)
        pending.append((p.config_id, combined, FeedbackRecord(
            config_id=p.config_id,
            round_index=state.round_index,
            kind="probe",
            train_loss=gf,
            val_loss=combined,
            group_size=n,
            probe_target=target,
        )))
    new_cfg = sampler.step(current, results)
    return new_cfg, extra_time


def _run_one_eval(cfg, world, store, sampler, group, config, eval_index, seed):
    """Run one HP evaluation (a full trial) on a group's cohort.

    Returns (TrialRow, duration, commit) where commit records the trial's
    feedback into the store.
    """
    cohort = [c for c in world.clients if c.client_id in set(group.members)]
    pending: list = []
    adaptive = cfg["sampler"] == "adaptive"

    def on_cadence(state, clients, world_, trial_index, gl):
        return run_probe_cycle(state, clients, world_, trial_index, sampler, pending)

    try:
        result = flcore.run_trial(
            config, int(cfg["rounds_per_trial"]), world, cohort,
            trial_index=eval_index,
            on_cadence=on_cadence if adaptive else None,
            patience=int(cfg["early_stop_patience"]),
        )
        failed = False
    except NumericDivergenceError:
        result = flcore.TrialResult(
            config=config, initial_config_id=config.config_id,
            objective=math.inf, test_accuracy=0.0, sim_time=0.0, failed=True,
        )
        failed = True

    final = result.config
    hp_values = to_train_hp(final, world.hp_defaults)
    row = TrialRow(
        seed=seed,
        sampler=cfg["sampler"],
        trial_index=eval_index,
        group_id=group.group_id,
        config_id=final.config_id,
        hp_values={
            "learning_rate": hp_values.learning_rate,
            "weight_decay": hp_values.weight_decay,
            "epochs": hp_values.local_epochs,
            "batch_size": hp_values.batch_size,
            "dropout": hp_values.dropout,
        },
        objective=result.objective,
        accuracy=result.test_accuracy,
        sim_time=result.sim_time,
        trace=result.trace,
        failed=failed,
    )

    def commit():
        for config_id, combined, rec in pending:
            store.record(config_id, combined, rec)
        if not failed and math.isfinite(result.objective):
            last_round = result.feedbacks[-1].round_index if result.feedbacks else 0
            local_vals = [f.val_loss for f in result.feedbacks
                          if f.kind == "local" and f.round_index == last_round]
            global_vals = [f.train_loss for f in result.feedbacks if f.kind == "global"]
            if local_vals and global_vals:
                combined = combine_feedback(local_vals, global_vals[-1], len(local_vals))
            else:
                combined = result.objective
            store.record(final.config_id, combined, FeedbackRecord(
                config_id=final.config_id,
                round_index=last_round,
                kind="global",
                train_loss=global_vals[-1] if global_vals else result.objective,
                val_loss=combined,
                group_size=len(cohort),
            ))

    return row, result.sim_time, commit, result.final_weights


def _run_seed(cfg: ExperimentConfig, seed: int) -> SeedReport:
    world = build_world(cfg, seed)
    space = cfg.search_space()
    store = FeedbackStore()
    tuned = list(cfg["tuned"])
    if cfg["sampler"] == "adaptive":
        sampler = hpo.AdaptiveSampler(space, tuned, float(cfg["epsilon"]),
                                      derive_seed(seed, "sampler"))
    else:
        sampler = hpo.RandomSampler(space, derive_seed(seed, "sampler"))

    if cfg["sampler"] == "halving":
        rows, events, makespan, weights_by_id = _run_halving(cfg, world, space, store, seed)
    else:
        groups = make_groups(cfg, world, seed)
        rows_by_eval: dict[int, TrialRow] = {}
        weights_by_id: dict[str, models.WeightVector] = {}

        def issue(group, eval_index):
            return sampler.start_config(eval_index, store)

        def run_eval(group, config, eval_index):
            row, duration, commit, weights = _run_one_eval(
                cfg, world, store, sampler, group, config, eval_index, seed
            )
            rows_by_eval[eval_index] = row
            if weights is not None:
                weights_by_id[row.config_id] = weights
            return duration, commit

        result = sched.dispatch(groups, int(cfg["budget_configs"]), issue, run_eval)
        rows = [rows_by_eval[e] for e in sorted(rows_by_eval)]
        events = result.events
        makespan = result.makespan

    ok = [r for r in rows if not r.failed]
    if ok:
        best_row = max(ok, key=lambda r: (r.accuracy, -r.objective, -r.trial_index))
    else:
        best_row = rows[0]
    best = {
        "config_id": best_row.config_id,
        "hp": best_row.hp_values,
        "objective": _jsonable(best_row.objective),
        "accuracy": best_row.accuracy,
        "trial": best_row.trial_index,
    }
    return SeedReport(
        seed=seed,
        best=best,
        trials=rows,
        events=events,
        makespan=makespan,
        best_weights=weights_by_id.get(best_row.config_id),
        feedback_history=list(store.history),
    )


def _run_halving(cfg, world, space, store, seed):
    """Successive halving over random grid configs (sync cohort only)."""
    n0 = int(cfg["budget_configs"])
    k_max = int(cfg["rounds_per_trial"])
    levels = max(1, int(math.floor(math.log2(n0)))) if n0 > 1 else 0
    rounds = max(1, k_max // (2 ** levels))
    configs = [hpo.suggest_random(space, derive_seed(seed, "halving", i))
               for i in range(n0)]
    group = sched.ClientGroup(0, sorted(c.client_id for c in world.clients))
    rows_by_id: dict[str, TrialRow] = {}
    weights_by_id: dict[str, models.WeightVector] = {}
    events: list[sched.ScheduleEvent] = []
    sim_clock = 0.0
    eval_counter = 0
    survivors = list(configs)
    sampler = hpo.RandomSampler(space, derive_seed(seed, "sampler"))
    while True:
        scored = []
        for config in survivors:
            events.append(sched.ScheduleEvent(sim_clock, "issue", 0,
                                              config.config_id, eval_counter))
            row, duration, commit, weights = _run_one_eval(
                _with_rounds(cfg, rounds), world, store, sampler, group,
                config, eval_counter, seed,
            )
            commit()
            sim_clock += duration
            events.append(sched.ScheduleEvent(sim_clock, "feedback", 0,
                                              config.config_id, eval_counter,
                                              staleness=duration))
            rows_by_id[config.config_id] = row
            if weights is not None:
                weights_by_id[row.config_id] = weights
            scored.append((row.objective, config))
            eval_counter += 1
        if len(survivors) <= 1 or rounds >= k_max:
            break
        scored.sort(key=lambda t: (t[0], t[1].config_id))
        survivors = [c for _, c in scored[: max(1, math.ceil(len(scored) / 2))]]
        rounds = min(k_max, rounds * 2)
    rows = [rows_by_id[c.config_id] for c in configs]
    for i, row in enumerate(rows):
        row.trial_index = i
    return rows, events, sim_clock, weights_by_id


def _with_rounds(cfg: ExperimentConfig, rounds: int) -> ExperimentConfig:
    raw = cfg.to_dict()
    raw["rounds_per_trial"] = rounds
    return ExperimentConfig(raw)


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    per_seed = [_run_seed(cfg, seed) for seed in cfg["seeds"]]
    return ExperimentReport(config=cfg.to_dict(), per_seed=per_seed)


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def emit_metrics(report: ExperimentReport, output_dir) -> dict:
    """Write trials.csv, curves.csv, report.json, events.jsonl, best_weights.json."""
    os.makedirs(output_dir, exist_ok=True)
    if not os.access(output_dir, os.W_OK):
        raise OSError(f"output directory {output_dir} is not writable")
    paths = {name: os.path.join(output_dir, name) for name in (
        "trials.csv", "curves.csv", "report.json", "events.jsonl", "best_weights.json",
    )}

    with open(paths["trials.csv"], "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["seed", "sampler", "trial", "config_id", *HP_COLUMNS,
                         "objective", "accuracy"])
        for sr in report.per_seed:
            for t in sr.trials:
                writer.writerow([
                    t.seed, t.sampler, t.trial_index, t.config_id,
                    *[_fmt(t.hp_values[h]) for h in HP_COLUMNS],
                    _fmt(t.objective), _fmt(t.accuracy),
                ])

    with open(paths["curves.csv"], "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["seed", "sampler", "round", "accuracy", "loss"])
        for sr in report.per_seed:
            best_trial = next(
                (t for t in sr.trials if t.trial_index == sr.best["trial"]), None
            )
            if best_trial is None:
                continue
            for point in best_trial.trace:
                writer.writerow([
                    sr.seed, best_trial.sampler, point["round"],
                    _fmt(point["accuracy"]), _fmt(point["loss"]),
                ])

    with open(paths["report.json"], "w", newline="\n") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")

    with open(paths["events.jsonl"], "w", newline="\n") as fh:
        for sr in report.per_seed:
            for ev in sr.events:
                doc = ev.to_dict()
                doc["seed"] = sr.seed
                fh.write(json.dumps(doc, sort_keys=True) + "\n")

    checkpoints = {}
    for sr in report.per_seed:
        if sr.best_weights is not None:
            checkpoints[str(sr.seed)] = {
                "layout_id": sr.best_weights.layout_id,
                "config_id": sr.best["config_id"],
                "values": sr.best_weights.values.tolist(),
            }
    with open(paths["best_weights.json"], "w", newline="\n") as fh:
        json.dump(checkpoints, fh, sort_keys=True)
        fh.write("\n")
    return paths
