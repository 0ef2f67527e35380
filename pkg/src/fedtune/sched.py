"""Simulated-time straggler model and dynamic client grouping.

Time is discrete-event simulated, not wall-clock: every client has a
latency profile and the scheduler groups clients whose per-round
completion times are close, so slow clients never block fast groups.
"""

import heapq
import json
from dataclasses import dataclass

import numpy as np

from .common import ConfigurationError


@dataclass(frozen=True)
class LatencyProfile:
    """Simulated seconds per local epoch per 100 samples, with log-normal jitter."""

    base_time: float
    jitter_sigma: float = 0.0

    def __post_init__(self):
        if self.base_time <= 0:
            raise ConfigurationError("latency.base_time: must be > 0")
        if self.jitter_sigma < 0:
            raise ConfigurationError("latency.jitter_sigma: must be >= 0")


@dataclass
class ClientGroup:
    group_id: int
    members: list[int]  # client ids, sorted
    formation_time: float = 0.0
    hp_under_eval: str | None = None


def completion_time(profile: LatencyProfile, local_epochs: int, n_samples: int, rng_seed: int) -> float:
    """base_time * epochs * (n/100) scaled by a seeded log-normal multiplier."""
    if n_samples < 1:
        raise ConfigurationError("completion_time: n_samples must be >= 1")
    t = profile.base_time * local_epochs * (n_samples / 100.0)
    if profile.jitter_sigma > 0:
        rng = np.random.default_rng(rng_seed)
        t *= rng.lognormal(0.0, profile.jitter_sigma)
    return t


def form_groups(completions, window: float) -> list[ClientGroup]:
    """Greedy sweep over completion times sorted ascending.

    A new group starts whenever the next completion exceeds the first
    time in the current group by more than `window`. Members are sorted
    by client id within each group for determinism.
    """
    if not completions:
        raise ConfigurationError("form_groups: no completions")
    if window <= 0:
        raise ConfigurationError("form_groups: window must be > 0")
    ordered = sorted(completions, key=lambda ct: (ct[1], ct[0]))
    groups = []
    members = [ordered[0][0]]
    anchor = ordered[0][1]
    for cid, t in ordered[1:]:
        if t > anchor + window:
            groups.append(ClientGroup(len(groups), sorted(members), anchor))
            members, anchor = [cid], t
        else:
            members.append(cid)
    groups.append(ClientGroup(len(groups), sorted(members), anchor))
    return groups


@dataclass
class ScheduleEvent:
    sim_time: float
    event_kind: str  # "issue" or "feedback"
    group_id: int
    config_id: str
    round_index: int
    staleness: float = 0.0

    def to_dict(self) -> dict:
        return {
            "sim_time": self.sim_time,
            "event_kind": self.event_kind,
            "group_id": self.group_id,
            "config_id": self.config_id,
            "round": self.round_index,
            "staleness": self.staleness,
        }


@dataclass
class DispatchResult:
    events: list[ScheduleEvent]
    makespan: float
    assignments: list[tuple[int, int]]  # (eval_index, group_id)


def dispatch(groups: list[ClientGroup], num_evals: int, issue, run_eval) -> DispatchResult:
    """Run `num_evals` HP evaluations asynchronously across groups.

    Whichever group becomes free earliest (ties broken by group id) is
    issued its next config immediately via `issue(group, eval_index)`;
    `run_eval(group, config, eval_index)` performs the evaluation and
    returns (simulated duration, commit callable). The commit, which
    records the evaluation's feedback, is applied only once simulated
    time reaches the evaluation's finish, so a config issued at time t
    can never observe feedback arriving after t. Issuance for one group
    never waits on any other group.
    """
    free: list[tuple[float, int]] = [(0.0, g.group_id) for g in groups]
    heapq.heapify(free)
    by_id = {g.group_id: g for g in groups}
    done_evals = {g.group_id: 0 for g in groups}
    pending: list[tuple[float, int, object]] = []  # (finish, seq, commit)
    events: list[ScheduleEvent] = []
    assignments = []
    makespan = 0.0
    for e in range(num_evals):
        t, gid = heapq.heappop(free)
        while pending and pending[0][0] <= t:
            _, _, commit = heapq.heappop(pending)
            if commit is not None:
                commit()
        group = by_id[gid]
        config = issue(group, e)
        group.hp_under_eval = config.config_id
        events.append(ScheduleEvent(t, "issue", gid, config.config_id, done_evals[gid]))
        duration, commit = run_eval(group, config, e)
        finish = t + duration
        done_evals[gid] += 1
        heapq.heappush(pending, (finish, e, commit))
        events.append(
            ScheduleEvent(finish, "feedback", gid, config.config_id,
                          done_evals[gid], staleness=duration)
        )
        assignments.append((e, gid))
        makespan = max(makespan, finish)
        heapq.heappush(free, (finish, gid))
    while pending:
        _, _, commit = heapq.heappop(pending)
        if commit is not None:
            commit()
    events.sort(key=lambda ev: (ev.sim_time, ev.group_id, ev.event_kind))
    return DispatchResult(events, makespan, assignments)


def export_events_jsonl(events, path):
    with open(path, "w", newline="\n") as fh:
        for ev in events:
            fh.write(json.dumps(ev.to_dict(), sort_keys=True) + "\n")
