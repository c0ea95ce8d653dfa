"""Three-stage offline batch inference: bulk routing, per-expert batches, late fusion.

Two clocks are supported. The virtual clock charges each expert batch
``simulate_latency`` (optionally with seeded jitter) and each request a fixed
routing and fusion cost; it is exactly reproducible. The wall clock measures
elapsed real time around the same three stages.

Device model: every expert owns one device. A wave runs the expert batches of
one request batch; in parallel mode its makespan is the slowest expert batch,
in serial mode the sum of all of them.
"""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import Rng, affine_rows, mix64, sigmoid, softmax
from .experts import ConfigError, ExpertOutput, Registry, Request, expert_forward_batch, simulate_latency
from .fusion import MoEModel, _l2n, classify, concat_fuse, project, weighted_fuse
from .router import FeatureConfig, RoutingDecision, featurize_batch, route_rows, route_rule

MODES = ("parallel", "serial")
CLOCKS = ("virtual", "wall")


class IncompleteResultsError(RuntimeError):
    """A request reached fusion without all of its selected expert outputs."""


class ExpertFailure(RuntimeError):
    """Raised by a failure hook to fail a whole expert batch."""


@dataclass
class RoutingTable:
    decisions: dict[int, RoutingDecision]
    order: list[int]

    def __len__(self) -> int:
        return len(self.order)

    def __getitem__(self, request_id: int) -> RoutingDecision:
        return self.decisions[request_id]

    def items(self):
        return ((rid, self.decisions[rid]) for rid in self.order)


@dataclass(frozen=True)
class ExpertBatch:
    expert_id: int
    request_ids: tuple[int, ...]


@dataclass
class ExecutionResult:
    outputs: dict[tuple[int, int], ExpertOutput]
    failed: dict[int, str]
    makespan_us: float
    busy_us: dict[int, float]
    wall_s: float
    wall_busy_s: dict[int, float]
    completion_order: list[int]


@dataclass
class ThroughputReport:
    mode: str
    clock: str
    batches_run: int
    requests: int
    total_time_s: float
    qps: float
    busy_s: dict[int, float]
    stage_s: dict[str, float]
    expert_items: int
    failed: int = 0

    def rows(self) -> list[tuple[str, str]]:
        out = [("mode", self.mode), ("clock", self.clock), ("batches_run", str(self.batches_run)),
               ("requests", str(self.requests)), ("total_time_s", repr(self.total_time_s)),
               ("qps", repr(self.qps)), ("expert_items", str(self.expert_items)), ("failed", str(self.failed))]
        out += [(f"stage_{k}_s", repr(v)) for k, v in self.stage_s.items()]
        out += [(f"busy_expert_{e}_s", repr(v)) for e, v in sorted(self.busy_s.items())]
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        rows = self.rows()
        w.writerow([k for k, _ in rows])
        w.writerow([v for _, v in rows])
        return buf.getvalue()

    def to_table(self) -> str:
        rows = self.rows()
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"


# --------------------------------------------------------------------------- stage 1


def _fixed_decision(expert_id: int, n: int) -> RoutingDecision:
    probs = np.zeros(n)
    probs[expert_id] = 1.0
    return RoutingDecision(((expert_id, 1.0),), probs, "fixed")


def bulk_route(requests: Sequence[Request], model: MoEModel) -> RoutingTable:
    """One routing decision per request from a fixed router snapshot."""
    if not requests:
        raise ValueError("bulk_route needs at least one request")
    ids = [r.id for r in requests]
    if len(set(ids)) != len(ids):
        raise ValueError("request ids must be unique within a batch")
    s = model.settings
    n = model.router.n_experts
    decisions: dict[int, RoutingDecision] = {}
    if s.strategy == "rule":
        for r in requests:
            decisions[r.id] = route_rule(r, s.rule_table, n)
    elif s.strategy == "fixed":
        for r in requests:
            decisions[r.id] = _fixed_decision(s.fixed_expert, n)
    elif s.strategy in ("hard", "soft", "pseudo"):
        X = featurize_batch(requests, FeatureConfig(s.f_text, tuple(s.nations)))
        probs = softmax(affine_rows(model.router.W, X, model.router.b))
        rows = route_rows(probs, s.strategy, k=s.k, tau=s.resolved_tau(n), k_max=s.resolved_k_max())
        decisions = {r.id: dec for r, dec in zip(requests, rows)}
    else:
        raise ConfigError(f"unknown strategy {s.strategy!r}")
    return RoutingTable(decisions, ids)


# --------------------------------------------------------------------------- stage 2


def build_expert_batches(table: RoutingTable) -> list[ExpertBatch]:
    """Group request ids by selected expert; batches by expert id, ids ascending."""
    groups: dict[int, list[int]] = {}
    for rid, dec in table.items():
        for e in dec.expert_ids:
            groups.setdefault(e, []).append(rid)
    return [ExpertBatch(e, tuple(sorted(groups[e]))) for e in sorted(groups)]


FailureHook = Callable[[int, tuple[int, ...]], Iterable[int]]


def _run_batch(batch: ExpertBatch, registry: Registry, requests: Mapping[int, Request],
               failure_hook: FailureHook | None):
    t0 = time.perf_counter()
    failed: dict[int, str] = {}
    rids = batch.request_ids
    if failure_hook is not None:
        try:
            bad = set(failure_hook(batch.expert_id, rids))
        except ExpertFailure as exc:
            return batch.expert_id, (), None, {r: f"expert {batch.expert_id}: {exc}" for r in rids}, 0.0
        failed = {r: f"expert {batch.expert_id} failed" for r in rids if r in bad}
        rids = tuple(r for r in rids if r not in bad)
    hidden = expert_forward_batch(registry.get(batch.expert_id), [requests[r] for r in rids]) if rids else None
    return batch.expert_id, rids, hidden, failed, time.perf_counter() - t0


def execute(batches: Sequence[ExpertBatch], registry: Registry, requests: Mapping[int, Request],
            mode: str = "parallel", *, shuffle_seed: int | None = None,
            failure_hook: FailureHook | None = None, jitter: float = 0.0,
            jitter_seed: int = 0, pool: ThreadPoolExecutor | None = None) -> ExecutionResult:
    """Run every expert batch; outputs are identical for both modes.

    ``shuffle_seed`` permutes submission order (a scheduler-shuffle mode for
    adversarial ordering tests). ``jitter`` adds a seeded uniform fraction in
    ``[0, jitter)`` to each virtual batch latency. A long-lived ``pool`` may be
    passed in to avoid starting worker threads for every wave.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    order = list(batches)
    if shuffle_seed is not None:
        Rng(shuffle_seed).shuffle(order)
    t0 = time.perf_counter()
    completed = []
    if mode == "parallel" and len(order) > 1:
        # one worker per expert: at most one in-flight batch per expert
        own = pool is None
        if own:
            pool = ThreadPoolExecutor(max_workers=len(order))
        try:
            futures = [pool.submit(_run_batch, b, registry, requests, failure_hook) for b in order]
            completed = [f.result() for f in as_completed(futures)]
        finally:
            if own:
                pool.shutdown()
    else:
        completed = [_run_batch(b, registry, requests, failure_hook) for b in order]
    wall = time.perf_counter() - t0

    # barrier passed: merge in (expert id, request id) order
    outputs: dict[tuple[int, int], ExpertOutput] = {}
    failed: dict[int, str] = {}
    for e, rids, hidden, bad, _ in sorted(completed, key=lambda c: c[0]):
        for i, r in enumerate(rids):
            outputs[(r, e)] = ExpertOutput(e, hidden[i])
        failed.update(bad)

    busy: dict[int, float] = {}
    for b in sorted(batches, key=lambda b: b.expert_id):
        lat = float(simulate_latency(registry.get(b.expert_id), len(b.request_ids)))
        if jitter > 0.0:
            rng = Rng(mix64(jitter_seed * 0x9E37 + b.expert_id))
            lat *= 1.0 + rng.uniform(0.0, jitter)
        busy[b.expert_id] = lat
    if not busy:
        makespan = 0.0
    elif mode == "parallel":
        makespan = max(busy.values())
    else:
        makespan = float(sum(busy.values()))
    wall_busy = {c[0]: c[4] for c in completed}
    return ExecutionResult(outputs, failed, makespan, busy, wall, wall_busy, [c[0] for c in completed])


# --------------------------------------------------------------------------- stage 3


def _collect(table: RoutingTable, outputs: Mapping[tuple[int, int], ExpertOutput],
             skip: Iterable[int] = ()):
    skip = set(skip)
    for rid, dec in table.items():
        if rid in skip:
            continue
        for e in dec.expert_ids:
            if (rid, e) not in outputs:
                raise IncompleteResultsError(f"request {rid} is missing the output of expert {e}")
        yield rid, dec


def late_fuse_reference(table: RoutingTable, outputs: Mapping[tuple[int, int], ExpertOutput],
                        model: MoEModel) -> dict[int, float]:
    """Straight per-request loop: project, fuse, classify."""
    s = model.settings
    scores: dict[int, float] = {}
    for rid, dec in _collect(table, outputs):
        projected = {e: project(outputs[(rid, e)], model.projections) for e in dec.expert_ids}
        if s.fusion == "concat":
            z = concat_fuse(dec, projected, s.k, s.gate_scaling)
        else:
            z = weighted_fuse(dec, projected)
        scores[rid] = classify(z, model.head)
    return scores


def late_fuse(table: RoutingTable, outputs: Mapping[tuple[int, int], ExpertOutput],
              model: MoEModel, skip: Iterable[int] = ()) -> dict[int, float]:
    """Batched fusion; every score is bit-identical to :func:`late_fuse_reference`.

    Requests listed in ``skip`` (failed upstream) are left out of the result.
    """
    s = model.settings
    n = len(model.projections.W)
    pending = list(_collect(table, outputs, skip))
    if not pending:
        return {}
    B, d = len(pending), s.d
    width = s.k * d if s.fusion == "concat" else d
    Z = np.zeros((B, width))
    gate_of = [dict(dec.selected) for _, dec in pending]
    if s.fusion == "concat":
        slot_of = [{e: j for j, e in enumerate(sorted(g))} for g in gate_of]
        for j, g in enumerate(gate_of):
            if len(g) > s.k:
                raise IncompleteResultsError(f"request {pending[j][0]}: {len(g)} experts for {s.k} slots")
    for e in range(n):
        rows = [i for i, g in enumerate(gate_of) if e in g]
        if not rows:
            continue
        H = np.stack([outputs[(pending[i][0], e)].hidden for i in rows])
        h = affine_rows(model.projections.W[e], H, model.projections.b[e])
        if model.projections.l2_normalize:
            h = _l2n(h)
        gates = np.array([gate_of[i][e] for i in rows])
        if s.fusion == "concat":
            scaled = gates[:, None] * h if s.gate_scaling else h
            for r, i in enumerate(rows):
                j = slot_of[i][e]
                Z[i, j * d:(j + 1) * d] = scaled[r]
        else:
            Z[rows] = Z[rows] + gates[:, None] * h
    hidden = np.maximum(affine_rows(model.head.Wp, Z, model.head.bp), 0.0)
    logits = affine_rows(model.head.Wc, hidden, model.head.bc)[:, 0]
    probs = sigmoid(logits)
    return {rid: float(probs[i]) for i, (rid, _) in enumerate(pending)}


# --------------------------------------------------------------------------- whole pipeline


@dataclass
class BatchRun:
    table: RoutingTable
    execution: ExecutionResult
    scores: dict[int, float]


def run_batch(requests: Sequence[Request], model: MoEModel, registry: Registry,
              mode: str = "parallel", **execute_kw) -> BatchRun:
    table = bulk_route(requests, model)
    batches = build_expert_batches(table)
    by_id = {r.id: r for r in requests}
    result = execute(batches, registry, by_id, mode, **execute_kw)
    scores = late_fuse(table, result.outputs, model, skip=result.failed)
    return BatchRun(table, result, scores)


def score_all(requests: Sequence[Request], model: MoEModel, registry: Registry,
              mode: str = "parallel", batch_size: int = 1024, **execute_kw) -> dict[int, float]:
    """Score a whole dataset through the pipeline in consecutive batches."""
    scores: dict[int, float] = {}
    with ThreadPoolExecutor(max_workers=len(registry)) as pool:
        execute_kw.setdefault("pool", pool)
        for start in range(0, len(requests), batch_size):
            scores.update(run_batch(requests[start:start + batch_size], model, registry, mode,
                                    **execute_kw).scores)
    return scores


@dataclass
class BenchSettings:
    mode: str = "parallel"
    clock: str = "virtual"
    n_batches: int = 1000
    batch_size: int = 128
    route_cost_us: float = 1.0
    fuse_cost_us: float = 1.0
    jitter: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"pipeline.mode must be one of {MODES}")
        if self.clock not in CLOCKS:
            raise ConfigError(f"pipeline.clock must be one of {CLOCKS}")
        if self.n_batches < 1 or self.batch_size < 1:
            raise ConfigError("pipeline.n_batches and pipeline.batch_size must be >= 1")
        if self.route_cost_us < 0 or self.fuse_cost_us < 0 or self.jitter < 0:
            raise ConfigError("pipeline costs and jitter must be non-negative")


def _bench_wave(b, requests, model, registry, settings, pool, stage, busy) -> tuple[int, int]:
    """One request batch through all three stages; accumulates into stage and busy."""
    n, B = len(requests), settings.batch_size
    start = (b * B) % n
    batch = [requests[(start + i) % n] for i in range(B)]
    t0 = time.perf_counter()
    table = bulk_route(batch, model)
    batches = build_expert_batches(table)
    t1 = time.perf_counter()
    result = execute(batches, registry, {r.id: r for r in batch}, settings.mode,
                     jitter=settings.jitter, jitter_seed=mix64(settings.seed + b), pool=pool)
    t2 = time.perf_counter()
    late_fuse(table, result.outputs, model, skip=result.failed)
    t3 = time.perf_counter()
    if settings.clock == "virtual":
        stage["route"] += settings.route_cost_us * B / 1e6
        stage["experts"] += result.makespan_us / 1e6
        stage["fuse"] += settings.fuse_cost_us * B / 1e6
        for e, us in result.busy_us.items():
            busy[e] += us / 1e6
    else:
        stage["route"] += t1 - t0
        stage["experts"] += t2 - t1
        stage["fuse"] += t3 - t2
        for e, sec in result.wall_busy_s.items():
            busy[e] += sec
    return sum(len(x.request_ids) for x in batches), len(result.failed)


def qps_bench(requests: Sequence[Request], model: MoEModel, registry: Registry,
              settings: BenchSettings = BenchSettings()) -> ThroughputReport:
    """Run ``n_batches`` consecutive batches (cycling through the data) end to end."""
    n = len(requests)
    B = settings.batch_size
    if n < B:
        raise ValueError(f"need at least batch_size={B} requests, got {n}")
    stage = {"route": 0.0, "experts": 0.0, "fuse": 0.0}
    busy = {p.id: 0.0 for p in registry}
    items = failed = 0
    pool = ThreadPoolExecutor(max_workers=len(registry)) if settings.mode == "parallel" else None
    try:
        for b in range(settings.n_batches):
            di, df = _bench_wave(b, requests, model, registry, settings, pool, stage, busy)
            items += di
            failed += df
    finally:
        if pool is not None:
            pool.shutdown()
    total = stage["route"] + stage["experts"] + stage["fuse"]
    reqs = settings.n_batches * B
    return ThroughputReport(settings.mode, settings.clock, settings.n_batches, reqs, total,
                            reqs / total if total > 0 else float("inf"), busy, stage, items, failed)
