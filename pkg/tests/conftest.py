"""Shared fixtures: seeded training runs on the default synthetic corpus are
expensive, so each seed is trained once per session and reduced to the numbers
the acceptance tests need."""

import dataclasses
import time

import numpy as np
import pytest

from hetmoe import config as C
from hetmoe.core import Rng, mix64, sigmoid
from hetmoe.datagen import generate, skill_rows_for
from hetmoe.router import top1
from hetmoe.trainer import auc, evaluate, forward, prepare, split_indices, train, train_probe

SEEDS = (1, 2, 3, 4, 5)


@dataclasses.dataclass
class SeedRun:
    seed: int
    concat_auc: float
    weighted_auc: float
    fusion_seconds: float
    probe_auc: list
    top_expert_by_nation: list
    strong_by_nation: list
    max_dispatch_lb: float
    max_dispatch_no_lb: float
    hard_model: object


def _top1_test(model, test):
    return top1(forward(model, test, exact=True)["probs"])


def _run_seed(seed: int) -> SeedRun:
    t0 = time.perf_counter()
    cfg = C.load_config(None, [], seed)
    spec = C.dataset_spec(cfg)
    reg = C.registry(cfg)
    samples = generate(spec)
    tcfg = C.training_config(cfg)
    concat = C.model_settings(cfg, strategy="hard", fusion="concat")
    data = prepare(samples, reg, concat)
    splits = split_indices(data)
    tr, test = data.take(splits["train"]), data.take(splits["test"])
    nations = list(spec.nations)

    hard = train(samples, tcfg, reg, concat, prepared=data).model
    weighted = train(samples, tcfg, reg, C.model_settings(cfg, strategy="hard", fusion="weighted"),
                     prepared=data).model
    concat_auc = evaluate(hard, test, nations)["overall"]
    weighted_auc = evaluate(weighted, test, nations)["overall"]
    fusion_seconds = time.perf_counter() - t0

    probes = [train_probe(tr.H[e], tr.y, concat.d, tcfg, Rng(mix64(seed * 31 + e))) for e in range(len(reg))]
    probe_auc = [auc(sigmoid(p.logits(test.H[e])), test.y) for e, p in enumerate(probes)]

    first = _top1_test(hard, test)
    top = [int(np.argmax(np.bincount(first[test.nation_idx == i], minlength=len(reg))))
           for i in range(len(nations))]
    skills = skill_rows_for(spec, len(reg))
    strong = [[e for e in range(len(reg)) if skills[e][c] == max(s[c] for s in skills)] for c in nations]
    lb = np.bincount(first, minlength=len(reg)) / len(first)

    no_lb = train(samples, dataclasses.replace(tcfg, lambda_lb=0.0), reg, concat, prepared=data).model
    free = np.bincount(_top1_test(no_lb, test), minlength=len(reg)) / len(test)
    return SeedRun(seed, concat_auc, weighted_auc, fusion_seconds, probe_auc, top, strong,
                   float(lb.max()), float(free.max()), hard)


class SeedRuns:
    def __init__(self):
        self._runs = {}

    def __getitem__(self, seed: int) -> SeedRun:
        if seed not in self._runs:
            self._runs[seed] = _run_seed(seed)
        return self._runs[seed]

    def all(self):
        return [self[s] for s in SEEDS]


@pytest.fixture(scope="session")
def seed_runs():
    return SeedRuns()


@pytest.fixture
def report(capsys):
    """Print one acceptance line outside pytest's capture, then assert."""

    def emit(criterion: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {criterion:2d}] {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return emit
