"""Synthetic multilingual relevance corpus and its file formats.

Every nation writes with its own disjoint alphabet, so the nation is recoverable
from surface text. A positive pair plants ``overlap_tokens`` query words into the
title; a negative title avoids every query word.

Dataset file (JSON lines, UTF-8, one record per line, keys in this order)::

    {"id":0,"query":"...","title":"...","nation":"ID","label":1}

Embedding dump (CSV, ``\\n`` line endings)::

    id,label,nation,e0,e1,...,e{D-1}

with floats written by ``repr`` (shortest round-trip form).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .core import Rng, mix64
from .experts import NATIONS, Request

_ALPHABET_POOL = "abcdefghijklmnopqrstuvwxyz0123456789" + "αβγδεζηθικλμνξοπρστυφχψω"
_LETTERS_PER_NATION = 6


class DatasetFormatError(ValueError):
    """Malformed or inconsistent dataset file."""


@dataclass(frozen=True)
class Sample:
    request: Request
    label: int

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True)
class DatasetSpec:
    n_samples: int = 50_000
    nations: tuple[str, ...] = NATIONS
    positive_rate: float = 0.5
    vocab_size: int = 400
    overlap_tokens: int = 1
    query_len: tuple[int, int] = (2, 4)
    title_len: tuple[int, int] = (6, 10)
    skill_matrix: str = "default"
    seed: int = 1
    vocab_seeds: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not 0.0 < self.positive_rate < 1.0:
            raise ValueError("positive_rate must be in (0, 1)")
        if not self.nations:
            raise ValueError("nations must be non-empty")
        if len(self.nations) * _LETTERS_PER_NATION > len(_ALPHABET_POOL):
            raise ValueError(f"at most {len(_ALPHABET_POOL) // _LETTERS_PER_NATION} nations supported")
        if not 1 <= self.overlap_tokens <= self.query_len[0]:
            raise ValueError("overlap_tokens must be between 1 and the minimum query length")

    def vocab_seed(self, nation: str) -> int:
        if nation in self.vocab_seeds:
            return self.vocab_seeds[nation]
        return mix64(self.seed * 0x10001 + self.nations.index(nation) + 1)


def nation_alphabet(nations: Sequence[str], nation: str) -> str:
    i = list(nations).index(nation)
    return _ALPHABET_POOL[i * _LETTERS_PER_NATION:(i + 1) * _LETTERS_PER_NATION]


def _vocabulary(spec: DatasetSpec, nation: str) -> list[str]:
    rng = Rng(spec.vocab_seed(nation))
    letters = nation_alphabet(spec.nations, nation)
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < spec.vocab_size:
        length = 3 + rng.below(4)
        w = "".join(letters[rng.below(len(letters))] for _ in range(length))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _draw_distinct(rng: Rng, vocab: list[str], n: int, exclude: set[str]) -> list[str]:
    out: list[str] = []
    taken = set(exclude)
    while len(out) < n:
        w = vocab[rng.below(len(vocab))]
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def generate(spec: DatasetSpec) -> list[Sample]:
    """Deterministic corpus; nation of sample i is ``nations[i % len(nations)]``."""
    vocabs = {c: _vocabulary(spec, c) for c in spec.nations}
    rng = Rng(spec.seed)
    samples = []
    for i in range(spec.n_samples):
        nation = spec.nations[i % len(spec.nations)]
        vocab = vocabs[nation]
        label = 1 if rng.bernoulli(spec.positive_rate) else 0
        q_len = spec.query_len[0] + rng.below(spec.query_len[1] - spec.query_len[0] + 1)
        t_len = spec.title_len[0] + rng.below(spec.title_len[1] - spec.title_len[0] + 1)
        query = _draw_distinct(rng, vocab, q_len, set())
        title = _draw_distinct(rng, vocab, t_len, set(query))
        if label:
            picks = list(query)
            rng.shuffle(picks)
            for w in picks[:spec.overlap_tokens]:
                title[rng.below(len(title))] = w
        samples.append(Sample(Request(i, " ".join(query), " ".join(title), nation), label))
    return samples


def write_jsonl(samples: Sequence[Sample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            rec = {"id": s.request.id, "query": s.request.query, "title": s.request.title,
                   "nation": s.request.nation, "label": s.label}
            fh.write(json.dumps(rec, ensure_ascii=False, separators=(",", ":")) + "\n")


def read_jsonl(path) -> list[Sample]:
    samples: list[Sample] = []
    seen: set[int] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                req = Request(int(rec["id"]), str(rec["query"]), str(rec["title"]), str(rec["nation"]))
                sample = Sample(req, int(rec["label"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: malformed record ({exc})") from None
            if req.id in seen:
                raise DatasetFormatError(f"{path}:{lineno}: duplicate id {req.id}")
            seen.add(req.id)
            samples.append(sample)
    return samples


def dump_embeddings(samples: Sequence[Sample], model, registry, path) -> int:
    """Write fused representations (z for concat, h_mix for weighted) as CSV.

    Returns the embedding width.
    """
    from .trainer import embed  # trainer depends on this module

    emb = embed(model, registry, [s.request for s in samples])
    width = emb.shape[1]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "nation"] + [f"e{j}" for j in range(width)])
        for s, row in zip(samples, emb):
            w.writerow([s.request.id, s.label, s.request.nation] + [repr(float(v)) for v in row])
    return width


def skill_rows_for(spec: DatasetSpec, n_experts: int = 3) -> list[dict[str, float]]:
    """Resolve ``spec.skill_matrix`` to per-expert skill maps."""
    from .experts import default_skill_matrix, dominant_skill_matrix

    if spec.skill_matrix == "default":
        return default_skill_matrix(spec.nations, n_experts)
    if spec.skill_matrix == "dominant":
        return dominant_skill_matrix(spec.nations, n_experts)
    raise ValueError(f"unknown skill matrix {spec.skill_matrix!r}")


def ensure_parent(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p
