"""Mock experts standing in for frozen LLM encoders.

Each expert maps a request to a fixed-width hidden vector. The vector is built
in a private latent basis and then rotated by an expert-specific orthogonal
matrix, so no two experts share coordinates:

* channel 0 carries the relevance evidence ``r = +1`` (query and title share a
  token) or ``r = -1``, scaled by ``LINEAR_GAIN * skill[nation]``, plus a
  request-level ambiguity term (``SHARED_NOISE``) that every expert sees;
* channels ``1..ENERGY_DIMS`` carry the shared tokens hashed into signed
  buckets, normalised to unit length and scaled by ``ENERGY_GAIN * skill``.
  This part is zero-mean, so only non-linear readouts see it (through the norm);
* every channel gets ``sqrt(1 - skill**2)`` times unit-variance noise seeded by
  the expert seed and the request text.

Everything is integer hashing plus float64 adds and multiplies, so outputs are
bit-reproducible and do not depend on batch composition.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .core import GOLDEN_GAMMA, MASK64, Rng, affine_rows, hash64, mix64, mix64_array, u64_to_unit

NATIONS: tuple[str, ...] = ("ID", "MY", "PH", "SG", "TH", "VN")

LINEAR_GAIN = 1.0
ENERGY_GAIN = 3.0
ENERGY_DIMS = 24
SHARED_NOISE = 0.5
_SHARED_KEY = 0x5A4ED


class ConfigError(ValueError):
    """Invalid expert, registry or routing configuration."""


@dataclass(frozen=True)
class Request:
    id: int
    query: str
    title: str
    nation: str


@dataclass(frozen=True)
class ExpertProfile:
    id: int
    name: str
    hidden_dim: int
    skill: Mapping[str, float]
    base_latency_us: int = 1000
    per_item_latency_us: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.hidden_dim < 2:
            raise ConfigError(f"expert {self.name!r}: hidden_dim must be >= 2")
        if self.base_latency_us < 0 or self.per_item_latency_us < 0:
            raise ConfigError(f"expert {self.name!r}: latencies must be non-negative")
        for nation, s in self.skill.items():
            if not 0.0 <= s <= 1.0:
                raise ConfigError(f"expert {self.name!r}: skill[{nation}]={s} outside [0, 1]")


@dataclass(frozen=True)
class ExpertOutput:
    expert_id: int
    hidden: np.ndarray = field(repr=False)


class Registry:
    """Immutable id -> profile lookup."""

    def __init__(self, profiles: Iterable[ExpertProfile]) -> None:
        self._by_id: dict[int, ExpertProfile] = {}
        for p in profiles:
            if p.id in self._by_id:
                raise ConfigError(f"duplicate expert id {p.id}")
            self._by_id[p.id] = p
        if not self._by_id:
            raise ConfigError("registry needs at least one expert")
        if sorted(self._by_id) != list(range(len(self._by_id))):
            raise ConfigError("expert ids must be dense 0..N-1")
        self._by_name = {p.name: p for p in self._by_id.values()}
        if len(self._by_name) != len(self._by_id):
            raise ConfigError("expert names must be unique")

    def get(self, expert_id: int) -> ExpertProfile:
        try:
            return self._by_id[expert_id]
        except KeyError:
            raise ConfigError(f"unknown expert id {expert_id}") from None

    def by_name(self, name: str) -> ExpertProfile:
        try:
            return self._by_name[name]
        except KeyError:
            raise ConfigError(f"unknown expert name {name!r}") from None

    def __len__(self) -> int:
        return len(self._by_id)

    def __iter__(self) -> Iterator[ExpertProfile]:
        return (self._by_id[i] for i in range(len(self._by_id)))

    @property
    def hidden_dims(self) -> list[int]:
        return [p.hidden_dim for p in self]


def registry_build(profiles: Sequence[ExpertProfile]) -> Registry:
    return Registry(profiles)


def simulate_latency(profile: ExpertProfile, batch_size: int) -> int:
    """Virtual batch latency in microseconds: ``base + batch_size * per_item``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return profile.base_latency_us + batch_size * profile.per_item_latency_us


@functools.lru_cache(maxsize=None)
def _rotation(seed: int, dim: int) -> np.ndarray:
    rng = Rng(mix64(seed ^ 0x5EED_0F_0F))
    a = np.array([[rng.normal() for _ in range(dim)] for _ in range(dim)])
    q, r = np.linalg.qr(a)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    q.setflags(write=False)
    return q


@functools.lru_cache(maxsize=1 << 16)
def _token_hash(token: str, seed: int) -> int:
    return hash64(token, seed)


def shared_tokens(request: Request) -> list[str]:
    return sorted(set(request.query.split()) & set(request.title.split()))


@functools.lru_cache(maxsize=1 << 17)
def _text_digest(nation: str, query: str, title: str) -> int:
    h = _token_hash(nation, 0x4E)
    for tok in query.split():
        h = mix64(h ^ _token_hash(tok, 0x51))
    h = mix64(h + GOLDEN_GAMMA)
    for tok in title.split():
        h = mix64(h ^ _token_hash(tok, 0x54))
    return h


def _request_key(request: Request, seed: int) -> int:
    return mix64(seed ^ _text_digest(request.nation, request.query, request.title))


def _latent_signal(profile: ExpertProfile, request: Request) -> tuple[np.ndarray, float]:
    try:
        skill = profile.skill[request.nation]
    except KeyError:
        raise ConfigError(
            f"expert {profile.name!r} has no skill entry for nation {request.nation!r}"
        ) from None
    d = profile.hidden_dim
    v = np.zeros(d)
    shared = shared_tokens(request)
    v[0] = LINEAR_GAIN * skill * (1.0 if shared else -1.0)
    if shared:
        width = min(ENERGY_DIMS, d - 1)
        buckets = np.zeros(width)
        for tok in shared:
            h = _token_hash(tok, profile.seed)
            buckets[h % width] += 1.0 if (h >> 63) else -1.0
        norm = math.sqrt(float(np.dot(buckets, buckets)))
        if norm > 0.0:
            v[1:1 + width] = (ENERGY_GAIN * skill / norm) * buckets
    return v, skill


def _noise(keys: np.ndarray, dim: int) -> np.ndarray:
    """Irwin-Hall(4) noise rescaled to unit variance, one row per key."""
    ctr = (np.arange(4 * dim, dtype=np.uint64) + np.uint64(1)) * np.uint64(GOLDEN_GAMMA)
    u = u64_to_unit(mix64_array(keys[:, None] + ctr[None, :]))
    s = u.reshape(len(keys), dim, 4).sum(axis=2)
    return (s - 2.0) * math.sqrt(3.0)


def expert_forward_batch(profile: ExpertProfile, requests: Sequence[Request]) -> np.ndarray:
    """Hidden vectors for many requests, shape (len(requests), hidden_dim).

    Row i is bit-identical to ``expert_forward(profile, requests[i]).hidden``.
    """
    d = profile.hidden_dim
    n = len(requests)
    latent = np.empty((n, d))
    skills = np.empty(n)
    keys = np.empty(n, dtype=np.uint64)
    shared_keys = np.empty(n, dtype=np.uint64)
    for i, req in enumerate(requests):
        latent[i], skills[i] = _latent_signal(profile, req)
        keys[i] = _request_key(req, profile.seed) & MASK64
        shared_keys[i] = _request_key(req, _SHARED_KEY) & MASK64
    if n:
        # request-level ambiguity seen by every expert, then private noise
        latent[:, 0] += (LINEAR_GAIN * SHARED_NOISE) * skills * _noise(shared_keys, 1)[:, 0]
        latent += np.sqrt(np.maximum(0.0, 1.0 - skills * skills))[:, None] * _noise(keys, d)
    return affine_rows(_rotation(profile.seed, d), latent)


def expert_forward(profile: ExpertProfile, request: Request) -> ExpertOutput:
    hidden = expert_forward_batch(profile, [request])[0]
    return ExpertOutput(profile.id, hidden)


def default_skill_matrix(nations: Sequence[str] = NATIONS, n_experts: int = 3,
                         strong: float = 0.9, weak: float = 0.2) -> list[dict[str, float]]:
    """Every nation gets exactly two strong experts; each expert is strong on 4 of 6.

    Nation j is strong for experts ``j % N`` and ``(j + 1) % N`` after grouping the
    nations in consecutive pairs, i.e. for six nations and three experts:
    (ID, MY) -> {0, 1}, (PH, SG) -> {1, 2}, (TH, VN) -> {2, 0}.
    """
    rows = [{c: weak for c in nations} for _ in range(n_experts)]
    for j, c in enumerate(nations):
        g = j // 2
        rows[g % n_experts][c] = strong
        rows[(g + 1) % n_experts][c] = strong
    return rows


def dominant_skill_matrix(nations: Sequence[str] = NATIONS, n_experts: int = 3,
                          dominant: int = 0, strong: float = 0.9,
                          weak: float = 0.2) -> list[dict[str, float]]:
    """One expert strong everywhere, the rest weak everywhere."""
    return [{c: (strong if e == dominant else weak) for c in nations} for e in range(n_experts)]


DEFAULT_HIDDEN_DIMS = (32, 48, 64)
DEFAULT_LATENCIES = ((2000, 30), (3000, 45), (2500, 70))


def default_profiles(skill_rows: Sequence[Mapping[str, float]] | None = None,
                     hidden_dims: Sequence[int] = DEFAULT_HIDDEN_DIMS,
                     latencies: Sequence[tuple[int, int]] = DEFAULT_LATENCIES,
                     seed: int = 7) -> list[ExpertProfile]:
    if skill_rows is None:
        skill_rows = default_skill_matrix(n_experts=len(hidden_dims))
    names = ("alpha", "beta", "gamma", "delta", "epsilon", "zeta")
    return [
        ExpertProfile(
            id=i,
            name=names[i] if i < len(names) else f"expert{i}",
            hidden_dim=hidden_dims[i],
            skill=dict(skill_rows[i]),
            base_latency_us=latencies[i][0],
            per_item_latency_us=latencies[i][1],
            seed=mix64(seed * 1_000_003 + i),
        )
        for i in range(len(hidden_dims))
    ]
