"""Request featurisation, the four routing strategies and the routing losses."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import affine_rows, hash64, softmax
from .experts import NATIONS, ConfigError, Request

DEFAULT_F_TEXT = 256
_NGRAM = 3
_FEATURE_SEED = 0xFEA7


@dataclass(frozen=True)
class FeatureConfig:
    f_text: int = DEFAULT_F_TEXT
    nations: tuple[str, ...] = NATIONS

    @property
    def width(self) -> int:
        return self.f_text + len(self.nations)


@dataclass
class RouterParams:
    W: np.ndarray  # (N, F)
    b: np.ndarray  # (N,)

    @property
    def n_experts(self) -> int:
        return self.W.shape[0]

    def copy(self) -> "RouterParams":
        return RouterParams(self.W.copy(), self.b.copy())


@dataclass(frozen=True)
class RoutingDecision:
    selected: tuple[tuple[int, float], ...]
    full_probs: np.ndarray
    strategy: str

    @property
    def expert_ids(self) -> list[int]:
        return [e for e, _ in self.selected]

    @property
    def gates(self) -> list[float]:
        return [g for _, g in self.selected]


@dataclass(frozen=True)
class LoadBalanceStats:
    dispatch_frac: np.ndarray
    mean_prob: np.ndarray

    @property
    def n_experts(self) -> int:
        return len(self.mean_prob)


class RuleTable(dict):
    """nation code -> expert id."""

    def validate(self, nations: Sequence[str], n_experts: int) -> None:
        missing = [c for c in nations if c not in self]
        if missing:
            raise ConfigError(f"rule table has no entry for nations {missing}")
        bad = {c: e for c, e in self.items() if not 0 <= e < n_experts}
        if bad:
            raise ConfigError(f"rule table targets unknown experts {bad}")


@functools.lru_cache(maxsize=1 << 16)
def _ngram_bucket(gram: str, f_text: int) -> int:
    return hash64(gram, _FEATURE_SEED) % f_text


@functools.lru_cache(maxsize=1 << 17)
def _text_block(query: str, title: str, f_text: int) -> np.ndarray:
    """Cached and read-only: repeated requests are common in batch replays."""
    block = _text_block_uncached(query, title, f_text)
    block.setflags(write=False)
    return block


def _text_block_uncached(query: str, title: str, f_text: int) -> np.ndarray:
    text = f"{query}|{title}".lower()
    if not query and not title:
        return np.zeros(f_text)
    idx = [_ngram_bucket(text[i:i + _NGRAM], f_text) for i in range(len(text) - _NGRAM + 1)]
    block = np.bincount(np.asarray(idx, dtype=np.int64), minlength=f_text).astype(np.float64)
    norm = math.sqrt(float(np.dot(block, block)))
    return block / norm if norm > 0.0 else block


def featurize(request: Request, config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Hashed char 3-gram counts of ``query|title`` (unit L2) followed by a nation one-hot."""
    x = np.zeros(config.width)
    x[:config.f_text] = _text_block(request.query, request.title, config.f_text)
    try:
        x[config.f_text + config.nations.index(request.nation)] = 1.0
    except ValueError:
        raise ConfigError(f"nation {request.nation!r} not in configured set {config.nations}") from None
    return x


def featurize_batch(requests: Sequence[Request], config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    out = np.empty((len(requests), config.width))
    for i, r in enumerate(requests):
        out[i] = featurize(r, config)
    return out


def router_probs(features: np.ndarray, params: RouterParams) -> np.ndarray:
    """Softmax gate distribution; accepts one feature vector or a (B, F) batch."""
    x = np.atleast_2d(features)
    p = softmax(affine_rows(params.W, x, params.b))
    return p[0] if np.ndim(features) == 1 else p


# --- selection rules, shared by the single-request ops and the batched trainer ---

def topk_mask(probs: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries per row; ties go to the lower index."""
    probs = np.atleast_2d(probs)
    n = probs.shape[1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    # stable sort on -p keeps lower ids first among equal probabilities
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    mask = np.zeros(probs.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def threshold_mask(probs: np.ndarray, tau: float, k_max: int) -> np.ndarray:
    """Experts with p > tau, capped to the k_max largest, at least the argmax."""
    probs = np.atleast_2d(probs)
    above = probs > tau
    capped = topk_mask(probs, min(k_max, probs.shape[1])) & above
    none = ~capped.any(axis=1)
    if none.any():
        capped[none] = topk_mask(probs[none], 1)
    return capped


def top1(probs: np.ndarray) -> np.ndarray:
    """Argmax per row with ties to the lower id."""
    return np.argmax(np.atleast_2d(probs), axis=1)


def renormalised_gates(probs: np.ndarray, mask: np.ndarray) -> np.ndarray:
    g = np.where(mask, probs, 0.0)
    return g / g.sum(axis=1, keepdims=True)


def _decision(probs: np.ndarray, mask: np.ndarray, strategy: str) -> RoutingDecision:
    g = renormalised_gates(probs[None, :], mask[None, :])[0]
    selected = tuple((int(e), float(g[e])) for e in np.flatnonzero(mask))
    return RoutingDecision(selected, probs, strategy)


def route_rule(request: Request, table: Mapping[str, int], n_experts: int | None = None) -> RoutingDecision:
    try:
        e = table[request.nation]
    except KeyError:
        raise ConfigError(f"no routing rule for nation {request.nation!r}") from None
    n = n_experts if n_experts is not None else max(table.values()) + 1
    probs = np.zeros(n)
    probs[e] = 1.0
    return RoutingDecision(((e, 1.0),), probs, "rule")


def route_soft(features: np.ndarray, params: RouterParams, tau: float, k_max: int) -> RoutingDecision:
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    p = router_probs(features, params)
    return _decision(p, threshold_mask(p, tau, k_max)[0], "soft")


def route_hard_topk(features: np.ndarray, params: RouterParams, k: int) -> RoutingDecision:
    p = router_probs(features, params)
    if k > len(p):
        raise ValueError(f"k={k} exceeds the number of experts {len(p)}")
    return _decision(p, topk_mask(p, k)[0], "hard")


def route_top1(features: np.ndarray, params: RouterParams, strategy: str = "pseudo") -> RoutingDecision:
    p = router_probs(features, params)
    return _decision(p, topk_mask(p, 1)[0], strategy)


def route_rows(probs: np.ndarray, strategy: str, *, k: int = 2, tau: float = 0.5,
               k_max: int = 2) -> list[RoutingDecision]:
    """Apply a strategy's selection rule to each row of a (B, N) distribution."""
    probs = np.atleast_2d(probs)
    if strategy == "hard":
        mask = topk_mask(probs, k)
    elif strategy == "soft":
        mask = threshold_mask(probs, tau, k_max)
    elif strategy in ("pseudo", "rule"):
        mask = topk_mask(probs, 1)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    gates = renormalised_gates(probs, mask).tolist()
    out = []
    for i, row in enumerate(mask.tolist()):
        g = gates[i]
        selected = tuple((e, g[e]) for e, on in enumerate(row) if on)
        out.append(RoutingDecision(selected, probs[i], strategy))
    return out


def route_from_probs(probs: np.ndarray, strategy: str, *, k: int = 2, tau: float = 0.5,
                     k_max: int = 2) -> RoutingDecision:
    """Apply a strategy's selection rule to an already computed distribution."""
    return route_rows(probs, strategy, k=k, tau=tau, k_max=k_max)[0]


def pseudo_label_assign(per_expert_losses: Sequence[float]) -> int:
    """Index of the smallest loss; ties go to the lower id."""
    return int(np.argmin(np.asarray(per_expert_losses, dtype=np.float64)))


def load_balance_stats(probs: np.ndarray) -> LoadBalanceStats:
    """Top-1 dispatch fractions and mean gate probabilities over a batch."""
    probs = np.atleast_2d(probs)
    n = probs.shape[1]
    f = np.bincount(top1(probs), minlength=n) / probs.shape[0]
    return LoadBalanceStats(f.astype(np.float64), probs.mean(axis=0))


def load_balance_loss(stats: LoadBalanceStats) -> float:
    """Switch-style auxiliary loss ``N * sum_i f_i * P_i``."""
    return float(stats.n_experts * np.dot(stats.dispatch_frac, stats.mean_prob))


def entropy_regularizer(full_probs: np.ndarray) -> float:
    p = np.asarray(full_probs, dtype=np.float64)
    nz = p > 0.0
    return float(-np.sum(p[nz] * np.log(p[nz])))
