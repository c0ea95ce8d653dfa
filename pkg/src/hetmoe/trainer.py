"""End-to-end training of router, projections and head with hand-derived gradients.

The batched forward pass mirrors the per-request inference path (same kernels,
same summation order) so pipeline scores and trainer scores agree bit for bit.
Gradients are derived by hand; :func:`finite_diff_check` is the oracle for them.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Rng, affine_rows, mix64, relu, sigmoid, softmax
from .datagen import Sample
from .experts import Registry, Request, expert_forward_batch
from .fusion import ClassifierHead, ModelSettings, MoEModel, ProjectionLayer
from .router import (FeatureConfig, LoadBalanceStats, RouterParams, featurize_batch,
                     pseudo_label_assign, renormalised_gates, threshold_mask, top1, topk_mask)

STRATEGIES = ("rule", "pseudo", "soft", "hard", "fixed")
FUSIONS = ("concat", "weighted")

__all__ = ["Sample", "TrainingConfig", "cross_entropy", "total_loss", "backward", "finite_diff_check",
           "sgd_step", "train", "auc", "init_model", "prepare", "predict", "embed", "evaluate"]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    lambda_lb: float = 0.01
    lambda_entropy: float = 0.01
    learning_rate: float = 0.5
    batch_size: int = 128
    epochs: int = 12
    seed: int = 1
    lb_in_soft: bool = False
    probe_epochs: int = 3
    router_epochs: int = 3

    def __post_init__(self) -> None:
        if self.lambda_lb < 0 or self.lambda_entropy < 0:
            raise ValueError("loss coefficients must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


# --------------------------------------------------------------------------- losses


def cross_entropy(logit, y):
    """Binary cross-entropy from the pre-sigmoid logit: softplus(l) - y*l."""
    logit = np.asarray(logit, dtype=np.float64)
    out = np.maximum(logit, 0.0) - y * logit + np.log1p(np.exp(-np.abs(logit)))
    return float(out) if out.ndim == 0 else out


def total_loss(ce_mean: float, lb: float, entropy: float, config: TrainingConfig) -> float:
    return ce_mean + config.lambda_lb * lb + config.lambda_entropy * entropy


# --------------------------------------------------------------------------- setup


def init_model(settings: ModelSettings, hidden_dims: Sequence[int], seed: int) -> MoEModel:
    """Uniform(+-1/sqrt(fan_in)) in a fixed traversal order from one seeded stream."""
    rng = Rng(mix64(seed ^ 0x1417))
    n = len(hidden_dims)
    F = settings.f_text + len(settings.nations)
    d, m, width = settings.d, settings.m, settings.fused_width

    def block(shape, fan_in):
        a = 1.0 / math.sqrt(fan_in)
        return rng.uniform_array(shape, -a, a)

    router = RouterParams(block((n, F), F), block((n,), F))
    Ws, bs = [], []
    for di in hidden_dims:
        Ws.append(block((d, di), di))
        bs.append(block((d,), di))
    head = ClassifierHead(block((m, width), width), block((m,), width), block((1, m), m), block((1,), m))
    return MoEModel(settings, router, ProjectionLayer(Ws, bs, settings.l2_normalize), head)


@dataclass
class Prepared:
    """Cached router features and frozen expert states for a fixed sample list."""
    ids: np.ndarray
    X: np.ndarray
    H: list[np.ndarray]
    y: np.ndarray
    nation_idx: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, idx: np.ndarray) -> "Prepared":
        return Prepared(self.ids[idx], self.X[idx], [h[idx] for h in self.H], self.y[idx], self.nation_idx[idx])


def prepare(samples: Sequence[Sample] | Sequence[Request], registry: Registry,
            settings: ModelSettings) -> Prepared:
    requests = [s.request if isinstance(s, Sample) else s for s in samples]
    labels = [s.label if isinstance(s, Sample) else 0 for s in samples]
    fc = FeatureConfig(settings.f_text, tuple(settings.nations))
    return Prepared(
        ids=np.array([r.id for r in requests], dtype=np.int64),
        X=featurize_batch(requests, fc),
        H=[expert_forward_batch(p, requests) for p in registry],
        y=np.array(labels, dtype=np.float64),
        nation_idx=np.array([fc.nations.index(r.nation) for r in requests], dtype=np.int64),
    )


def split_of(request_id: int) -> str:
    """Deterministic 80/10/10 split keyed on the request id."""
    r = mix64(request_id + 0x5B1) % 10
    return "train" if r < 8 else ("val" if r == 8 else "test")


def split_indices(data: Prepared) -> dict[str, np.ndarray]:
    labels = np.array([split_of(int(i)) for i in data.ids])
    return {s: np.flatnonzero(labels == s) for s in ("train", "val", "test")}


# --------------------------------------------------------------------------- forward / backward


def _selection(model: MoEModel, data: Prepared, probs: np.ndarray) -> np.ndarray:
    s = model.settings
    n = probs.shape[1]
    if s.strategy == "hard":
        return topk_mask(probs, s.k)
    if s.strategy == "soft":
        return threshold_mask(probs, s.resolved_tau(n), s.resolved_k_max())
    if s.strategy == "pseudo":
        return topk_mask(probs, 1)
    if s.strategy == "rule":
        mask = np.zeros((len(data), n), dtype=bool)
        targets = np.array([s.rule_table[c] for c in s.nations])
        mask[np.arange(len(data)), targets[data.nation_idx]] = True
        return mask
    if s.strategy == "fixed":
        mask = np.zeros((len(data), n), dtype=bool)
        mask[:, s.fixed_expert] = True
        return mask
    raise ValueError(f"unknown strategy {s.strategy!r}")


def _router_trained(settings: ModelSettings) -> bool:
    return settings.strategy in ("hard", "soft")


def _l2n_forward(U):
    norm = np.maximum(np.sqrt((U * U).sum(axis=1, keepdims=True)), 1e-12)
    return U / norm, norm


def _lin(W, X, b, exact):
    return affine_rows(W, X, b) if exact else X @ W.T + b


def forward(model: MoEModel, data: Prepared, exact: bool = False) -> dict:
    """Batched forward pass.

    ``exact=True`` uses the row-stable kernel so each row is bit-identical to the
    per-request inference path; the default BLAS path is for training.
    """
    s = model.settings
    n = len(model.projections.W)
    if s.strategy in ("rule", "fixed"):
        probs = None
    else:
        probs = softmax(_lin(model.router.W, data.X, model.router.b, exact))
    mask = _selection(model, data, probs if probs is not None else np.zeros((len(data), n)))
    if probs is None:
        probs = mask.astype(np.float64)
    G = renormalised_gates(probs, mask)

    U, Hn, norms = [], [], []
    for e in range(n):
        u = _lin(model.projections.W[e], data.H[e], model.projections.b[e], exact)
        U.append(u)
        if s.l2_normalize:
            hn, nrm = _l2n_forward(u)
        else:
            hn, nrm = u, None
        Hn.append(hn)
        norms.append(nrm)

    B, d = len(data), s.d
    if s.fusion == "concat":
        slot = np.cumsum(mask, axis=1) - 1
        scale = G if s.gate_scaling else mask.astype(np.float64)
        Z = np.zeros((B, s.k * d))
        for e in range(n):
            for j in range(s.k):
                rows = mask[:, e] & (slot[:, e] == j)
                if rows.any():
                    Z[rows, j * d:(j + 1) * d] = scale[rows, e, None] * Hn[e][rows]
    else:
        slot = None
        Z = np.zeros((B, d))
        for e in range(n):
            Z = Z + G[:, e, None] * Hn[e]

    A = _lin(model.head.Wp, Z, model.head.bp, exact)
    R = relu(A)
    logit = _lin(model.head.Wc, R, model.head.bc, exact)[:, 0]
    return dict(probs=probs, mask=mask, G=G, U=U, Hn=Hn, norms=norms, slot=slot, Z=Z, A=A, R=R, logit=logit)


def _loss_parts(model: MoEModel, data: Prepared, fw: dict, config: TrainingConfig):
    ce = float(np.mean(cross_entropy(fw["logit"], data.y)))
    n = fw["probs"].shape[1]
    lb = ent = 0.0
    f = None
    s = model.settings
    use_lb = s.strategy == "hard" or (s.strategy == "soft" and config.lb_in_soft)
    use_ent = s.strategy == "soft"
    if _router_trained(s):
        f = np.bincount(top1(fw["probs"]), minlength=n) / len(data)
        P = fw["probs"].mean(axis=0)
        if use_lb:
            lb = float(n * np.dot(f, P))
        if use_ent:
            p = fw["probs"]
            with np.errstate(divide="ignore", invalid="ignore"):
                plogp = np.where(p > 0, p * np.log(p), 0.0)
            ent = float(-plogp.sum(axis=1).mean())
    total = ce + (config.lambda_lb * lb if use_lb else 0.0) + (config.lambda_entropy * ent if use_ent else 0.0)
    return total, ce, lb, ent, f, use_lb, use_ent


def _param_names(model: MoEModel) -> list[str]:
    return [name for name, _ in model.arrays()]


def backward(model: MoEModel, data: Prepared, config: TrainingConfig):
    """Loss, gradients (name -> array, same order as ``model.arrays()``) and LB stats."""
    if len(data) == 0:
        raise TrainingError("empty batch")
    s = model.settings
    fw = forward(model, data)
    total, ce, lb, ent, f, use_lb, use_ent = _loss_parts(model, data, fw, config)
    B = len(data)
    n = len(model.projections.W)
    d = s.d

    do = (sigmoid(fw["logit"]) - data.y) / B
    grads: dict[str, np.ndarray] = {}
    gWc = do[None, :] @ fw["R"]
    gbc = np.array([do.sum()])
    dA = (do[:, None] * model.head.Wc[0][None, :]) * (fw["A"] > 0)
    gWp = dA.T @ fw["Z"]
    gbp = dA.sum(axis=0)
    dZ = dA @ model.head.Wp

    mask, G = fw["mask"], fw["G"]
    dHn = [np.zeros((B, d)) for _ in range(n)]
    dG = np.zeros((B, n))
    if s.fusion == "concat":
        slot = fw["slot"]
        for e in range(n):
            for j in range(s.k):
                rows = mask[:, e] & (slot[:, e] == j)
                if not rows.any():
                    continue
                dz = dZ[rows, j * d:(j + 1) * d]
                if s.gate_scaling:
                    dHn[e][rows] = G[rows, e, None] * dz
                    dG[rows, e] = (dz * fw["Hn"][e][rows]).sum(axis=1)
                else:
                    dHn[e][rows] = dz
    else:
        for e in range(n):
            dHn[e] = G[:, e, None] * dZ
            dG[:, e] = (dZ * fw["Hn"][e]).sum(axis=1)

    for e in range(n):
        dU = dHn[e]
        if s.l2_normalize:
            hn, nrm = fw["Hn"][e], fw["norms"][e]
            dU = (dU - hn * (hn * dU).sum(axis=1, keepdims=True)) / nrm
        grads[f"proj.{e}.W"] = dU.T @ data.H[e]
        grads[f"proj.{e}.b"] = dU.sum(axis=0)

    gW_r = np.zeros_like(model.router.W)
    gb_r = np.zeros_like(model.router.b)
    stats = None
    if _router_trained(s):
        p = fw["probs"]
        denom = np.where(mask, p, 0.0).sum(axis=1, keepdims=True)
        dp = np.where(mask, (dG - (G * dG).sum(axis=1, keepdims=True)) / denom, 0.0)
        if s.fusion == "concat" and not s.gate_scaling:
            dp = np.zeros_like(dp)
        if use_lb:
            dp = dp + config.lambda_lb * n * f[None, :] / B
        if use_ent:
            with np.errstate(divide="ignore"):
                logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
            dp = dp - config.lambda_entropy * np.where(p > 0, logp + 1.0, 0.0) / B
        dl = p * (dp - (p * dp).sum(axis=1, keepdims=True))
        gW_r = dl.T @ data.X
        gb_r = dl.sum(axis=0)
        stats = LoadBalanceStats(f, p.mean(axis=0))

    ordered = {"router.W": gW_r, "router.b": gb_r}
    for e in range(n):
        ordered[f"proj.{e}.W"] = grads[f"proj.{e}.W"]
        ordered[f"proj.{e}.b"] = grads[f"proj.{e}.b"]
    ordered.update({"head.Wp": gWp, "head.bp": gbp, "head.Wc": gWc, "head.bc": gbc})

    if not math.isfinite(total):
        raise TrainingError(f"non-finite loss; first bad block: {_first_bad_block(model, ordered)}")
    for name, g in ordered.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter block {name}")
    return total, ordered, stats


def _first_bad_block(model: MoEModel, grads: dict) -> str:
    for name, arr in model.arrays():
        if not np.all(np.isfinite(arr)):
            return name
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            return name
    return "unknown"


def loss_value(model: MoEModel, data: Prepared, config: TrainingConfig):
    fw = forward(model, data)
    total = _loss_parts(model, data, fw, config)[0]
    return total, fw


def _signature(fw: dict) -> tuple:
    # piecewise structure: routing set, top-1 dispatch and ReLU pattern
    return (fw["mask"].tobytes(), top1(fw["probs"]).tobytes(), (fw["A"] > 0).tobytes())


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    checked: int
    skipped: int
    worst: str = ""


def finite_diff_check(model: MoEModel, data: Prepared, config: TrainingConfig, eps: float = 1e-5) -> FiniteDiffReport:
    """Central differences on every trainable coordinate.

    Coordinates whose perturbation changes the selected expert set, the top-1
    assignment or a ReLU's active side are skipped and counted.
    """
    _, grads, _ = backward(model, data, config)
    _, fw0 = loss_value(model, data, config)
    sig0 = _signature(fw0)
    trainable = set(grads)
    if not _router_trained(model.settings):
        trainable -= {"router.W", "router.b"}
    worst, worst_name, checked, skipped = 0.0, "", 0, 0
    for name, arr in model.arrays():
        if name not in trainable:
            continue
        g = grads[name]
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp, fwp = loss_value(model, data, config)
            flat[i] = orig - eps
            lm, fwm = loss_value(model, data, config)
            flat[i] = orig
            if _signature(fwp) != sig0 or _signature(fwm) != sig0:
                skipped += 1
                continue
            gn = (lp - lm) / (2 * eps)
            ga = gflat[i]
            rel = abs(ga - gn) / max(1e-8, abs(ga) + abs(gn))
            checked += 1
            if rel > worst:
                worst, worst_name = rel, f"{name}[{i}]"
    return FiniteDiffReport(worst, checked, skipped, worst_name)


def sgd_step(model: MoEModel, grads: dict, learning_rate: float, frozen: Sequence[str] = ()) -> MoEModel:
    """In-place ``theta -= lr * g`` over ``model.arrays()`` order; returns the model."""
    for name, arr in model.arrays():
        if name in frozen:
            continue
        g = grads[name]
        if g.shape != arr.shape:
            raise TrainingError(f"gradient shape {g.shape} does not match {name} {arr.shape}")
        arr -= learning_rate * g
    return model


# --------------------------------------------------------------------------- evaluation


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC: P(s+ > s-) + 0.5 P(s+ = s-), via one sort with tied mid-ranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(np.count_nonzero(y == 1))
    n_neg = int(np.count_nonzero(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined without both positive and negative labels")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s), dtype=np.float64)
    # tie groups: boundaries where the sorted score changes
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    mid = (starts + ends + 1) / 2.0  # 1-based average rank of each group
    ranks[order] = np.repeat(mid, ends - starts)
    # sum of ranks of positives minus its minimum value; half-integers are exact in float64
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def predict(model: MoEModel, data: Prepared, chunk: int = 2048) -> np.ndarray:
    out = np.empty(len(data))
    for start in range(0, len(data), chunk):
        idx = np.arange(start, min(len(data), start + chunk))
        out[idx] = sigmoid(forward(model, data.take(idx), exact=True)["logit"])
    return out


def dispatch_fractions(model: MoEModel, data: Prepared, fw: dict | None = None) -> np.ndarray:
    """Top-1 share of requests per expert under the model's routing."""
    if fw is None:
        fw = forward(model, data)
    n = fw["probs"].shape[1]
    if _router_trained(model.settings) or model.settings.strategy == "pseudo":
        first = top1(fw["probs"])
    else:
        first = np.argmax(fw["mask"], axis=1)
    return np.bincount(first, minlength=n) / len(data)


def embed(model: MoEModel, registry: Registry, requests: Sequence[Request]) -> np.ndarray:
    data = prepare(list(requests), registry, model.settings)
    return forward(model, data, exact=True)["Z"]


def evaluate(model: MoEModel, data: Prepared, nations: Sequence[str]) -> dict[str, float]:
    """Overall and per-nation AUC (NaN where a nation lacks one of the classes)."""
    scores = predict(model, data)
    out = {"overall": auc(scores, data.y)}
    for i, c in enumerate(nations):
        sel = data.nation_idx == i
        ys = data.y[sel]
        out[c] = auc(scores[sel], ys) if 0 < ys.sum() < len(ys) else float("nan")
    return out


# --------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: MoEModel
    metrics: list[dict] = field(default_factory=list)
    pseudo_labels: np.ndarray | None = None
    probe_auc: list[float] | None = None

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        n = len(self.model.projections.W)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "split", "loss", "auc"] + [f"dispatch_{e}" for e in range(n)])
        for row in self.metrics:
            w.writerow([row["epoch"], row["split"], repr(row["loss"]), repr(row["auc"])]
                       + [repr(float(x)) for x in row["dispatch"]])
        return buf.getvalue()


def _batches(rng: Rng, n: int, batch_size: int):
    order = list(range(n))
    rng.shuffle(order)
    for start in range(0, n, batch_size):
        yield np.array(order[start:start + batch_size], dtype=np.int64)


def _epoch_metrics(model, data, config, epoch, split, rows):
    loss, fw = loss_value(model, data, config)
    scores = sigmoid(fw["logit"])
    a = auc(scores, data.y) if 0 < data.y.sum() < len(data) else float("nan")
    rows.append(dict(epoch=epoch, split=split, loss=float(loss), auc=a,
                     dispatch=dispatch_fractions(model, data, fw)))


def _fit(model, train_data, val_data, config, rng, epochs, frozen=(), rows=None, epoch_offset=0):
    for epoch in range(epochs):
        for idx in _batches(rng, len(train_data), config.batch_size):
            _, grads, _ = backward(model, train_data.take(idx), config)
            sgd_step(model, grads, config.learning_rate, frozen)
        if rows is not None:
            _epoch_metrics(model, train_data, config, epoch_offset + epoch + 1, "train", rows)
            if len(val_data):
                _epoch_metrics(model, val_data, config, epoch_offset + epoch + 1, "val", rows)


# pseudo-label stage helpers -------------------------------------------------------


@dataclass
class Probe:
    W: np.ndarray
    b: np.ndarray
    w: np.ndarray
    c: float

    def logits(self, H: np.ndarray) -> np.ndarray:
        U = affine_rows(self.W, H, self.b)
        return U @ self.w + self.c


def train_probe(H: np.ndarray, y: np.ndarray, d: int, config: TrainingConfig, rng: Rng) -> Probe:
    """Projection + logistic readout on a single expert's states."""
    di = H.shape[1]
    a, a2 = 1.0 / math.sqrt(di), 1.0 / math.sqrt(d)
    probe = Probe(rng.uniform_array((d, di), -a, a), rng.uniform_array((d,), -a, a),
                  rng.uniform_array((d,), -a2, a2), 0.0)
    for _ in range(config.probe_epochs):
        for idx in _batches(rng, len(y), config.batch_size):
            Hb, yb = H[idx], y[idx]
            U = affine_rows(probe.W, Hb, probe.b)
            o = U @ probe.w + probe.c
            do = (sigmoid(o) - yb) / len(idx)
            dU = do[:, None] * probe.w[None, :]
            probe.w -= config.learning_rate * (do @ U)
            probe.c -= config.learning_rate * float(do.sum())
            probe.W -= config.learning_rate * (dU.T @ Hb)
            probe.b -= config.learning_rate * dU.sum(axis=0)
    return probe


def train_router_on_labels(model: MoEModel, X: np.ndarray, targets: np.ndarray,
                           config: TrainingConfig, rng: Rng) -> None:
    """Multinomial logistic regression of the router onto pseudo-labels."""
    n = model.router.n_experts
    for _ in range(config.router_epochs):
        for idx in _batches(rng, len(targets), config.batch_size):
            p = softmax(affine_rows(model.router.W, X[idx], model.router.b))
            onehot = np.zeros_like(p)
            onehot[np.arange(len(idx)), targets[idx]] = 1.0
            dl = (p - onehot) / len(idx)
            model.router.W -= config.learning_rate * (dl.T @ X[idx])
            model.router.b -= config.learning_rate * dl.sum(axis=0)
    assert model.router.W.shape[0] == n


def train(samples: Sequence[Sample], config: TrainingConfig, registry: Registry,
          settings: ModelSettings, prepared: Prepared | None = None) -> TrainResult:
    """Train under ``settings.strategy``; deterministic given (samples, config, settings)."""
    if not samples and prepared is None:
        raise TrainingError("empty dataset")
    if settings.strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {settings.strategy!r}")
    if settings.fusion not in FUSIONS:
        raise ValueError(f"unknown fusion {settings.fusion!r}")
    if settings.k > len(registry):
        raise ValueError(f"k={settings.k} exceeds the {len(registry)} registered experts")
    data = prepared if prepared is not None else prepare(samples, registry, settings)
    splits = split_indices(data)
    train_data, val_data = data.take(splits["train"]), data.take(splits["val"])
    if len(train_data) == 0:
        raise TrainingError("training split is empty")

    model = init_model(settings, registry.hidden_dims, config.seed)
    rng = Rng(mix64(config.seed ^ 0xBA7C4))
    rows: list[dict] = []
    result = TrainResult(model, rows)

    if settings.strategy in ("hard", "soft", "rule", "fixed"):
        frozen = () if _router_trained(settings) else ("router.W", "router.b")
        _fit(model, train_data, val_data, config, rng, config.epochs, frozen, rows)
        return result

    # pseudo-label routing: probes -> labels -> router -> fusion with router frozen
    probes = [train_probe(train_data.H[e], train_data.y, settings.d, config, rng.fork(e))
              for e in range(len(registry))]
    losses = np.stack([cross_entropy(p.logits(train_data.H[e]), train_data.y)
                       for e, p in enumerate(probes)], axis=1)
    labels = np.array([pseudo_label_assign(row) for row in losses], dtype=np.int64)
    result.pseudo_labels = labels
    if len(val_data) and 0 < val_data.y.sum() < len(val_data):
        result.probe_auc = [auc(sigmoid(p.logits(val_data.H[e])), val_data.y) for e, p in enumerate(probes)]
    train_router_on_labels(model, train_data.X, labels, config, rng)
    _fit(model, train_data, val_data, config, rng, config.epochs, ("router.W", "router.b"), rows)
    return result
