"""Projection of expert states, concatenation / weighted fusion, the MLP head,
and the model checkpoint format.

Checkpoint layout (all integers little-endian)::

    magic      4 bytes  b"HMOE"
    version    u32      1
    meta_len   u32      length of the UTF-8 JSON settings blob
    meta       bytes    json.dumps(settings, sort_keys=True)
    n_arrays   u32
    repeated n_arrays times:
        name_len u16, name (UTF-8)
        ndim     u8,  shape as ndim x u64
        data     float64 little-endian, C order

Array names: ``router.W``, ``router.b``, ``proj.<i>.W``, ``proj.<i>.b``,
``head.Wp``, ``head.bp``, ``head.Wc``, ``head.bc``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import DimensionError, affine, affine_rows, relu, sigmoid
from .experts import NATIONS, ExpertOutput
from .router import RouterParams, RoutingDecision

CHECKPOINT_MAGIC = b"HMOE"
CHECKPOINT_VERSION = 1


class FusionError(ValueError):
    """A selected expert's projected state is missing or has the wrong width."""


class CheckpointError(ValueError):
    pass


@dataclass
class ProjectionLayer:
    W: list[np.ndarray]  # W[i] is (d, d_i)
    b: list[np.ndarray]  # b[i] is (d,)
    l2_normalize: bool = False

    @property
    def dim(self) -> int:
        return self.W[0].shape[0]

    def __post_init__(self) -> None:
        if len(self.W) != len(self.b) or not self.W:
            raise DimensionError("need one (W, b) pair per expert")
        d = self.W[0].shape[0]
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            if W.shape[0] != d or b.shape != (d,):
                raise DimensionError(f"projection {i} does not map to the shared width {d}")


@dataclass(frozen=True)
class FusedRepresentation:
    z: np.ndarray
    slot_ids: tuple[int, ...]
    slot_gates: tuple[float, ...]


@dataclass
class ClassifierHead:
    Wp: np.ndarray  # (m, in)
    bp: np.ndarray  # (m,)
    Wc: np.ndarray  # (1, m)
    bc: np.ndarray  # (1,)

    @property
    def in_width(self) -> int:
        return self.Wp.shape[1]


def _l2n(v: np.ndarray) -> np.ndarray:
    n = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    return v / np.maximum(n, 1e-12)


def project(output: ExpertOutput, layer: ProjectionLayer) -> np.ndarray:
    """h' = W_i h_i + b_i (optionally L2-normalised)."""
    i = output.expert_id
    if not 0 <= i < len(layer.W):
        raise FusionError(f"no projection for expert {i}")
    if output.hidden.shape != (layer.W[i].shape[1],):
        raise FusionError(
            f"expert {i} state has width {output.hidden.shape[0]}, projection expects {layer.W[i].shape[1]}")
    h = affine(layer.W[i], output.hidden, layer.b[i])
    return _l2n(h) if layer.l2_normalize else h


def project_rows(expert_id: int, hidden: np.ndarray, layer: ProjectionLayer) -> np.ndarray:
    h = affine_rows(layer.W[expert_id], hidden, layer.b[expert_id])
    return _l2n(h) if layer.l2_normalize else h


def _selected_states(decision: RoutingDecision, projected: Mapping[int, np.ndarray]):
    out = []
    for e, g in decision.selected:
        if e not in projected:
            raise FusionError(f"selected expert {e} has no projected state")
        out.append((e, g, np.asarray(projected[e], dtype=np.float64)))
    return out


def concat_fuse(decision: RoutingDecision, projected: Mapping[int, np.ndarray], k: int,
                gate_scaling: bool = True) -> FusedRepresentation:
    """Fixed budget of k slots ordered by expert id; slot = gate * h' (or h' unscaled)."""
    states = _selected_states(decision, projected)
    if len(states) > k:
        raise FusionError(f"{len(states)} experts selected but only {k} slots")
    d = states[0][2].shape[0]
    z = np.zeros(k * d)
    ids, gates = [], []
    for slot, (e, g, h) in enumerate(sorted(states, key=lambda s: s[0])):
        if h.shape != (d,):
            raise FusionError("projected states disagree on the shared width")
        z[slot * d:(slot + 1) * d] = g * h if gate_scaling else h
        ids.append(e)
        gates.append(g)
    gates += [0.0] * (k - len(ids))
    return FusedRepresentation(z, tuple(ids), tuple(gates))


def weighted_fuse(decision: RoutingDecision, projected: Mapping[int, np.ndarray]) -> np.ndarray:
    """Scalar mixing: sum of gate * h' over the selected experts (ascending id)."""
    states = sorted(_selected_states(decision, projected), key=lambda s: s[0])
    out = np.zeros_like(states[0][2])
    for _, g, h in states:
        out = out + g * h
    return out


def classify_logit(z, head: ClassifierHead) -> float:
    z = z.z if isinstance(z, FusedRepresentation) else np.asarray(z, dtype=np.float64)
    if z.shape != (head.in_width,):
        raise DimensionError(f"head expects width {head.in_width}, got {z.shape}")
    hidden = relu(affine(head.Wp, z, head.bp))
    return float(affine(head.Wc, hidden, head.bc)[0])


def classify(z, head: ClassifierHead) -> float:
    """Relevance probability sigma(Wc . relu(Wp z + bp) + bc)."""
    return sigmoid(classify_logit(z, head))


def classify_rows(Z: np.ndarray, head: ClassifierHead) -> np.ndarray:
    """Logits for a (B, in) batch; row-identical to :func:`classify_logit`."""
    hidden = relu(affine_rows(head.Wp, Z, head.bp))
    return affine_rows(head.Wc, hidden, head.bc)[:, 0]


# --------------------------------------------------------------------------- model


@dataclass
class ModelSettings:
    strategy: str = "hard"
    fusion: str = "concat"
    k: int = 2
    tau: float | None = None
    k_max: int | None = None
    gate_scaling: bool = True
    l2_normalize: bool = False
    f_text: int = 256
    nations: tuple[str, ...] = NATIONS
    d: int = 32
    m: int = 64
    rule_table: dict[str, int] = field(default_factory=dict)
    fixed_expert: int | None = None

    @property
    def fused_width(self) -> int:
        return self.k * self.d if self.fusion == "concat" else self.d

    def resolved_tau(self, n_experts: int) -> float:
        return self.tau if self.tau is not None else 1.0 / n_experts

    def resolved_k_max(self) -> int:
        return self.k_max if self.k_max is not None else self.k


@dataclass
class MoEModel:
    settings: ModelSettings
    router: RouterParams
    projections: ProjectionLayer
    head: ClassifierHead

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [("router.W", self.router.W), ("router.b", self.router.b)]
        for i, (W, b) in enumerate(zip(self.projections.W, self.projections.b)):
            out += [(f"proj.{i}.W", W), (f"proj.{i}.b", b)]
        out += [("head.Wp", self.head.Wp), ("head.bp", self.head.bp),
                ("head.Wc", self.head.Wc), ("head.bc", self.head.bc)]
        return out

    def copy(self) -> "MoEModel":
        return MoEModel(
            settings=ModelSettings(**asdict(self.settings)),
            router=self.router.copy(),
            projections=ProjectionLayer([w.copy() for w in self.projections.W],
                                        [b.copy() for b in self.projections.b],
                                        self.projections.l2_normalize),
            head=ClassifierHead(self.head.Wp.copy(), self.head.bp.copy(),
                                self.head.Wc.copy(), self.head.bc.copy()),
        )


def zero_model(settings: ModelSettings, hidden_dims: Sequence[int]) -> MoEModel:
    n = len(hidden_dims)
    d, m = settings.d, settings.m
    return MoEModel(
        settings,
        RouterParams(np.zeros((n, settings.f_text + len(settings.nations))), np.zeros(n)),
        ProjectionLayer([np.zeros((d, di)) for di in hidden_dims], [np.zeros(d) for _ in hidden_dims],
                        settings.l2_normalize),
        ClassifierHead(np.zeros((m, settings.fused_width)), np.zeros(m), np.zeros((1, m)), np.zeros(1)),
    )


def save_checkpoint(model: MoEModel, path) -> None:
    meta = json.dumps(asdict(model.settings), sort_keys=True).encode("utf-8")
    arrays = model.arrays()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> MoEModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    meta["nations"] = tuple(meta["nations"])
    settings = ModelSettings(**meta)
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after last array")
    n = sum(1 for k in arrays if k.startswith("proj.") and k.endswith(".W"))
    try:
        return MoEModel(
            settings,
            RouterParams(arrays["router.W"], arrays["router.b"]),
            ProjectionLayer([arrays[f"proj.{i}.W"] for i in range(n)],
                            [arrays[f"proj.{i}.b"] for i in range(n)], settings.l2_normalize),
            ClassifierHead(arrays["head.Wp"], arrays["head.bp"], arrays["head.Wc"], arrays["head.bc"]),
        )
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing array {exc}") from None
