"""Dual-space projection, pair-graph transformer and MLP classifier.

Shapes follow the usual ``y = W x + b`` convention: a weight mapping width
``k`` to width ``m`` is stored as ``(m, k)`` and applied to row-stacked
inputs as ``X @ W.T + b``.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import EmbeddingTable, LabeledPair
from .graph import PairGraph, build_graph, check_edges
from .tensor import DimensionError, InvalidConfigError, InvalidInputError, Rng, Tensor


class CheckpointError(ValueError):
    """A checkpoint file is unreadable, truncated or inconsistent."""


@dataclass
class HyperParams:
    d: int = 768
    d_prime: int = 128
    fused_dim: int | None = None
    H: int = 4
    L_layers: int = 2
    hidden: int | None = None
    tau: float = 0.9
    lambda_w: float = 1.0
    m_syn: float = 0.8
    m_ant: float = 0.2
    dropout_rate: float = 0.1
    lr: float = 0.1
    seed: int = 0
    trans_weight: float = 0.5
    batch_size: int = 32
    epochs: int = 100
    patience: int = 10
    single_space: bool = False
    no_graph: bool = False

    def __post_init__(self):
        if self.fused_dim is None:
            self.fused_dim = 2 * self.d_prime
        if self.hidden is None:
            self.hidden = max(1, self.fused_dim // 2)
        self.validate()

    def validate(self) -> None:
        for name in ("d", "d_prime", "fused_dim", "H", "hidden", "batch_size"):
            if getattr(self, name) <= 0:
                raise InvalidConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.L_layers < 0 or self.epochs < 0 or self.patience < 0 or self.seed < 0:
            raise InvalidConfigError("L_layers, epochs, patience and seed must be non-negative")
        if self.fused_dim % self.H:
            raise InvalidConfigError(f"fused_dim {self.fused_dim} is not divisible by H={self.H}")
        # tau above 1 is allowed and switches the similarity rule off
        if self.tau < 0.0:
            raise InvalidConfigError(f"tau must be non-negative, got {self.tau}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not self.m_ant < self.m_syn:
            raise InvalidConfigError(f"need m_ant < m_syn, got {self.m_ant} >= {self.m_syn}")
        if not 0.0 < self.trans_weight <= 1.0:
            raise InvalidConfigError(f"trans_weight must be in (0, 1], got {self.trans_weight}")
        if self.lambda_w < 0 or self.lr < 0:
            raise InvalidConfigError("lambda_w and lr must be non-negative")

    @property
    def head_dim(self) -> int:
        return self.fused_dim // self.H

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> HyperParams:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise InvalidConfigError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**values)

    def replace(self, **changes) -> HyperParams:
        return dataclasses.replace(self, **changes)


def param_shapes(hp: HyperParams) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every trainable array."""
    shapes: dict[str, tuple[int, ...]] = {
        "W_syn": (hp.d_prime, hp.d),
        "b_syn": (hp.d_prime,),
    }
    if not hp.single_space:
        shapes["W_ant"] = (hp.d_prime, hp.d)
        shapes["b_ant"] = (hp.d_prime,)
    n_parts = 2 if hp.single_space else 4
    shapes["W_f"] = (hp.fused_dim, n_parts * hp.d_prime)
    shapes["b_f"] = (hp.fused_dim,)
    for l in range(hp.L_layers):
        for h in range(hp.H):
            for m in ("W_Q", "W_K", "W_V"):
                shapes[f"layer{l}.head{h}.{m}"] = (hp.head_dim, hp.fused_dim)
        shapes[f"layer{l}.W_O"] = (hp.fused_dim, hp.fused_dim)
    shapes["W_1"] = (hp.hidden, hp.fused_dim)
    shapes["b_1"] = (hp.hidden,)
    shapes["W_2"] = (1, hp.hidden)
    shapes["b_2"] = (1,)
    return shapes


@dataclass
class LayerParams:
    W_Q: list[Tensor]
    W_K: list[Tensor]
    W_V: list[Tensor]
    W_O: Tensor
    dropout_rate: float = 0.0


class ModelParams:
    """Every trainable array, keyed by name, plus the hyperparameters that shaped them."""

    def __init__(self, hp: HyperParams, tensors: dict[str, Tensor]):
        expected = param_shapes(hp)
        if list(tensors) != list(expected):
            missing = set(expected) - set(tensors)
            extra = set(tensors) - set(expected)
            if missing or extra:
                raise InvalidInputError(f"parameter names differ: missing {sorted(missing)}, extra {sorted(extra)}")
            tensors = {k: tensors[k] for k in expected}
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
            tensors[name].name = name
        self.hp = hp
        self.tensors = tensors

    @classmethod
    def init(cls, hp: HyperParams, rng: Rng | None = None, bias_scale: float = 0.0) -> ModelParams:
        """Xavier-uniform weights, drawn in name order.

        Biases are zero unless ``bias_scale`` > 0, in which case they are
        uniform on ``±bias_scale`` (gradient checks use this to keep ReLU
        inputs off the kink at 0).
        """
        rng = rng if rng is not None else Rng(hp.seed).stream("init")
        tensors = {}
        for name, shape in param_shapes(hp).items():
            if len(shape) == 2:
                tensors[name] = T.xavier_init(shape[0], shape[1], rng, name=name)
            elif bias_scale > 0:
                tensors[name] = Tensor(rng.uniform(shape, -bias_scale, bias_scale), name=name)
            else:
                tensors[name] = Tensor(np.zeros(shape), name=name)
        return cls(hp, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def names(self) -> list[str]:
        return list(self.tensors)

    def layer(self, l: int) -> LayerParams:
        H = self.hp.H
        return LayerParams(
            W_Q=[self.tensors[f"layer{l}.head{h}.W_Q"] for h in range(H)],
            W_K=[self.tensors[f"layer{l}.head{h}.W_K"] for h in range(H)],
            W_V=[self.tensors[f"layer{l}.head{h}.W_V"] for h in range(H)],
            W_O=self.tensors[f"layer{l}.W_O"],
            dropout_rate=self.hp.dropout_rate,
        )

    def copy(self) -> ModelParams:
        return ModelParams(self.hp, {k: Tensor(v.data.copy()) for k, v in self.tensors.items()})

    def as_stored(self) -> ModelParams:
        """Copy rounded to the float32 precision a checkpoint keeps."""
        return ModelParams(
            self.hp, {k: Tensor(v.data.astype(np.float32).astype(np.float64)) for k, v in self.tensors.items()}
        )

    def equal(self, other: ModelParams) -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[k].data, other[k].data) for k in self.names()
        )


@dataclass
class PairForward:
    """Projected vectors of one pair (vectors) or a batch (row-stacked matrices).

    In single-space mode ``a1``/``a2`` alias ``s1``/``s2``.
    """

    s1: Tensor
    s2: Tensor
    a1: Tensor
    a2: Tensor
    sim_syn: Tensor
    sim_ant: Tensor
    x_fused: Tensor | None = None

    def __len__(self) -> int:
        return 1 if self.s1.ndim == 1 else self.s1.shape[0]

    def pair(self, i: int) -> PairForward:
        """Per-pair view (plain values, detached from any tape)."""
        pick = lambda t: Tensor(t.data[i]) if t is not None else None  # noqa: E731
        return PairForward(
            pick(self.s1), pick(self.s2), pick(self.a1), pick(self.a2),
            pick(self.sim_syn), pick(self.sim_ant), pick(self.x_fused),
        )


def _linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    x = T.as_tensor(x)
    vector = x.ndim == 1
    if vector:
        x = T.reshape(x, (1, x.shape[0]))
    if x.shape[1] != W.shape[1]:
        raise DimensionError(f"input width {x.shape[1]} does not match weight {W.shape}")
    y = x @ W.T
    if b is not None:
        y = y + b
    return T.reshape(y, (y.shape[1],)) if vector else y


def _project(h: Tensor, W: Tensor, b: Tensor, rate: float, training: bool, rng: Rng | None) -> Tensor:
    return T.dropout(T.relu(_linear(h, W, b)), rate, training, rng)


def cosine(u, v) -> Tensor:
    """Cosine similarity; 0 when either vector has norm below 1e-12."""
    return T.cosine_rows(u, v)


def project_dual(h1, h2, params: ModelParams, training: bool = False, rng: Rng | None = None) -> PairForward:
    """Synonym- and antonym-space projections of both words, with their cosines.

    ``h1``/``h2`` are ``(d,)`` vectors or ``(n, d)`` matrices.
    """
    hp = params.hp
    h1, h2 = T.as_tensor(h1), T.as_tensor(h2)
    if h1.shape != h2.shape or h1.shape[-1] != hp.d:
        raise DimensionError(f"embedding shapes {h1.shape}, {h2.shape} do not match d={hp.d}")
    rate = hp.dropout_rate
    s1 = _project(h1, params["W_syn"], params["b_syn"], rate, training, rng)
    s2 = _project(h2, params["W_syn"], params["b_syn"], rate, training, rng)
    sim_syn = cosine(s1, s2)
    if hp.single_space:
        return PairForward(s1, s2, s1, s2, sim_syn, sim_syn)
    a1 = _project(h1, params["W_ant"], params["b_ant"], rate, training, rng)
    a2 = _project(h2, params["W_ant"], params["b_ant"], rate, training, rng)
    return PairForward(s1, s2, a1, a2, sim_syn, cosine(a1, a2))


def fuse(pf: PairForward, params: ModelParams) -> Tensor:
    """``W_f [s1; s2; a1; a2] + b_f`` (``[s1; s2]`` in single-space mode)."""
    parts = [pf.s1, pf.s2] if params.hp.single_space else [pf.s1, pf.s2, pf.a1, pf.a2]
    return _linear(T.concat(parts, axis=-1), params["W_f"], params["b_f"])


def attention_bias(edges, n: int) -> np.ndarray:
    """Additive logit mask: 0 on the diagonal, ``ln w`` on edges, ``-inf`` elsewhere."""
    check_edges(edges, n)
    bias = np.full((n, n), -np.inf)
    for src, dst, w in edges:
        # dst aggregates messages from src
        bias[dst, src] = max(bias[dst, src], math.log(w))
    np.fill_diagonal(bias, 0.0)
    return bias


def transformer_conv_layer(
    X,
    edges,
    layer: LayerParams,
    training: bool = False,
    rng: Rng | None = None,
    attention: list | None = None,
) -> Tensor:
    """One multi-head graph attention layer followed by ReLU and dropout.

    Each node attends over its neighbours and itself with scaled dot-product
    logits plus ``ln(edge weight)``. If ``attention`` is a list, the
    per-head ``(n, n)`` coefficient matrices are appended to it.
    """
    X = T.as_tensor(X)
    n = X.shape[0]
    bias = attention_bias(edges, n)
    head_dim = layer.W_Q[0].shape[0]
    scale = 1.0 / math.sqrt(head_dim)
    heads = []
    for Wq, Wk, Wv in zip(layer.W_Q, layer.W_K, layer.W_V):
        Q, K, V = X @ Wq.T, X @ Wk.T, X @ Wv.T
        alpha = T.softmax((Q @ K.T) * scale + bias)
        if attention is not None:
            attention.append(alpha.data)
        heads.append(alpha @ V)
    out = T.concat(heads, axis=1) @ layer.W_O.T
    return T.dropout(T.relu(out), layer.dropout_rate, training, rng)


def global_mean_pool(X) -> Tensor:
    X = T.as_tensor(X)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidInputError(f"cannot pool an empty graph (shape {X.shape})")
    return T.mean_rows(X)


def classify(x, params: ModelParams, training: bool = False, rng: Rng | None = None) -> Tensor:
    """``sigmoid(W_2 dropout(relu(W_1 x + b_1)) + b_2)`` for a vector or each row of a matrix."""
    hidden = T.dropout(T.relu(_linear(x, params["W_1"], params["b_1"])), params.hp.dropout_rate, training, rng)
    z = _linear(hidden, params["W_2"], params["b_2"])
    z = T.reshape(z, z.shape[:-1])
    return T.sigmoid(z)


@dataclass
class BatchOutput:
    forward: PairForward
    probs: Tensor
    node_features: Tensor
    graph: PairGraph | None = None
    attention: list = field(default_factory=list)


def encode(batch: Sequence[LabeledPair], table: EmbeddingTable) -> tuple[np.ndarray, np.ndarray]:
    return table.lookup([p.w1 for p in batch]), table.lookup([p.w2 for p in batch])


def forward_batch(
    batch: Sequence[LabeledPair],
    table: EmbeddingTable,
    params: ModelParams,
    training: bool = False,
    rng: Rng | None = None,
    keep_attention: bool = False,
) -> BatchOutput:
    """Project, fuse, run the pair-graph transformer and classify every node."""
    if not batch:
        raise InvalidInputError("empty batch")
    hp = params.hp
    H1, H2 = encode(batch, table)
    pf = project_dual(H1, H2, params, training, rng)
    pf.x_fused = fuse(pf, params)
    X = pf.x_fused
    graph = None
    attention: list = []
    if not hp.no_graph and hp.L_layers > 0:
        graph = build_graph(batch, pf, hp.tau, hp.trans_weight)
        for l in range(hp.L_layers):
            X = transformer_conv_layer(
                X, graph.edges, params.layer(l), training, rng, attention if keep_attention else None
            )
        graph.node_features = X.data
    if len(batch) == 1:
        X = T.reshape(global_mean_pool(X), (1, hp.fused_dim))
    probs = classify(X, params, training, rng)
    return BatchOutput(pf, probs, X, graph, attention)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"BHAVNET\x00"
FORMAT_VERSION = 1


def save_checkpoint(params: ModelParams, hp: HyperParams | None, path) -> None:
    """Write ``magic | version | hyperparameters (JSON) | arrays``.

    Each array record is ``name_len:u16, name, rank:u8, extents:u32*rank``
    followed by row-major float32 data, all little-endian. The file is
    written to a temporary sibling and renamed into place.
    """
    hp = hp or params.hp
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    hp_bytes = json.dumps(hp.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(hp_bytes)))
    buf.write(hp_bytes)
    buf.write(struct.pack("<I", len(params.tensors)))
    for name, t in params.tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(t.data.astype("<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes, path=""):
        self.blob = blob
        self.path = path
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint, wanted {n} bytes at offset {self.pos}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[ModelParams, HyperParams]:
    try:
        blob = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from None
    r = _Reader(blob, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (hp_len,) = r.unpack("<I")
    try:
        hp = HyperParams.from_dict(json.loads(r.take(hp_len).decode("utf-8")))
    except (ValueError, TypeError) as err:
        raise CheckpointError(f"{path}: bad hyperparameter block: {err}") from None
    expected = param_shapes(hp)
    (count,) = r.unpack("<I")
    if count != len(expected):
        raise CheckpointError(f"{path}: {count} arrays, hyperparameters imply {len(expected)}")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{path}: array name is not UTF-8") from None
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        if expected.get(name) != tuple(shape):
            raise CheckpointError(f"{path}: array {name!r} has shape {shape}, expected {expected.get(name)}")
        size = int(np.prod(shape))
        data = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float64).reshape(shape)
        tensors[name] = Tensor(data, name=name)
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.pos} trailing bytes")
    try:
        return ModelParams(hp, tensors), hp
    except ValueError as err:
        raise CheckpointError(f"{path}: {err}") from None
