"""Masked graph transformer with mixture-of-experts feed-forward layers.

Nodes of a Levi graph attend only to their graph neighbors (plus themselves);
there are no positional encodings, the graph structure is the only geometry.
Each layer is Pre-LN residual: ``x + Drop(Attn(LN(x)))`` then
``x + Drop(MoE(LN(x)))``. The MoE block routes every node through its top-2
experts during training (softmax renormalized over the selected logits) and
through the full softmax mixture of all experts at inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .graph import EntityNode
from .queries import FREE_SLOT, NodeRole, QueryGraph
from .sampling import Corruption, CorruptionKind, SampledSubgraph
from .tensor import Tensor


@dataclass
class ModelConfig:
    entity_count: int
    relation_count: int
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    experts: int = 4
    top_k: int = 2
    expert_hidden: int | None = None  # defaults to 2 * hidden
    dropout: float = 0.1
    tie_decoder: bool = False

    def __post_init__(self):
        if self.entity_count < 1 or self.relation_count < 1:
            raise ValueError("entity and relation counts must be positive")
        if self.layers < 1:
            raise ValueError("layers must be at least 1")
        if self.hidden < 1 or self.hidden % self.heads != 0:
            raise ValueError(f"hidden ({self.hidden}) must be a positive multiple of heads ({self.heads})")
        if not 1 <= self.top_k <= self.experts:
            raise ValueError(f"need experts >= top_k >= 1, got {self.experts} and {self.top_k}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.expert_hidden is None:
            self.expert_hidden = 2 * self.hidden
        if self.expert_hidden < 1:
            raise ValueError("expert_hidden must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def mask_id(self) -> int:
        """Input id of the mask token (one past the last entity)."""
        return self.entity_count

    def to_dict(self) -> dict:
        return {
            "entity_count": self.entity_count,
            "relation_count": self.relation_count,
            "layers": self.layers,
            "hidden": self.hidden,
            "heads": self.heads,
            "experts": self.experts,
            "top_k": self.top_k,
            "expert_hidden": self.expert_hidden,
            "dropout": self.dropout,
            "tie_decoder": self.tie_decoder,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(out) > 2.0 * std
        n_bad = int(bad.sum())
        if n_bad == 0:
            return out.astype(dtype)
        out[bad] = rng.normal(0.0, std, size=n_bad)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter tensor, in initialization order."""
    d = config.hidden
    shapes: dict[str, tuple[int, ...]] = {
        # row entity_count is the mask token
        "entity_in": (config.entity_count + 1, d),
        "relation_in": (config.relation_count, d),
        "node_type": (2, d),  # row 0: relation nodes, row 1: entity nodes
        "final_ln_gain": (d,),
        "final_ln_bias": (d,),
    }
    if not config.tie_decoder:
        shapes["decoder"] = (config.entity_count, d)
    for i in range(config.layers):
        prefix = f"layer{i}."
        for name in ("wq", "wk", "wv", "wo"):
            shapes[prefix + name] = (d, d)
        shapes[prefix + "ln1_gain"] = (d,)
        shapes[prefix + "ln1_bias"] = (d,)
        shapes[prefix + "ln2_gain"] = (d,)
        shapes[prefix + "ln2_bias"] = (d,)
        shapes[prefix + "gate"] = (d, config.experts)
        for j in range(config.experts):
            eprefix = f"{prefix}expert{j}."
            shapes[eprefix + "w1"] = (d, config.expert_hidden)
            shapes[eprefix + "b1"] = (config.expert_hidden,)
            shapes[eprefix + "w2"] = (config.expert_hidden, d)
            shapes[eprefix + "b2"] = (d,)
    return shapes


def init_parameters(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    """Truncated-normal weights (std 0.02), unit LN gains, zero biases."""
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("gain"):
            data = np.ones(shape, dtype=dtype)
        elif name.endswith(("bias", "b1", "b2")):
            data = np.zeros(shape, dtype=dtype)
        else:
            data = truncated_normal(rng, shape, 0.02, dtype)
        params[name] = Tensor(data, requires_grad=True)
    return params


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "Model":
        rng = np.random.default_rng(seed)
        return cls(config=config, params=init_parameters(config, rng, dtype))

    def clone(self) -> "Model":
        params = {
            name: Tensor(t.data.copy(), requires_grad=t.requires_grad) for name, t in self.params.items()
        }
        return Model(config=self.config, params=params)


@dataclass
class Batch:
    """Padded model input for a list of graphs.

    ``positions`` are flat indexes into the [B * N] node grid; padding nodes
    attend only to themselves and never appear in ``positions``, so they touch
    neither the loss nor any gradient.
    """

    entity_ids: np.ndarray  # [B, N] int64, mask token at masked/padded slots
    relation_ids: np.ndarray  # [B, N] int64, zero at non-relation slots
    is_entity: np.ndarray  # [B, N] bool, padding counts as entity
    attn_mask: np.ndarray  # [B, 1, N, N] bool
    positions: np.ndarray  # [P] int64 flat prediction slots
    targets: np.ndarray  # [P] int64 true entity ids at those slots
    sizes: list[int] = field(default_factory=list)
    answer_sets: list[np.ndarray] | None = None

    @property
    def graph_count(self) -> int:
        return self.entity_ids.shape[0]


def _masked_input_id(original: int, corruption: Corruption, mask_id: int) -> int:
    if corruption.kind is CorruptionKind.MASK:
        return mask_id
    if corruption.kind is CorruptionKind.KEEP:
        return original
    return int(corruption.replacement)


def encode_subgraphs(subs: Sequence[SampledSubgraph], config: ModelConfig) -> Batch:
    """Pack masked subgraphs into one padded batch."""
    if not subs:
        raise ValueError("empty batch")
    width = max(s.levi.node_count for s in subs)
    b = len(subs)
    entity_ids = np.full((b, width), config.mask_id, dtype=np.int64)
    relation_ids = np.zeros((b, width), dtype=np.int64)
    is_entity = np.ones((b, width), dtype=bool)
    attn = np.zeros((b, 1, width, width), dtype=bool)
    attn[:, 0] |= np.eye(width, dtype=bool)
    positions = []
    targets = []
    for gi, sub in enumerate(subs):
        n = sub.levi.node_count
        attn[gi, 0, :n, :n] = sub.levi.attention_mask()
        for i, node in enumerate(sub.levi.nodes):
            if isinstance(node, EntityNode):
                if i in sub.corruption:
                    entity_ids[gi, i] = _masked_input_id(node.entity, sub.corruption[i], config.mask_id)
                else:
                    entity_ids[gi, i] = node.entity
            else:
                is_entity[gi, i] = False
                relation_ids[gi, i] = node.relation
        for pos in sub.prediction_targets:
            positions.append(gi * width + pos)
            targets.append(int(sub.original_entities[pos]))
    return Batch(
        entity_ids=entity_ids,
        relation_ids=relation_ids,
        is_entity=is_entity,
        attn_mask=attn,
        positions=np.asarray(positions, dtype=np.int64),
        targets=np.asarray(targets, dtype=np.int64),
        sizes=[s.levi.node_count for s in subs],
    )


def encode_queries(
    queries: Sequence[QueryGraph],
    config: ModelConfig,
    predict: str = "target",
    fill: int | None = None,
) -> Batch:
    """Pack query graphs into one padded batch.

    Anchors enter as their entity ids; intermediates and the target enter as
    mask tokens. ``predict`` chooses the scored slots: the target node
    ("target") or every intermediate node ("intermediates"). ``fill`` clamps
    the target slot to a concrete entity instead of the mask token.
    """
    if not queries:
        raise ValueError("empty batch")
    if predict not in ("target", "intermediates"):
        raise ValueError(f"unknown predict mode {predict!r}")
    width = max(q.levi.node_count for q in queries)
    b = len(queries)
    entity_ids = np.full((b, width), config.mask_id, dtype=np.int64)
    relation_ids = np.zeros((b, width), dtype=np.int64)
    is_entity = np.ones((b, width), dtype=bool)
    attn = np.zeros((b, 1, width, width), dtype=bool)
    attn[:, 0] |= np.eye(width, dtype=bool)
    positions = []
    for qi, q in enumerate(queries):
        n = q.levi.node_count
        attn[qi, 0, :n, :n] = q.levi.attention_mask()
        for i, node in enumerate(q.levi.nodes):
            if isinstance(node, EntityNode):
                if node.entity != FREE_SLOT:
                    entity_ids[qi, i] = node.entity
            else:
                is_entity[qi, i] = False
                relation_ids[qi, i] = node.relation
        if fill is not None:
            entity_ids[qi, q.target_index] = int(fill)
        if predict == "target":
            positions.append(qi * width + q.target_index)
        else:
            if not q.intermediate_indexes:
                raise ValueError(f"{q.query_type.value} query has no intermediate nodes")
            positions.extend(qi * width + i for i in q.intermediate_indexes)
    return Batch(
        entity_ids=entity_ids,
        relation_ids=relation_ids,
        is_entity=is_entity,
        attn_mask=attn,
        positions=np.asarray(positions, dtype=np.int64),
        targets=np.zeros(len(positions), dtype=np.int64),
        sizes=[q.levi.node_count for q in queries],
    )


def attention_layer(
    model: Model,
    layer: int,
    x: Tensor,
    attn_mask: np.ndarray,
    training: bool,
    rng: np.random.Generator | None,
) -> Tensor:
    """Pre-LN multi-head attention restricted to graph neighbors."""
    cfg = model.config
    p = model.params
    prefix = f"layer{layer}."
    b, n, d = x.shape
    h = T.layer_norm(x, p[prefix + "ln1_gain"], p[prefix + "ln1_bias"])

    def split_heads(m: Tensor) -> Tensor:
        m = T.reshape(m, (b, n, cfg.heads, cfg.head_dim))
        return T.transpose(m, (0, 2, 1, 3))

    q = split_heads(T.matmul(h, p[prefix + "wq"]))
    k = split_heads(T.matmul(h, p[prefix + "wk"]))
    v = split_heads(T.matmul(h, p[prefix + "wv"]))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(cfg.head_dim))
    probs = T.masked_softmax(scores, attn_mask)
    context = T.matmul(probs, v)
    context = T.reshape(T.transpose(context, (0, 2, 1, 3)), (b, n, d))
    out = T.matmul(context, p[prefix + "wo"])
    return T.add(x, T.dropout(out, cfg.dropout, rng, training))


def moe_ffn(
    model: Model,
    layer: int,
    x: Tensor,
    training: bool,
    rng: np.random.Generator | None,
    probes: list | None = None,
) -> Tensor:
    """Mixture-of-experts feed-forward block.

    Training routes each node through its top-2 gate logits (ties broken
    toward the lower expert index) with the softmax renormalized over the
    selected logits; inference mixes all experts under the full softmax. With
    two experts the two paths coincide exactly.
    """
    cfg = model.config
    p = model.params
    prefix = f"layer{layer}."
    b, n, d = x.shape
    h = T.layer_norm(x, p[prefix + "ln2_gain"], p[prefix + "ln2_bias"])
    flat = T.reshape(h, (b * n, d))
    gate_logits = T.matmul(flat, p[prefix + "gate"])

    if training and cfg.top_k < cfg.experts:
        order = np.argsort(-gate_logits.data, axis=-1, kind="stable")
        selected = np.zeros_like(gate_logits.data, dtype=bool)
        np.put_along_axis(selected, order[:, : cfg.top_k], True, axis=-1)
        weights = T.masked_softmax(gate_logits, selected)
    else:
        weights = T.softmax(gate_logits)

    combined: Tensor | None = None
    for j in range(cfg.experts):
        eprefix = f"{prefix}expert{j}."
        pre = T.add(T.matmul(flat, p[eprefix + "w1"]), p[eprefix + "b1"])
        if probes is not None:
            probes.append(pre.data)
        act = T.gelu(pre)
        out_j = T.add(T.matmul(act, p[eprefix + "w2"]), p[eprefix + "b2"])
        term = T.mul(out_j, T.slice_last(weights, j, j + 1))
        combined = term if combined is None else T.add(combined, term)
    out = T.reshape(combined, (b, n, d))
    return T.add(x, T.dropout(out, cfg.dropout, rng, training))


def decoder_matrix(model: Model) -> Tensor:
    """The [V, d] output table, either its own parameter or the tied entity rows."""
    if model.config.tie_decoder:
        return T.gather_rows(model.params["entity_in"], np.arange(model.config.entity_count))
    return model.params["decoder"]


def forward(
    model: Model,
    batch: Batch,
    training: bool = False,
    rng: np.random.Generator | None = None,
    probes: list[list] | None = None,
) -> Tensor:
    """Run the transformer and score entities at the batch's prediction slots.

    Returns [P, entity_count] logits, one row per entry of ``batch.positions``.
    """
    cfg = model.config
    p = model.params
    b, n = batch.entity_ids.shape
    flat_entity = batch.entity_ids.reshape(-1)
    flat_relation = batch.relation_ids.reshape(-1)
    flat_is_entity = batch.is_entity.reshape(-1)

    ent = T.gather_rows(p["entity_in"], flat_entity)
    rel = T.gather_rows(p["relation_in"], flat_relation)
    x = T.where(flat_is_entity[:, None], ent, rel)
    x = T.add(x, T.gather_rows(p["node_type"], flat_is_entity.astype(np.int64)))
    x = T.reshape(x, (b, n, cfg.hidden))

    for layer in range(cfg.layers):
        x = attention_layer(model, layer, x, batch.attn_mask, training, rng)
        layer_probes = None
        if probes is not None:
            layer_probes = []
            probes.append(layer_probes)
        x = moe_ffn(model, layer, x, training, rng, probes=layer_probes)

    x = T.layer_norm(x, p["final_ln_gain"], p["final_ln_bias"])
    states = T.gather_rows(T.reshape(x, (b * n, cfg.hidden)), batch.positions)
    return T.matmul(states, T.transpose(decoder_matrix(model), (1, 0)))


def activation_sparsity(model: Model, batch: Batch) -> list[float]:
    """Per-layer fraction of non-positive expert hidden pre-activations.

    Diagnostic for how specialized the expert inputs are; computed in eval
    mode over all experts and nodes.
    """
    probes: list[list] = []
    forward(model, batch, training=False, probes=probes)
    fractions = []
    for layer_probes in probes:
        stacked = np.concatenate([a.reshape(-1) for a in layer_probes])
        fractions.append(float((stacked <= 0.0).mean()))
    return fractions
