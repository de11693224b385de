"""The latency predictor: embeddings, graph layers, refinement, and head.

Per architecture, each slot's operation embedding is concatenated with the
device's hardware embedding; a small graph network over the architecture DAG
refines these joint features, and a per-node MLP produces the operation
features consumed by the main graph network. The main network runs a dense
graph flow (DGF) stack, a graph attention (GAT) stack, or their ensemble
(mean of sink embeddings). The sink-node embedding, optionally concatenated
with a supplementary encoding vector, feeds an MLP head that outputs the
scalar latency score.

Both layer types gate their aggregation with sigmoid(op_features @ w_gate):

    DGF:  x' = gate * (A @ x @ w_feat) + x @ w_feat + bias
    GAT:  scores_ij = leaky_relu(sum_k attn_k * h_ik * h_jk), h = x @ w_proj;
          row-softmax over in-neighbors, aggregate, gate, then LayerNorm.

Layers treat row i of the given adjacency as node i's aggregation mask, so
the predictor feeds the transposed (edge-reversed) template: messages flow
from the source toward the sink whose embedding is read out.

Scores are a deterministic function of (inputs, parameters): identical calls
are bitwise reproducible. Different batch partitionings of the same inputs
agree to ~1e-12 but not bitwise, because BLAS blocks matmuls differently per
batch shape.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .archspace import Architecture, SearchSpace, get_space, validate
from .autodiff import AdamState, Tensor
from .devicesets import LatencyTable, spearman
from .errors import (
    BadSupplementaryDim,
    ConstantInput,
    InsufficientOverlap,
    UnknownDevice,
)

CHECKPOINT_VERSION = 1

GNN_KINDS = ("dgf", "gat", "ensemble")


@dataclass(frozen=True)
class PredictorConfig:
    op_embed_dim: int = 48
    node_embed_dim: int = 48
    hw_embed_dim: int = 48
    hidden_dim: int = 96
    ophw_gcn_dims: tuple[int, ...] = (128, 128)
    ophw_mlp_dims: tuple[int, ...] = (128,)
    gcn_dims: tuple[int, ...] = (128, 128, 128)
    head_mlp_dims: tuple[int, ...] = (200, 200, 200)
    gnn_kind: str = "ensemble"
    supplementary_dim: int = 0
    leaky_slope: float = 0.2
    seed: int = 0

    def __post_init__(self):
        dims = (
            (self.op_embed_dim, self.node_embed_dim, self.hw_embed_dim, self.hidden_dim)
            + tuple(self.ophw_gcn_dims)
            + tuple(self.ophw_mlp_dims)
            + tuple(self.gcn_dims)
            + tuple(self.head_mlp_dims)
        )
        if any(d <= 0 for d in dims):
            raise ValueError("all layer dims must be positive")
        if self.gnn_kind not in GNN_KINDS:
            raise ValueError(f"gnn_kind must be one of {GNN_KINDS}")
        if self.supplementary_dim < 0:
            raise ValueError("supplementary_dim must be >= 0")
        if self.hidden_dim != self.op_embed_dim + self.hw_embed_dim:
            raise ValueError("hidden_dim must equal op_embed_dim + hw_embed_dim")
        object.__setattr__(self, "ophw_gcn_dims", tuple(self.ophw_gcn_dims))
        object.__setattr__(self, "ophw_mlp_dims", tuple(self.ophw_mlp_dims))
        object.__setattr__(self, "gcn_dims", tuple(self.gcn_dims))
        object.__setattr__(self, "head_mlp_dims", tuple(self.head_mlp_dims))


@dataclass
class DgfWeights:
    w_gate: Tensor
    w_feat: Tensor
    bias: Tensor


@dataclass
class GatWeights:
    w_proj: Tensor
    attn: Tensor
    w_gate: Tensor
    ln_gain: Tensor
    ln_bias: Tensor


def dgf_layer(x, adjacency: np.ndarray, op_feat, weights: DgfWeights) -> Tensor:
    """Gated dense graph flow: gate * (A x W) + x W + b, gate = sigmoid(O Wg)."""
    gate = ad.sigmoid(ad.matmul(op_feat, weights.w_gate))
    h = ad.matmul(x, weights.w_feat)
    agg = ad.matmul(np.asarray(adjacency, dtype=np.float64), h)
    return ad.add(ad.add(ad.mul(gate, agg), h), weights.bias)


def gat_layer(x, adjacency: np.ndarray, op_feat, weights: GatWeights, leaky_slope: float = 0.2) -> Tensor:
    """Attention aggregation over in-neighbors, op-gated, LayerNormed.

    Row i of `adjacency` marks the nodes i may attend to; rows with empty
    support aggregate the zero vector.
    """
    h = ad.matmul(x, weights.w_proj)
    scores = ad.matmul(ad.mul(h, weights.attn), ad.transpose_last2(h))
    scores = ad.leaky_relu(scores, leaky_slope)
    attn = ad.masked_softmax(scores, np.asarray(adjacency, dtype=bool))
    agg = ad.matmul(attn, h)
    gate = ad.sigmoid(ad.matmul(op_feat, weights.w_gate))
    return ad.layer_norm(ad.mul(gate, agg), weights.ln_gain, weights.ln_bias)


@dataclass(frozen=True)
class _SpaceTemplate:
    """Per-space constants the forward pass needs."""

    agg: np.ndarray          # transposed lowered adjacency: rows = in-neighbors
    node_ops: np.ndarray     # per-node op index, null-op at structural nodes
    slot_nodes: np.ndarray   # node position of each op slot
    sink: int
    n_nodes: int


class PredictorState:
    """All learnable tensors plus the device registry and optimizer state."""

    def __init__(
        self,
        config: PredictorConfig,
        spaces: dict[str, SearchSpace],
        params: dict[str, Tensor],
        device_index: dict[str, int],
        null_op_index: int,
    ):
        self.config = config
        self.spaces = spaces
        self.params = params
        self.device_index = device_index
        self.null_op_index = null_op_index
        self.adam: AdamState | None = None
        self._templates: dict[str, _SpaceTemplate] = {
            sid: _make_template(sp, null_op_index) for sid, sp in spaces.items()
        }
        self._views = _build_views(config, params)

    def device_row(self, device_id: str) -> int:
        try:
            return self.device_index[device_id]
        except KeyError:
            raise UnknownDevice(f"device {device_id!r} not registered") from None


def _make_template(space: SearchSpace, null_op_index: int) -> _SpaceTemplate:
    adj = space.template_adjacency()
    n = space.graph_size
    node_ops = np.full(n, null_op_index, dtype=np.intp)
    return _SpaceTemplate(
        agg=np.asarray(adj.T, dtype=np.float64),
        node_ops=node_ops,
        slot_nodes=np.asarray(space.slot_nodes, dtype=np.intp),
        sink=n - 1,
        n_nodes=n,
    )


@dataclass
class _Views:
    ophw_layers: list[DgfWeights]
    ophw_mlp: list[tuple[Tensor, Tensor]]
    dgf_layers: list[DgfWeights]
    gat_layers: list[GatWeights]
    head: list[tuple[Tensor, Tensor]]


def _build_views(config: PredictorConfig, params: dict[str, Tensor]) -> _Views:
    ophw_layers = [
        DgfWeights(params[f"ophw_gcn{i}.w_gate"], params[f"ophw_gcn{i}.w_feat"], params[f"ophw_gcn{i}.bias"])
        for i in range(len(config.ophw_gcn_dims))
    ]
    ophw_mlp = [
        (params[f"ophw_mlp{i}.w"], params[f"ophw_mlp{i}.b"])
        for i in range(len(config.ophw_mlp_dims))
    ]
    dgf_layers = [
        DgfWeights(params[f"dgf{i}.w_gate"], params[f"dgf{i}.w_feat"], params[f"dgf{i}.bias"])
        for i in range(len(config.gcn_dims))
        if f"dgf{i}.w_feat" in params
    ]
    gat_layers = [
        GatWeights(
            params[f"gat{i}.w_proj"], params[f"gat{i}.attn"], params[f"gat{i}.w_gate"],
            params[f"gat{i}.ln_gain"], params[f"gat{i}.ln_bias"],
        )
        for i in range(len(config.gcn_dims))
        if f"gat{i}.w_proj" in params
    ]
    head = [
        (params[f"head{i}.w"], params[f"head{i}.b"])
        for i in range(len(config.head_mlp_dims) + 1)
    ]
    return _Views(ophw_layers, ophw_mlp, dgf_layers, gat_layers, head)


def init_predictor(
    config: PredictorConfig,
    spaces: Sequence[SearchSpace],
    device_ids: Sequence[str],
    seed: int | None = None,
) -> PredictorState:
    """Seeded parameter initialization: Glorot-uniform weights, zero biases,
    N(0, 0.1) embedding rows, unit LayerNorm gains."""
    if not spaces:
        raise ValueError("need at least one search space")
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    space_map = {s.space_id: s for s in spaces}
    max_vocab = max(len(s.op_vocab) for s in spaces)
    max_nodes = max(s.graph_size for s in spaces)
    null_op = max_vocab

    params: dict[str, Tensor] = {}

    def embedding(name: str, rows: int, dim: int) -> None:
        params[name] = ad.param(rng.normal(0.0, 0.1, size=(rows, dim)))

    def glorot(name: str, fan_in: int, fan_out: int, shape=None) -> None:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = ad.param(rng.uniform(-limit, limit, size=shape or (fan_in, fan_out)))

    def zeros(name: str, shape) -> None:
        params[name] = ad.param(np.zeros(shape))

    def ones(name: str, shape) -> None:
        params[name] = ad.param(np.ones(shape))

    embedding("op_embed", max_vocab + 1, config.op_embed_dim)
    embedding("node_embed", max_nodes, config.node_embed_dim)
    embedding("hw_embed", len(device_ids), config.hw_embed_dim)

    oh_dim = config.op_embed_dim + config.hw_embed_dim
    prev = config.node_embed_dim
    for i, dim in enumerate(config.ophw_gcn_dims):
        glorot(f"ophw_gcn{i}.w_gate", oh_dim, dim)
        glorot(f"ophw_gcn{i}.w_feat", prev, dim)
        zeros(f"ophw_gcn{i}.bias", (dim,))
        prev = dim
    for i, dim in enumerate(config.ophw_mlp_dims):
        glorot(f"ophw_mlp{i}.w", prev, dim)
        zeros(f"ophw_mlp{i}.b", (dim,))
        prev = dim
    refined_dim = prev

    if config.gnn_kind in ("dgf", "ensemble"):
        prev = config.node_embed_dim
        for i, dim in enumerate(config.gcn_dims):
            glorot(f"dgf{i}.w_gate", refined_dim, dim)
            glorot(f"dgf{i}.w_feat", prev, dim)
            zeros(f"dgf{i}.bias", (dim,))
            prev = dim
    if config.gnn_kind in ("gat", "ensemble"):
        prev = config.node_embed_dim
        for i, dim in enumerate(config.gcn_dims):
            glorot(f"gat{i}.w_proj", prev, dim)
            glorot(f"gat{i}.attn", dim, 1, shape=(dim,))
            glorot(f"gat{i}.w_gate", refined_dim, dim)
            ones(f"gat{i}.ln_gain", (dim,))
            zeros(f"gat{i}.ln_bias", (dim,))
            prev = dim

    prev = config.gcn_dims[-1] + config.supplementary_dim
    for i, dim in enumerate(tuple(config.head_mlp_dims) + (1,)):
        glorot(f"head{i}.w", prev, dim)
        zeros(f"head{i}.b", (dim,))
        prev = dim

    device_index = {d: i for i, d in enumerate(device_ids)}
    if len(device_index) != len(device_ids):
        raise ValueError("duplicate device ids")
    return PredictorState(PredictorConfig(**asdict(config)), space_map, params, device_index, null_op)


def register_device(state: PredictorState, device_id: str) -> int:
    """Add a zero-initialized hardware row for a new device; idempotent."""
    if device_id in state.device_index:
        return state.device_index[device_id]
    hw = state.params["hw_embed"]
    hw.data = np.vstack([hw.data, np.zeros((1, hw.data.shape[1]))])
    if state.adam is not None:
        for moments in (state.adam.m, state.adam.v):
            moments["hw_embed"] = np.vstack(
                [moments["hw_embed"], np.zeros((1, hw.data.shape[1]))]
            )
    idx = hw.data.shape[0] - 1
    state.device_index[device_id] = idx
    return idx


def _mlp(x, layers: list[tuple[Tensor, Tensor]], activate_last: bool = False) -> Tensor:
    for i, (w, b) in enumerate(layers):
        x = ad.add(ad.matmul(x, w), b)
        if activate_last or i + 1 < len(layers):
            x = ad.relu(x)
    return x


def _refined_op_features(state: PredictorState, tpl: _SpaceTemplate, node_ops: np.ndarray, device_row: int) -> Tensor:
    """Joint op+hw embedding refined over the DAG; one feature row per node."""
    batch = node_ops.shape[:-1]
    op_feat = ad.gather(state.params["op_embed"], node_ops)
    hw_feat = ad.gather(
        state.params["hw_embed"], np.full(node_ops.shape, device_row, dtype=np.intp)
    )
    joint = ad.concat([op_feat, hw_feat], axis=-1)
    node_idx = np.broadcast_to(np.arange(tpl.n_nodes, dtype=np.intp), batch + (tpl.n_nodes,))
    x = ad.gather(state.params["node_embed"], node_idx)
    for w in state._views.ophw_layers:
        x = dgf_layer(x, tpl.agg, joint, w)
    return _mlp(x, state._views.ophw_mlp)


def _forward(
    state: PredictorState,
    space: SearchSpace,
    ops_rows: np.ndarray,
    device_row: int,
    supplementary: np.ndarray | None,
    collect: dict | None = None,
) -> Tensor:
    """Batched forward pass; ops_rows is (batch, slot_count) int indices."""
    tpl = state._templates[space.space_id]
    batch = ops_rows.shape[0]
    node_ops = np.tile(tpl.node_ops, (batch, 1))
    node_ops[:, tpl.slot_nodes] = ops_rows
    refined = _refined_op_features(state, tpl, node_ops, device_row)

    node_idx = np.broadcast_to(np.arange(tpl.n_nodes, dtype=np.intp), (batch, tpl.n_nodes))
    sinks = []
    if state.config.gnn_kind in ("dgf", "ensemble"):
        x = ad.gather(state.params["node_embed"], node_idx)
        for w in state._views.dgf_layers:
            x = dgf_layer(x, tpl.agg, refined, w)
        sinks.append(ad.take_node(x, tpl.sink))
    if state.config.gnn_kind in ("gat", "ensemble"):
        x = ad.gather(state.params["node_embed"], node_idx)
        for w in state._views.gat_layers:
            x = gat_layer(x, tpl.agg, refined, w, state.config.leaky_slope)
        sinks.append(ad.take_node(x, tpl.sink))
    sink = sinks[0] if len(sinks) == 1 else ad.scale(ad.add(sinks[0], sinks[1]), 0.5)
    if collect is not None:
        collect["sink"] = sink.data.copy()

    head_in = sink
    if state.config.supplementary_dim > 0:
        if supplementary is None or supplementary.shape != (batch, state.config.supplementary_dim):
            got = None if supplementary is None else supplementary.shape
            raise BadSupplementaryDim(
                f"expected ({batch}, {state.config.supplementary_dim}) supplementary, got {got}"
            )
        head_in = ad.concat([sink, supplementary.astype(np.float64)], axis=-1)
    elif supplementary is not None and np.asarray(supplementary).size > 0:
        raise BadSupplementaryDim("predictor configured without supplementary inputs")
    return _mlp(head_in, state._views.head)


def predict_batch(
    state: PredictorState,
    archs: Sequence[Architecture],
    device_id: str,
    supplementary: np.ndarray | None = None,
) -> np.ndarray:
    """Latency scores for architectures from one space on one device."""
    if not archs:
        return np.zeros(0)
    space = state.spaces[archs[0].space_id]
    row = state.device_row(device_id)
    ops_rows = np.array([a.ops for a in archs], dtype=np.intp)
    out = _forward(state, space, ops_rows, row, supplementary)
    return out.data[:, 0].copy()


def predict(
    state: PredictorState,
    arch: Architecture,
    device_id: str,
    supplementary: np.ndarray | None = None,
) -> float:
    """Latency score for a single architecture."""
    space = state.spaces[arch.space_id]
    validate(arch, space)
    supp = None if supplementary is None else np.asarray(supplementary, dtype=np.float64).reshape(1, -1)
    if supplementary is not None and supp.shape[1] != state.config.supplementary_dim:
        raise BadSupplementaryDim(
            f"supplementary length {supp.shape[1]}, expected {state.config.supplementary_dim}"
        )
    return float(predict_batch(state, [arch], device_id, supp)[0])


def refine_op_embeddings(state: PredictorState, arch: Architecture, device_id: str) -> np.ndarray:
    """Per-slot refined operation features for one (arch, device) pair."""
    space = state.spaces[arch.space_id]
    tpl = state._templates[space.space_id]
    row = state.device_row(device_id)
    node_ops = np.tile(tpl.node_ops, (1, 1))
    node_ops[:, tpl.slot_nodes] = np.asarray(arch.ops, dtype=np.intp)
    refined = _refined_op_features(state, tpl, node_ops, row)
    return refined.data[0, tpl.slot_nodes, :].copy()


def init_target_hw_embedding(
    state: PredictorState, target_samples: LatencyTable, source_device_ids: Sequence[str]
) -> str:
    """Warm-start the target device's hardware row from its best-correlated source.

    The target device is the one device in target_samples that is not a
    source. Spearman correlation is computed over architectures measured on
    the target and on every source; the argmax source's row is copied
    (ties to the earliest source in the list). Returns the chosen source id.
    """
    sources = list(source_device_ids)
    targets = [d for d in target_samples.devices() if d not in sources]
    if len(targets) != 1:
        raise ValueError(f"expected exactly one non-source device in samples, got {targets}")
    target = targets[0]
    target_row = state.device_row(target)

    shared = set(target_samples.archs_for(target))
    for src in sources:
        shared &= {a for a in target_samples.archs_for(src)}
    shared_sorted = sorted(shared)
    if len(shared_sorted) < 2:
        raise InsufficientOverlap(
            f"only {len(shared_sorted)} archs shared between target and all sources (need >= 2)"
        )
    t_vec = np.array([target_samples.latency(a, target) for a in shared_sorted])
    best_rho, best_src = -np.inf, None
    for src in sources:
        s_vec = np.array([target_samples.latency(a, src) for a in shared_sorted])
        try:
            rho = spearman(t_vec, s_vec)
        except ConstantInput:
            continue
        if rho > best_rho:
            best_rho, best_src = rho, src
    if best_src is None:
        raise ConstantInput("no source device has a defined correlation with the target")
    hw = state.params["hw_embed"]
    hw.data[target_row] = hw.data[state.device_row(best_src)]
    return best_src


def save_checkpoint(state: PredictorState, path, extra: dict | None = None) -> None:
    """Write parameters to `path` and config/registry to `path + '.meta.json'`.

    `extra` is an arbitrary JSON-serializable annotation block (e.g. the
    transfer stage's target device and sample list).
    """
    path = Path(path)
    payload = {
        "version": CHECKPOINT_VERSION,
        "params": {
            name: {"shape": list(t.data.shape), "data": [float(v) for v in t.data.reshape(-1)]}
            for name, t in state.params.items()
        },
    }
    path.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(state.config),
        "devices": state.device_index,
        "space_ids": sorted(state.spaces),
        "null_op_index": state.null_op_index,
        "extra": extra or {},
    }
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")


def load_checkpoint(path) -> PredictorState:
    path = Path(path)
    payload = json.loads(path.read_text(encoding="utf-8"))
    meta = json.loads(Path(str(path) + ".meta.json").read_text(encoding="utf-8"))
    if payload.get("version") != CHECKPOINT_VERSION or meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError("unsupported checkpoint version")
    cfg = meta["config"]
    for key in ("ophw_gcn_dims", "ophw_mlp_dims", "gcn_dims", "head_mlp_dims"):
        cfg[key] = tuple(cfg[key])
    config = PredictorConfig(**cfg)
    params = {
        name: ad.param(np.array(entry["data"], dtype=np.float64).reshape(entry["shape"]))
        for name, entry in payload["params"].items()
    }
    spaces = {sid: get_space(sid) for sid in meta["space_ids"]}
    device_index = {d: int(i) for d, i in meta["devices"].items()}
    return PredictorState(config, spaces, params, device_index, int(meta["null_op_index"]))
