"""The learnable dynamics core: encoder, message-passing processor, decoder.

Node and edge features are embedded into latent vectors by MLPs, M graph-
network blocks exchange messages along radius edges with residual updates,
and a final MLP reads per-node accelerations out of the last latent graph.
Every MLP except the decoder is LayerNorm-terminated. Aggregation is an
order-fixed sum over incoming edges at the receiver, so nodes with no
neighbors still get updated (they aggregate a zero vector).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from gns import features as F
from gns import tensor as T
from gns.errors import ConfigError, DimensionError
from gns.graph import EdgeList, build_kdtree, radius_edges


@dataclass
class GnsConfig:
    latent_size: int = 128
    mlp_hidden_size: int = 128
    mlp_hidden_layers: int = 2
    message_passing_steps: int = 10
    shared_processor_params: bool = False
    encoder_variant: str = F.RELATIVE
    use_layer_norm: bool = True
    update_edge_latents: bool = True
    velocity_history: int = 5
    connectivity_radius: float = 0.015
    include_self_edges: bool = False
    dims: int = 2
    num_globals: int = 1
    num_materials: int = F.NUM_MATERIALS
    material_embedding_size: int = F.MATERIAL_EMBEDDING_SIZE

    def __post_init__(self):
        if self.message_passing_steps < 1:
            raise ConfigError("message_passing_steps must be >= 1")
        for name in ("latent_size", "mlp_hidden_size", "mlp_hidden_layers",
                     "velocity_history", "dims"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.encoder_variant not in (F.RELATIVE, F.ABSOLUTE):
            raise ConfigError(f"unknown encoder_variant '{self.encoder_variant}'")

    @property
    def node_feature_width(self) -> int:
        return F.node_feature_width(self.dims, self.velocity_history,
                                    self.encoder_variant, self.num_globals,
                                    self.material_embedding_size)

    @property
    def edge_feature_width(self) -> int:
        return F.edge_feature_width(self.dims, self.encoder_variant)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "GnsConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LatentGraph:
    node_latents: T.Tensor
    edge_latents: T.Tensor
    edges: EdgeList


def _block_name(cfg: GnsConfig, step: int) -> str:
    return "processor/shared" if cfg.shared_processor_params else f"processor/{step}"


def _mlp_shapes(in_width, hidden, n_hidden, out_width):
    widths = [in_width] + [hidden] * n_hidden + [out_width]
    return list(zip(widths[:-1], widths[1:]))


def _init_mlp(params, rng, prefix, in_width, cfg, out_width, layer_norm, dtype):
    for i, (fan_in, fan_out) in enumerate(
            _mlp_shapes(in_width, cfg.mlp_hidden_size, cfg.mlp_hidden_layers, out_width)):
        scale = 1.0 / np.sqrt(fan_in)
        params[f"{prefix}/w{i}"] = T.parameter(
            rng.uniform(-scale, scale, size=(fan_in, fan_out)).astype(dtype),
            name=f"{prefix}/w{i}")
        params[f"{prefix}/b{i}"] = T.parameter(
            np.zeros(fan_out, dtype=dtype), name=f"{prefix}/b{i}")
    if layer_norm:
        params[f"{prefix}/ln_gain"] = T.parameter(
            np.ones(out_width, dtype=dtype), name=f"{prefix}/ln_gain")
        params[f"{prefix}/ln_bias"] = T.parameter(
            np.zeros(out_width, dtype=dtype), name=f"{prefix}/ln_bias")


def _apply_mlp(params, prefix, x: T.Tensor, n_layers: int) -> T.Tensor:
    for i in range(n_layers):
        x = T.add(T.matmul(x, params[f"{prefix}/w{i}"]), params[f"{prefix}/b{i}"])
        if i < n_layers - 1:
            x = T.relu(x)
    gain = params.get(f"{prefix}/ln_gain")
    if gain is not None:
        x = T.layer_norm(x, gain, params[f"{prefix}/ln_bias"])
    return x


class GnsModel:
    """All learnable parameters, addressed by hierarchical names."""

    def __init__(self, cfg: GnsConfig, params: dict):
        self.cfg = cfg
        self.params = params
        self._n_layers = cfg.mlp_hidden_layers + 1

    @property
    def embedding(self) -> T.Tensor:
        return self.params["embedding/material"]

    def num_params(self) -> int:
        return sum(int(p.data.size) for p in self.params.values())

    def param_entries(self) -> dict:
        return {name: p.data for name, p in self.params.items()}

    def load_entries(self, entries: dict) -> None:
        for name, p in self.params.items():
            if name not in entries:
                raise ConfigError(f"checkpoint missing parameter '{name}'")
            arr = entries[name]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise ConfigError(
                    f"checkpoint/config mismatch for '{name}': "
                    f"{tuple(arr.shape)} vs {tuple(p.data.shape)}")
            p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)


def init_model(cfg: GnsConfig, seed: int = 0, dtype=np.float32) -> GnsModel:
    rng = np.random.default_rng((seed, 0))
    params: dict[str, T.Tensor] = {}

    embed_scale = 1.0 / np.sqrt(cfg.material_embedding_size)
    params["embedding/material"] = T.parameter(
        rng.uniform(-embed_scale, embed_scale,
                    size=(cfg.num_materials, cfg.material_embedding_size)).astype(dtype),
        name="embedding/material")

    ln = cfg.use_layer_norm
    _init_mlp(params, rng, "encoder/node", cfg.node_feature_width, cfg,
              cfg.latent_size, ln, dtype)
    if cfg.encoder_variant == F.RELATIVE:
        _init_mlp(params, rng, "encoder/edge", cfg.edge_feature_width, cfg,
                  cfg.latent_size, ln, dtype)
    else:
        params["encoder/edge_bias"] = T.parameter(
            np.zeros((1, cfg.latent_size), dtype=dtype), name="encoder/edge_bias")

    blocks = 1 if cfg.shared_processor_params else cfg.message_passing_steps
    for m in range(blocks):
        name = "processor/shared" if cfg.shared_processor_params else f"processor/{m}"
        _init_mlp(params, rng, f"{name}/edge", 3 * cfg.latent_size, cfg,
                  cfg.latent_size, ln, dtype)
        _init_mlp(params, rng, f"{name}/node", 2 * cfg.latent_size, cfg,
                  cfg.latent_size, ln, dtype)

    _init_mlp(params, rng, "decoder", cfg.latent_size, cfg, cfg.dims,
              layer_norm=False, dtype=dtype)
    return GnsModel(cfg, params)


def encode(sample: F.FeaturizedSample, model: GnsModel) -> LatentGraph:
    """Embeds features into the initial latent graph."""
    cfg = model.cfg
    if sample.node_features.shape[1] != cfg.node_feature_width:
        raise DimensionError(
            f"node feature width {sample.node_features.shape[1]} does not match "
            f"config width {cfg.node_feature_width}")
    nodes = _apply_mlp(model.params, "encoder/node", sample.node_features,
                       model._n_layers)
    n_edges = sample.edges.n_edges
    if cfg.encoder_variant == F.RELATIVE:
        if sample.edge_features.shape[1] != cfg.edge_feature_width:
            raise DimensionError(
                f"edge feature width {sample.edge_features.shape[1]} does not match "
                f"config width {cfg.edge_feature_width}")
        edge_latents = _apply_mlp(model.params, "encoder/edge",
                                  sample.edge_features, model._n_layers)
    else:
        edge_latents = T.gather_rows(model.params["encoder/edge_bias"],
                                     np.zeros(n_edges, dtype=np.int64))
    return LatentGraph(nodes, edge_latents, sample.edges)


def gn_block(g: LatentGraph, model: GnsModel, step: int) -> LatentGraph:
    """One message-passing step with residual node and edge updates."""
    cfg = model.cfg
    name = _block_name(cfg, step)
    recv, send = g.edges.receivers, g.edges.senders
    n = g.node_latents.shape[0]

    edge_in = T.concat([g.edge_latents,
                        T.gather_rows(g.node_latents, recv),
                        T.gather_rows(g.node_latents, send)], axis=1)
    messages = _apply_mlp(model.params, f"{name}/edge", edge_in, model._n_layers)
    updated_edges = T.add(g.edge_latents, messages)

    aggregated = T.scatter_sum(updated_edges, recv, n)
    node_in = T.concat([g.node_latents, aggregated], axis=1)
    delta = _apply_mlp(model.params, f"{name}/node", node_in, model._n_layers)
    updated_nodes = T.add(g.node_latents, delta)

    # With edge-latent updates disabled, messages still drive the node
    # update this step but the next block sees the original edge latents.
    out_edges = updated_edges if cfg.update_edge_latents else g.edge_latents
    return LatentGraph(updated_nodes, out_edges, g.edges)


def process(g: LatentGraph, model: GnsModel) -> LatentGraph:
    for step in range(model.cfg.message_passing_steps):
        g = gn_block(g, model, step)
    return g


def decode(g: LatentGraph, model: GnsModel) -> T.Tensor:
    """Per-node normalized accelerations (no LayerNorm, no activation)."""
    return _apply_mlp(model.params, "decoder", g.node_latents, model._n_layers)


def forward(sample: F.FeaturizedSample, model: GnsModel) -> T.Tensor:
    return decode(process(encode(sample, model), model), model)


def build_edges(model: GnsModel, positions) -> EdgeList:
    tree = build_kdtree(positions)
    return radius_edges(tree, model.cfg.connectivity_radius,
                        model.cfg.include_self_edges)


def predict_accel(state: F.ParticleState, model: GnsModel,
                  stats: F.NormStats) -> np.ndarray:
    """Physical accelerations for one state: graph build, featurize, forward,
    denormalize. Deterministic given (state, parameters, stats)."""
    edges = build_edges(model, state.positions)
    sample = F.featurize(state, edges, model.cfg.encoder_variant,
                         model.cfg.connectivity_radius, stats, model.embedding)
    out = forward(sample, model)
    return stats.accel.denormalize(out.data.astype(np.float64))
