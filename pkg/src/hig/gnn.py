"""Magnitude-preserving heterogeneous graph network.

The network switches the current image features into graph nodes, runs a
stack of blocks where every meta-path applies one graph convolution and each
node kind combines the results of its incoming paths, then switches the image
nodes back into a feature map that conditions the denoiser.

Each convolution mixes a residual branch on the destination features with a
degree-normalized pooling of neighbor messages (optionally concatenated with
edge attributes); zero-degree nodes take only the residual branch, exactly.

Variants: "mp" is the magnitude-preserving operator; "naive" swaps in raw
weights, plain sums and plain concatenation (the exploding baseline);
"pixnorm" uses the naive operator but re-normalizes every updated node kind
after each block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graph import IMAGE, HeteroImageGraph, MetaPath
from .ops import WEIGHT_EPS, NormalizedWeight, mp_cat, mp_silu, mp_sum, pixel_norm
from .tensor import DiffArray, asdiff

VARIANTS = ("mp", "naive", "pixnorm")


@dataclass(frozen=True)
class GnnConfig:
    channels: int = 64          # node feature width inside the network
    embed_dim: int = 32         # conditioning feature / edge attribute width
    blocks: int = 4
    t_sum: float = 0.3          # residual vs pooled mix
    t_cat: float = 0.5          # message vs edge-attribute mix
    weight_eps: float = WEIGHT_EPS
    variant: str = "mp"
    per_graph_path_count: bool = False  # count only paths with edges when combining
    compensated_sums: bool = False      # bit-exact aggregation regardless of edge order

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.blocks < 1:
            raise ValueError("need at least one block")


# ----------------------------------------------------------------------------
# Parameters.


@dataclass
class HIGBlockParams:
    w1: dict[MetaPath, NormalizedWeight]
    w2: dict[MetaPath, NormalizedWeight]


class HIGnnParams:
    """Per-block, per-meta-path weights plus the switching projections.

    Feature widths evolve: every kind with at least one incoming meta-path is
    C-dimensional after a block; kinds without incoming paths keep their
    input width, and the per-path weight shapes track that.
    """

    def __init__(
        self,
        schema: tuple[MetaPath, ...],
        cfg: GnnConfig,
        rng: np.random.Generator,
        image_channels: int | None = None,
        dtype=np.float64,
    ):
        self.schema = schema
        self.cfg = cfg
        c = cfg.channels
        cin = image_channels if image_channels is not None else c

        self.in_proj = NormalizedWeight.create((c, cin), rng, cfg.weight_eps, dtype)
        self.out_proj = NormalizedWeight.create((cin, c), rng, cfg.weight_eps, dtype)

        updated = {p.dst_kind for p in schema}
        dims = {IMAGE: c}
        for p in schema:
            dims.setdefault(p.src_kind, cfg.embed_dim)
            dims.setdefault(p.dst_kind, cfg.embed_dim)

        self.blocks: list[HIGBlockParams] = []
        for _ in range(cfg.blocks):
            w1, w2 = {}, {}
            for p in schema:
                extra = cfg.embed_dim if p.has_edge_attr else 0
                w1[p] = NormalizedWeight.create(
                    (c, dims[p.dst_kind]), rng, cfg.weight_eps, dtype
                )
                w2[p] = NormalizedWeight.create(
                    (c, dims[p.src_kind] + extra), rng, cfg.weight_eps, dtype
                )
            self.blocks.append(HIGBlockParams(w1, w2))
            dims = {k: (c if k in updated else d) for k, d in dims.items()}

    def named_parameters(self) -> dict[str, DiffArray]:
        out = {"in_proj": self.in_proj.raw, "out_proj": self.out_proj.raw}
        for b, blk in enumerate(self.blocks):
            for i, p in enumerate(self.schema):
                out[f"block{b}.path{i}.w1"] = blk.w1[p].raw
                out[f"block{b}.path{i}.w2"] = blk.w2[p].raw
        return out

    def load_state(self, tensors: dict[str, np.ndarray], prefix: str = ""):
        for name, param in self.named_parameters().items():
            src = tensors[prefix + name]
            if src.shape != param.values.shape:
                raise ValueError(f"shape mismatch for {prefix + name}")
            param.values = src.astype(param.values.dtype)


# ----------------------------------------------------------------------------
# Representation switching.


def image_to_nodes(x_img, proj: NormalizedWeight | None = None) -> DiffArray:
    """Reshape (C,H,W) or (B,C,H,W) image features into row-major nodes and
    apply the optional forced-norm projection."""
    x = asdiff(x_img)
    if x.ndim == 3:
        c = x.shape[0]
        nodes = T.reshape(T.transpose(x, (1, 2, 0)), (-1, c))
    elif x.ndim == 4:
        c = x.shape[1]
        nodes = T.reshape(T.transpose(x, (0, 2, 3, 1)), (-1, c))
    else:
        raise ValueError("expected (C,H,W) or (B,C,H,W) image features")
    if proj is not None:
        nodes = nodes @ T.transpose(proj.effective())
    return nodes


def nodes_to_image(
    x_nodes, grid: tuple[int, int], proj: NormalizedWeight | None = None,
    batch: int | None = None,
) -> DiffArray:
    """Inverse of image_to_nodes; returns (C,H,W), or (B,C,H,W) when batch given."""
    nodes = asdiff(x_nodes)
    if proj is not None:
        nodes = nodes @ T.transpose(proj.effective())
    h, w = grid
    c = nodes.shape[-1]
    if batch is None:
        if nodes.shape[0] != h * w:
            raise ValueError("node count does not match the grid")
        return T.transpose(T.reshape(nodes, (h, w, c)), (2, 0, 1))
    if nodes.shape[0] != batch * h * w:
        raise ValueError("node count does not match the batched grid")
    return T.transpose(T.reshape(nodes, (batch, h, w, c)), (0, 3, 1, 2))


# ----------------------------------------------------------------------------
# The per-meta-path convolution.


def hig_conv(
    graph: HeteroImageGraph,
    feats: dict[str, DiffArray],
    w1: NormalizedWeight,
    w2: NormalizedWeight,
    path: MetaPath,
    cfg: GnnConfig,
    edge_attr: DiffArray | None = None,
) -> DiffArray:
    """One graph convolution along `path`, returning updated dst-kind features.

    Destination node i gets silu(W1 x_i) when it has no neighbors, otherwise
    silu(mp_sum(W1 x_i, W2 (1/sqrt(N_i)) sum_j m_j, t_sum)) with per-edge
    message m_j either the source features or their MP-concatenation with the
    edge attribute. `edge_attr` overrides the stored attribute rows (used for
    differentiating through them).
    """
    mp = cfg.variant == "mp"
    table = graph.edge_tables[path]
    if path.has_edge_attr:
        if edge_attr is None and (
            table.attr is None or table.attr.shape[0] != table.count
        ):
            raise ValueError(f"missing edge attributes on {path}")

    eff1 = w1.effective() if mp else w1.raw
    resid = feats[path.dst_kind] @ T.transpose(eff1)
    pre = resid

    if table.count:
        nbr = graph.neighbor_index(path)
        msgs = T.take_rows(feats[path.src_kind], nbr.src_sorted)
        if path.has_edge_attr:
            attr_rows = edge_attr if edge_attr is not None else DiffArray(table.attr)
            attr = T.take_rows(attr_rows, nbr.edge_order)
            if mp:
                msgs = mp_cat(msgs, attr, cfg.t_cat)
            else:
                msgs = T.concat([msgs, attr], axis=-1)
        seg = T.segment_sum_compensated if cfg.compensated_sums else T.segment_sum
        agg = seg(msgs, nbr.dst_sorted, nbr.n_dst)
        if mp:
            inv = 1.0 / np.sqrt(np.maximum(nbr.degrees, 1.0))
            agg = agg * DiffArray(inv[:, None].astype(agg.dtype))
        eff2 = w2.effective() if mp else w2.raw
        pooled = agg @ T.transpose(eff2)
        mixed = mp_sum(resid, pooled, cfg.t_sum) if mp else resid + pooled
        # zero-degree nodes only take the residual branch
        pre = T.where_mask((nbr.degrees > 0)[:, None], mixed, resid)

    return mp_silu(pre)


def combine_meta_paths(outputs: list[DiffArray], path_count: int) -> DiffArray:
    """Sum the per-path updates and divide by sqrt(number of incoming paths)."""
    if path_count < 1 or not outputs:
        raise ValueError("combination needs at least one incoming path")
    acc = outputs[0]
    for out in outputs[1:]:
        acc = acc + out
    return acc * (1.0 / float(np.sqrt(path_count)))


def run_block(
    graph: HeteroImageGraph,
    feats: dict[str, DiffArray],
    block: HIGBlockParams,
    cfg: GnnConfig,
) -> dict[str, DiffArray]:
    """All meta-path convolutions of one block plus the per-kind combination.
    Kinds with no incoming meta-path pass through unchanged."""
    outputs: dict[str, list[DiffArray]] = {}
    counts: dict[str, int] = {}
    for path in graph.schema:
        counts[path.dst_kind] = counts.get(path.dst_kind, 0) + 1
        if cfg.per_graph_path_count and graph.edge_tables[path].count == 0:
            continue
        out = hig_conv(graph, feats, block.w1[path], block.w2[path], path, cfg)
        outputs.setdefault(path.dst_kind, []).append(out)

    new_feats = dict(feats)
    for kind, outs in outputs.items():
        n = len(outs) if cfg.per_graph_path_count else counts[kind]
        updated = combine_meta_paths(outs, n)
        if cfg.variant == "pixnorm":
            updated = pixel_norm(updated)
        new_feats[kind] = updated
    return new_feats


# ----------------------------------------------------------------------------
# Full forward pass.


def node_features(graph: HeteroImageGraph, dtype=np.float64) -> dict[str, DiffArray]:
    return {k: DiffArray(v.astype(dtype)) for k, v in graph.node_tables.items()}


def hignn_nodes_forward(
    graph: HeteroImageGraph, x_nodes, params: HIGnnParams
) -> DiffArray:
    """Run the block stack on already-switched image nodes; returns the
    updated image nodes (projection by out_proj not applied)."""
    feats = node_features(graph, dtype=asdiff(x_nodes).dtype)
    feats[IMAGE] = asdiff(x_nodes)
    for block in params.blocks:
        feats = run_block(graph, feats, block, params.cfg)
    return feats[IMAGE]


def hignn_forward(graph: HeteroImageGraph, x_img, params: HIGnnParams) -> DiffArray:
    """Image features in, conditioning feature map out: switch to nodes,
    run the blocks, switch back. Accepts (C,H,W) or (B,C,H,W)."""
    x = asdiff(x_img)
    batched = x.ndim == 4
    batch = x.shape[0] if batched else 1
    if batch * graph.grid[0] * graph.grid[1] != graph.num_nodes(IMAGE):
        raise ValueError("image dims do not match the graph's image-node count")
    nodes = image_to_nodes(x, params.in_proj)
    nodes = hignn_nodes_forward(graph, nodes, params)
    return nodes_to_image(
        nodes, graph.grid, params.out_proj, batch=batch if batched else None
    )
