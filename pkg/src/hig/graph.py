"""Heterogeneous image graph data model, builders, batching, and serialization.

A graph ties an H x W lattice of image nodes to typed conditioning nodes
(instances, semantic-mask classes, class vocabulary entries) through typed,
directed edge tables, one per meta-path. Image nodes store no features: they
are populated from the current image inside the network. Conditioning node
features are deterministic pseudo-embeddings of label strings.

Mask value convention: a scene's semantic mask stores integers where 0 means
"background" and k > 0 means the k-th entry of the sorted distinct object
labels. This keeps annotations self-describing without a vocabulary table.

Graphs are immutable after construction; builders are pure given their RNG,
so graphs can be built and serialized concurrently.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

# node kinds
IMAGE = "image"
INSTANCE = "instance"
MASK = "mask"
CLASS = "class"
KINDS = (IMAGE, INSTANCE, MASK, CLASS)

# relation names
REL_IN_BOX = "in_box"          # instance -> image
REL_COVERS = "covers"          # mask -> image
REL_REV_IN_BOX = "rev_in_box"  # image -> instance
REL_REV_COVERS = "rev_covers"  # image -> mask
REL_OF_CLASS = "of_class"      # instance -> class
REL_RELATES = "relates"        # instance -> instance, attributed
REL_ATTRIBUTE = "attribute"    # instance self-loop, attributed

BACKGROUND_CLASS = "background"


# ----------------------------------------------------------------------------
# Schema.


@dataclass(frozen=True)
class MetaPath:
    src_kind: str
    relation: str
    dst_kind: str
    has_edge_attr: bool = False
    directed: bool = True

    def __post_init__(self):
        if self.src_kind not in KINDS or self.dst_kind not in KINDS:
            raise ValueError(f"unknown node kind in meta-path {self}")


def default_schema(reverse_image_edges: bool = False) -> tuple[MetaPath, ...]:
    paths = [
        MetaPath(INSTANCE, REL_IN_BOX, IMAGE),
        MetaPath(MASK, REL_COVERS, IMAGE),
    ]
    if reverse_image_edges:
        paths += [
            MetaPath(IMAGE, REL_REV_IN_BOX, INSTANCE),
            MetaPath(IMAGE, REL_REV_COVERS, MASK),
        ]
    paths += [
        MetaPath(INSTANCE, REL_OF_CLASS, CLASS),
        MetaPath(INSTANCE, REL_RELATES, INSTANCE, has_edge_attr=True),
        MetaPath(INSTANCE, REL_ATTRIBUTE, INSTANCE, has_edge_attr=True),
    ]
    return tuple(paths)


@dataclass(frozen=True)
class GraphConfig:
    """Graph construction options.

    Conditioning flows toward the image; the optional reverse meta-paths let
    conditioning nodes observe image state, but they make conditioning nodes
    pool hundreds of same-sign-mean activations, which measurably breaks the
    magnitude bands at depth 4, so they default off.
    """

    embed_dim: int = 32
    reverse_image_edges: bool = False

    def schema(self) -> tuple[MetaPath, ...]:
        return default_schema(self.reverse_image_edges)


# ----------------------------------------------------------------------------
# Edge storage and neighbor indexing.


@dataclass
class EdgeTable:
    src: np.ndarray  # int64 (E,)
    dst: np.ndarray  # int64 (E,)
    attr: np.ndarray | None = None  # float (E, F_edge)

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        if self.attr is not None:
            self.attr = np.asarray(self.attr, dtype=np.float64)

    @property
    def count(self) -> int:
        return int(self.src.size)


@dataclass
class NeighborIndex:
    """Compressed per-destination adjacency for one meta-path.

    Edges are re-ordered by (dst, src) so aggregation order is deterministic:
    each destination's neighbors are visited in ascending source index.
    """

    n_dst: int
    degrees: np.ndarray       # int64 (n_dst,)
    edge_order: np.ndarray    # permutation of the stored edge table
    src_sorted: np.ndarray
    dst_sorted: np.ndarray


# ----------------------------------------------------------------------------
# The graph.


@dataclass
class HeteroImageGraph:
    grid: tuple[int, int]                       # (H, W)
    node_tables: dict[str, np.ndarray]          # kind -> (count, F); no image entry
    edge_tables: dict[MetaPath, EdgeTable]
    schema: tuple[MetaPath, ...]
    batch: int = 1
    caption_emb: np.ndarray | None = None       # (F,) or (batch, F)
    _nbr_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def num_nodes(self, kind: str) -> int:
        if kind == IMAGE:
            return self.batch * self.grid[0] * self.grid[1]
        return int(self.node_tables[kind].shape[0])

    def neighbor_index(self, path: MetaPath) -> NeighborIndex:
        if path not in self.edge_tables:
            raise ValueError(f"unknown meta-path: {path}")
        if path not in self._nbr_cache:
            table = self.edge_tables[path]
            n_dst = self.num_nodes(path.dst_kind)
            order = np.lexsort((table.src, table.dst))
            self._nbr_cache[path] = NeighborIndex(
                n_dst=n_dst,
                degrees=np.bincount(table.dst, minlength=n_dst).astype(np.int64),
                edge_order=order,
                src_sorted=table.src[order],
                dst_sorted=table.dst[order],
            )
        return self._nbr_cache[path]

    def validate(self):
        """Check structural invariants; raises ValueError on the first failure."""
        h, w = self.grid
        if h < 1 or w < 1 or self.batch < 1:
            raise ValueError("bad grid dimensions")
        for kind, table in self.node_tables.items():
            if kind == IMAGE:
                raise ValueError("image nodes must not carry stored features")
            if table.ndim != 2:
                raise ValueError(f"node table for {kind} must be 2-D")
        for path in self.schema:
            table = self.edge_tables[path]
            ns, nd = self.num_nodes(path.src_kind), self.num_nodes(path.dst_kind)
            if table.count:
                if table.src.min() < 0 or table.src.max() >= ns:
                    raise ValueError(f"src index out of range on {path}")
                if table.dst.min() < 0 or table.dst.max() >= nd:
                    raise ValueError(f"dst index out of range on {path}")
                pairs = table.src * np.int64(nd) + table.dst
                if np.unique(pairs).size != table.count:
                    raise ValueError(f"duplicate (src, dst) pair on {path}")
            if path.has_edge_attr:
                if table.attr is None or table.attr.shape[0] != table.count:
                    raise ValueError(f"edge attribute rows mismatch on {path}")
            elif table.attr is not None:
                raise ValueError(f"unexpected edge attributes on {path}")
        return self


def graphs_equal(a: HeteroImageGraph, b: HeteroImageGraph) -> bool:
    if a.grid != b.grid or a.batch != b.batch or a.schema != b.schema:
        return False
    if sorted(a.node_tables) != sorted(b.node_tables):
        return False
    for kind in a.node_tables:
        if not np.array_equal(a.node_tables[kind], b.node_tables[kind]):
            return False
    for path in a.schema:
        ta, tb = a.edge_tables[path], b.edge_tables[path]
        if not (np.array_equal(ta.src, tb.src) and np.array_equal(ta.dst, tb.dst)):
            return False
        if (ta.attr is None) != (tb.attr is None):
            return False
        if ta.attr is not None and not np.array_equal(ta.attr, tb.attr):
            return False
    if (a.caption_emb is None) != (b.caption_emb is None):
        return False
    if a.caption_emb is not None and not np.array_equal(a.caption_emb, b.caption_emb):
        return False
    return True


# ----------------------------------------------------------------------------
# Scene annotations (the on-disk conditioning record).


@dataclass
class SceneObject:
    label: str
    bbox: tuple[int, int, int, int]  # half-open (x0, y0, x1, y1) on the grid
    attributes: list[str] = field(default_factory=list)


@dataclass
class SceneAnnotation:
    width: int
    height: int
    objects: list[SceneObject]
    mask: np.ndarray | None = None               # (H, W) int per the value convention
    relationships: list[tuple[int, str, int]] = field(default_factory=list)
    caption: str | None = None

    def validate(self):
        for obj in self.objects:
            x0, y0, x1, y1 = obj.bbox
            if not (0 <= x0 < x1 <= self.width and 0 <= y0 < y1 <= self.height):
                raise ValueError(f"bbox out of bounds: {obj.bbox}")
        n = len(self.objects)
        for s, _, o in self.relationships:
            if not (0 <= s < n and 0 <= o < n):
                raise ValueError("relationship index out of range")
        if self.mask is not None:
            m = np.asarray(self.mask)
            if m.shape != (self.height, self.width):
                raise ValueError(
                    f"mask dims {m.shape} do not match grid "
                    f"({self.height}, {self.width})"
                )
        return self

    def class_names(self) -> list[str]:
        """Mask-value vocabulary: index 0 is background, then sorted labels."""
        return [BACKGROUND_CLASS] + sorted({o.label for o in self.objects})

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "objects": [
                {"label": o.label, "bbox": list(o.bbox), "attributes": list(o.attributes)}
                for o in self.objects
            ],
            "mask": None if self.mask is None else np.asarray(self.mask).reshape(-1).tolist(),
            "relationships": [[s, p, o] for s, p, o in self.relationships],
            "caption": self.caption,
        }

    @classmethod
    def from_json(cls, data: dict) -> "SceneAnnotation":
        mask = data.get("mask")
        if mask is not None:
            mask = np.asarray(mask, dtype=np.int64).reshape(
                data["height"], data["width"]
            )
        return cls(
            width=int(data["width"]),
            height=int(data["height"]),
            objects=[
                SceneObject(o["label"], tuple(o["bbox"]), list(o.get("attributes", [])))
                for o in data["objects"]
            ],
            mask=mask,
            relationships=[(int(s), str(p), int(o)) for s, p, o in data.get("relationships", [])],
            caption=data.get("caption"),
        ).validate()


def save_annotation(ann: SceneAnnotation, path):
    with open(path, "w") as f:
        json.dump(ann.to_json(), f)


def load_annotation(path) -> SceneAnnotation:
    with open(path) as f:
        return SceneAnnotation.from_json(json.load(f))


# ----------------------------------------------------------------------------
# Deterministic label embedding (CLIP stand-in).


class LabelEmbedder:
    """Maps label strings to fixed unit-norm Gaussian vectors.

    The draw is seeded by a hash of (seed, label), so the same label always
    produces the same vector and distinct labels are nearly orthogonal at
    realistic embed dims.
    """

    def __init__(self, embed_dim: int = 32, seed: int = 0):
        self.embed_dim = int(embed_dim)
        self.seed = int(seed)
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, label: str) -> np.ndarray:
        if not label:
            raise ValueError("cannot embed an empty label")
        cached = self._cache.get(label)
        if cached is not None:
            return cached
        digest = hashlib.sha256(f"{self.seed}\x1f{label}".encode()).digest()
        key = int.from_bytes(digest[:8], "little")
        v = np.random.default_rng(key).standard_normal(self.embed_dim)
        v /= np.linalg.norm(v)
        self._cache[label] = v
        return v


def pseudo_clip_embed(label: str, embedder: LabelEmbedder) -> np.ndarray:
    return embedder.embed(label)


# ----------------------------------------------------------------------------
# Builders.


def _bbox_pixels(bbox, width) -> np.ndarray:
    """Row-major image-node indices covered by a half-open bbox."""
    x0, y0, x1, y1 = bbox
    xs = np.arange(x0, x1, dtype=np.int64)
    ys = np.arange(y0, y1, dtype=np.int64)
    return (ys[:, None] * width + xs[None, :]).reshape(-1)


def _merge_duplicate_edges(src, dst, attr, n_dst):
    """Merge repeated (src, dst) pairs; attributes combine by normalized sum."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    if src.size == 0:
        return src, dst, attr
    key = src * np.int64(n_dst) + dst
    order = np.argsort(key, kind="stable")
    key_sorted = key[order]
    uniq, starts, counts = np.unique(key_sorted, return_index=True, return_counts=True)
    if uniq.size == src.size:
        return src, dst, attr
    new_src = src[order][starts]
    new_dst = dst[order][starts]
    new_attr = None
    if attr is not None:
        sums = np.add.reduceat(np.asarray(attr)[order], starts, axis=0)
        new_attr = sums / np.sqrt(counts)[:, None]
    return new_src, new_dst, new_attr


def build_hig(
    ann: SceneAnnotation,
    embedder: LabelEmbedder,
    config: GraphConfig = GraphConfig(),
) -> HeteroImageGraph:
    """Build the conditioning graph for one annotated scene.

    One instance node per object (feature = embedding of its label), with
    edges to every pixel inside its box; one mask node per distinct mask value
    with an edge per assigned pixel; one class node per distinct label; one
    attributed instance-instance edge per relationship and one attributed
    self-loop per object attribute. Reverse image-to-conditioning paths are
    added when configured so conditioning nodes can observe image state.
    """
    ann.validate()
    h, w = ann.height, ann.width
    schema = config.schema()
    f_dim = embedder.embed_dim

    labels = [o.label for o in ann.objects]
    class_names = sorted(set(labels))
    class_index = {name: i for i, name in enumerate(class_names)}

    inst_feat = (
        np.stack([embedder.embed(lb) for lb in labels])
        if labels
        else np.zeros((0, f_dim))
    )
    class_feat = (
        np.stack([embedder.embed(c) for c in class_names])
        if class_names
        else np.zeros((0, f_dim))
    )

    # instance -> image
    in_src, in_dst = [], []
    for i, obj in enumerate(ann.objects):
        pix = _bbox_pixels(obj.bbox, w)
        in_src.append(np.full(pix.size, i, dtype=np.int64))
        in_dst.append(pix)
    in_src = np.concatenate(in_src) if in_src else np.zeros(0, dtype=np.int64)
    in_dst = np.concatenate(in_dst) if in_dst else np.zeros(0, dtype=np.int64)

    # mask nodes and mask -> image
    mask_feat = np.zeros((0, f_dim))
    mk_src = np.zeros(0, dtype=np.int64)
    mk_dst = np.zeros(0, dtype=np.int64)
    if ann.mask is not None:
        mask = np.asarray(ann.mask, dtype=np.int64)
        value_names = ann.class_names()
        values = np.unique(mask)
        if values.min() < 0 or values.max() >= len(value_names):
            raise ValueError("mask value outside the label vocabulary")
        mask_feat = np.stack([embedder.embed(value_names[v]) for v in values])
        value_to_node = {int(v): i for i, v in enumerate(values)}
        flat = mask.reshape(-1)
        mk_dst = np.arange(h * w, dtype=np.int64)
        mk_src = np.array([value_to_node[int(v)] for v in flat], dtype=np.int64)

    # instance -> class
    oc_src = np.arange(len(labels), dtype=np.int64)
    oc_dst = np.array([class_index[lb] for lb in labels], dtype=np.int64)

    # relationships: directed instance edges with predicate embeddings
    rl_src = np.array([s for s, _, _ in ann.relationships], dtype=np.int64)
    rl_dst = np.array([o for _, _, o in ann.relationships], dtype=np.int64)
    rl_attr = (
        np.stack([embedder.embed(p) for _, p, _ in ann.relationships])
        if ann.relationships
        else np.zeros((0, f_dim))
    )
    rl_src, rl_dst, rl_attr = _merge_duplicate_edges(
        rl_src, rl_dst, rl_attr, max(len(labels), 1)
    )

    # attribute self-loops
    at_src, at_attr = [], []
    for i, obj in enumerate(ann.objects):
        for attr_name in obj.attributes:
            at_src.append(i)
            at_attr.append(embedder.embed(attr_name))
    at_src = np.asarray(at_src, dtype=np.int64)
    at_dst = at_src.copy()
    at_attr = np.stack(at_attr) if at_attr else np.zeros((0, f_dim))
    at_src, at_dst, at_attr = _merge_duplicate_edges(
        at_src, at_dst, at_attr, max(len(labels), 1)
    )

    tables = {
        MetaPath(INSTANCE, REL_IN_BOX, IMAGE): EdgeTable(in_src, in_dst),
        MetaPath(MASK, REL_COVERS, IMAGE): EdgeTable(mk_src, mk_dst),
        MetaPath(INSTANCE, REL_OF_CLASS, CLASS): EdgeTable(oc_src, oc_dst),
        MetaPath(INSTANCE, REL_RELATES, INSTANCE, True): EdgeTable(
            rl_src, rl_dst, rl_attr
        ),
        MetaPath(INSTANCE, REL_ATTRIBUTE, INSTANCE, True): EdgeTable(
            at_src, at_dst, at_attr
        ),
    }
    if config.reverse_image_edges:
        tables[MetaPath(IMAGE, REL_REV_IN_BOX, INSTANCE)] = EdgeTable(
            in_dst.copy(), in_src.copy()
        )
        tables[MetaPath(IMAGE, REL_REV_COVERS, MASK)] = EdgeTable(
            mk_dst.copy(), mk_src.copy()
        )

    caption_emb = embedder.embed(ann.caption) if ann.caption else None

    graph = HeteroImageGraph(
        grid=(h, w),
        node_tables={INSTANCE: inst_feat, MASK: mask_feat, CLASS: class_feat},
        edge_tables={p: tables[p] for p in schema},
        schema=schema,
        caption_emb=caption_emb,
    )
    return graph.validate()


def mask_dropout(
    g: HeteroImageGraph, p: float, rng: np.random.Generator
) -> HeteroImageGraph:
    """Independently remove each mask node (and its incident edges) with
    probability p; other node kinds are untouched."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("dropout probability must lie in [0, 1]")
    n_mask = g.num_nodes(MASK)
    keep = rng.random(n_mask) >= p
    new_index = np.cumsum(keep) - 1

    new_tables = dict(g.node_tables)
    new_tables[MASK] = g.node_tables[MASK][keep]

    new_edges = {}
    for path, table in g.edge_tables.items():
        src, dst, attr = table.src, table.dst, table.attr
        if path.src_kind == MASK:
            live = keep[src]
            src, dst = new_index[src[live]], dst[live]
            attr = attr[live] if attr is not None else None
        elif path.dst_kind == MASK:
            live = keep[dst]
            src, dst = src[live], new_index[dst[live]]
            attr = attr[live] if attr is not None else None
        else:
            src, dst = src.copy(), dst.copy()
            attr = attr.copy() if attr is not None else None
        new_edges[path] = EdgeTable(src, dst, attr)

    return HeteroImageGraph(
        grid=g.grid,
        node_tables=new_tables,
        edge_tables=new_edges,
        schema=g.schema,
        batch=g.batch,
        caption_emb=None if g.caption_emb is None else g.caption_emb.copy(),
    )


def disjoint_union(graphs: list[HeteroImageGraph]) -> HeteroImageGraph:
    """Concatenate graphs with index offsets; image nodes become a batch."""
    if not graphs:
        raise ValueError("cannot union zero graphs")
    first = graphs[0]
    for g in graphs[1:]:
        if g.schema != first.schema or g.grid != first.grid:
            raise ValueError("schema or grid mismatch in disjoint_union")

    px = first.grid[0] * first.grid[1]
    kinds = sorted(first.node_tables)
    offsets = {k: np.cumsum([0] + [g.num_nodes(k) for g in graphs]) for k in kinds}
    offsets[IMAGE] = np.cumsum([0] + [g.batch * px for g in graphs])

    node_tables = {
        k: np.concatenate([g.node_tables[k] for g in graphs]) for k in kinds
    }
    edge_tables = {}
    for path in first.schema:
        srcs, dsts, attrs = [], [], []
        for i, g in enumerate(graphs):
            t = g.edge_tables[path]
            srcs.append(t.src + offsets[path.src_kind][i])
            dsts.append(t.dst + offsets[path.dst_kind][i])
            if path.has_edge_attr:
                attrs.append(t.attr)
        edge_tables[path] = EdgeTable(
            np.concatenate(srcs),
            np.concatenate(dsts),
            np.concatenate(attrs) if attrs else None,
        )

    caption = None
    if any(g.caption_emb is not None for g in graphs):
        f_dim = next(
            g.caption_emb.shape[-1] for g in graphs if g.caption_emb is not None
        )
        rows = []
        for g in graphs:
            if g.caption_emb is None:
                rows.append(np.zeros((g.batch, f_dim)))
            else:
                rows.append(np.atleast_2d(g.caption_emb))
        caption = np.concatenate(rows)

    total_batch = sum(g.batch for g in graphs)
    return HeteroImageGraph(
        grid=first.grid,
        node_tables=node_tables,
        edge_tables=edge_tables,
        schema=first.schema,
        batch=total_batch,
        caption_emb=caption,
    )


# ----------------------------------------------------------------------------
# HIG1 binary container.

_MAGIC = b"HIG1"
_VERSION = 1


def _write_str(f, s: str):
    raw = s.encode()
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValueError("truncated HIG file")
    return data


def _read_str(f) -> str:
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return _read_exact(f, n).decode()


def _write_array(f, a: np.ndarray, dtype):
    a = np.asarray(a, dtype=dtype, order="C")
    f.write(struct.pack("<I", a.ndim))
    for d in a.shape:
        f.write(struct.pack("<Q", d))
    f.write(a.tobytes())


def _read_array(f, dtype) -> np.ndarray:
    (ndim,) = struct.unpack("<I", _read_exact(f, 4))
    shape = tuple(
        struct.unpack("<Q", _read_exact(f, 8))[0] for _ in range(ndim)
    )
    count = int(np.prod(shape)) if shape else 1
    raw = _read_exact(f, count * np.dtype(dtype).itemsize)
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def save_graph(g: HeteroImageGraph, path):
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<III", g.grid[0], g.grid[1], g.batch))

        f.write(struct.pack("<B", 0 if g.caption_emb is None else 1))
        if g.caption_emb is not None:
            _write_array(f, g.caption_emb, np.float64)

        kinds = sorted(g.node_tables)
        f.write(struct.pack("<I", len(kinds)))
        for kind in kinds:
            _write_str(f, kind)
            _write_array(f, g.node_tables[kind], np.float64)

        f.write(struct.pack("<I", len(g.schema)))
        for p in g.schema:
            _write_str(f, p.src_kind)
            _write_str(f, p.relation)
            _write_str(f, p.dst_kind)
            f.write(struct.pack("<B", 1 if p.has_edge_attr else 0))
            table = g.edge_tables[p]
            _write_array(f, table.src, np.int64)
            _write_array(f, table.dst, np.int64)
            if p.has_edge_attr:
                _write_array(f, table.attr, np.float64)


def load_graph(path) -> HeteroImageGraph:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != _MAGIC:
            raise ValueError("not a HIG file")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != _VERSION:
            raise ValueError(f"unsupported HIG version {version}")
        h, w, batch = struct.unpack("<III", _read_exact(f, 12))

        (has_caption,) = struct.unpack("<B", _read_exact(f, 1))
        caption = _read_array(f, np.float64) if has_caption else None

        (n_kinds,) = struct.unpack("<I", _read_exact(f, 4))
        node_tables = {}
        for _ in range(n_kinds):
            kind = _read_str(f)
            node_tables[kind] = _read_array(f, np.float64)

        (n_paths,) = struct.unpack("<I", _read_exact(f, 4))
        schema = []
        edge_tables = {}
        for _ in range(n_paths):
            src_kind = _read_str(f)
            relation = _read_str(f)
            dst_kind = _read_str(f)
            (has_attr,) = struct.unpack("<B", _read_exact(f, 1))
            path = MetaPath(src_kind, relation, dst_kind, bool(has_attr))
            src = _read_array(f, np.int64)
            dst = _read_array(f, np.int64)
            attr = _read_array(f, np.float64) if has_attr else None
            schema.append(path)
            edge_tables[path] = EdgeTable(src, dst, attr)

        return HeteroImageGraph(
            grid=(h, w),
            node_tables=node_tables,
            edge_tables=edge_tables,
            schema=tuple(schema),
            batch=batch,
            caption_emb=caption,
        )
