"""The two-branch encoder, predictor, task heads, and checkpoint I/O.

The encoder maps one (graph, volume) pair to a d-vector: a two-layer graph
attention branch with global average+max readouts after each layer, a
four-stage 3D convolutional branch, and a projection MLP (linear - batch
standardization - ReLU - linear - affine-free batch standardization) on the
concatenated branch embeddings.

Attention logits combine the usual concatenation form with an additive
signed edge-weight term: for receiver i and neighbor j (self-loop weight 1),

    l_ij = LeakyReLU(a . [W h_i || W h_j]) + b_edge * w_ij

followed by a softmax over N(i) u {i} and an ELU on the weighted message
sum.  The additive term keeps the sign of the partial-correlation edges,
which plain attention on unweighted neighborhoods would discard.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .autodiff import Tensor, as_tensor, concat
from .data import BrainGraph
from .nn import BatchNorm, Conv3d, Linear, Module, ModuleList, Parameter

_NEG_INF = -1e30
_INIT_TAG = 0x1217


def _seed_key(seed) -> tuple[int, ...]:
    """Normalize int-or-tuple seeds into a flat entropy tuple."""
    if isinstance(seed, (tuple, list)):
        return tuple(int(s) for s in seed)
    return (int(seed),)


@dataclass
class EncoderConfig:
    n_rois: int
    image_shape: tuple[int, int, int]
    embed_dim: int = 2048          # 8192 suits small block-design cohorts
    gat_width: int = 128
    cnn_channels: tuple[int, ...] = (8, 16, 32, 64)
    use_projection: bool = True    # off = "plain concatenation" ablation
    use_gnn: bool = True
    use_cnn: bool = True
    bn_eps: float = 1e-3
    dtype: str = "float32"

    def validate(self) -> "EncoderConfig":
        shape = tuple(self.image_shape)
        if len(shape) != 3:
            raise ValueError("image_shape must have 3 dims")
        if self.use_cnn and min(shape) < 2 ** len(self.cnn_channels):
            raise ValueError(
                f"image dims {shape} too small for {len(self.cnn_channels)} pooling stages; "
                f"need >= {2 ** len(self.cnn_channels)} per axis"
            )
        if not (self.use_gnn or self.use_cnn):
            raise ValueError("at least one encoder branch must be enabled")
        if self.embed_dim < 1 or self.gat_width < 1:
            raise ValueError("dimensions must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        return self

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def graph_embed_dim(self) -> int:
        return 4 * self.gat_width

    @property
    def image_embed_dim(self) -> int:
        return self.cnn_channels[-1]

    @property
    def concat_dim(self) -> int:
        return self.graph_embed_dim + self.image_embed_dim

    @property
    def out_dim(self) -> int:
        return self.embed_dim if self.use_projection else self.concat_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        d["cnn_channels"] = list(self.cnn_channels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        d = dict(d)
        d["image_shape"] = tuple(d["image_shape"])
        d["cnn_channels"] = tuple(d["cnn_channels"])
        return EncoderConfig(**d).validate()


class GATLayer(Module):
    """Single-head graph attention over dense per-instance adjacency."""

    def __init__(self, in_dim: int, width: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.in_dim, self.width = in_dim, width
        bound = 1.0 / np.sqrt(in_dim)
        self.W = Parameter(rng.uniform(-bound, bound, size=(in_dim, width)).astype(dtype))
        a_bound = 1.0 / np.sqrt(width)
        self.a = Parameter(rng.uniform(-a_bound, a_bound, size=(2 * width,)).astype(dtype))
        self.b_edge = Parameter(np.asarray(1.0, dtype=dtype))

    def forward(self, h: Tensor, adj_weight: np.ndarray, adj_mask: np.ndarray) -> Tensor:
        """h: (B, n, F); adj_weight/adj_mask: (B, n, n) with unit self-loops.
        Row i of the attention matrix spans j in N(i) u {i}."""
        wh = h @ self.W                               # (B, n, w)
        w = self.width
        s_dst = (wh * self.a[:w]).sum(axis=-1)        # receiver term, (B, n)
        s_src = (wh * self.a[w:]).sum(axis=-1)        # sender term
        b, n = wh.shape[0], wh.shape[1]
        logits = (s_dst.reshape(b, n, 1) + s_src.reshape(b, 1, n)).leaky_relu(0.2)
        logits = logits + self.b_edge * adj_weight
        masked = logits * adj_mask + (1.0 - adj_mask) * _NEG_INF
        shift = masked.max(axis=-1, keepdims=True).detach()
        expd = (masked - shift).exp() * adj_mask
        alpha = expd / expd.sum(axis=-1, keepdims=True)
        return (alpha @ wh).elu()


class GraphEncoder(Module):
    """Two stacked attention layers with average+max readouts after each."""

    def __init__(self, n_rois: int, width: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.layers = ModuleList([
            GATLayer(n_rois, width, rng, dtype),
            GATLayer(width, width, rng, dtype),
        ])

    def forward(self, h: Tensor, adj_weight: np.ndarray, adj_mask: np.ndarray) -> Tensor:
        readouts = []
        for layer in self.layers:
            h = layer.forward(h, adj_weight, adj_mask)
            readouts.append(h.mean(axis=1))
            readouts.append(h.max(axis=1))
        return concat(readouts, axis=-1)


class CnnEncoder(Module):
    """Stacked kernel-3 3D convolutions with ReLU and window-2 max pooling,
    closed by global average pooling."""

    def __init__(self, channels: tuple[int, ...], rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        convs = []
        prev = 1
        for ch in channels:
            convs.append(Conv3d(prev, ch, rng, dtype))
            prev = ch
        self.convs = ModuleList(convs)
        self.out_dim = prev

    def forward(self, x: Tensor) -> Tensor:
        from .autodiff import maxpool3d

        for conv in self.convs:
            x = maxpool3d(conv.forward(x).relu())
        return x.mean(axis=(1, 2, 3))  # global average pool, (B, C)


class ProjectionHead(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 eps: float, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(in_dim, out_dim, rng, dtype=dtype)
        self.bn1 = BatchNorm(out_dim, affine=True, eps=eps, dtype=dtype)
        self.fc2 = Linear(out_dim, out_dim, rng, dtype=dtype)
        self.bn2 = BatchNorm(out_dim, affine=False, eps=eps, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = self.bn1.forward(self.fc1.forward(x)).relu()
        return self.bn2.forward(self.fc2.forward(x))


class Predictor(Module):
    """Bottleneck MLP on top of the representation (d -> d/4 -> d by default)."""

    def __init__(self, dim: int, rng: np.random.Generator, hidden: int | None = None,
                 batchnorm: bool = True, eps: float = 1e-3, dtype=np.float32):
        super().__init__()
        hidden = hidden or max(1, dim // 4)
        self.dim, self.hidden = dim, hidden
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.bn = BatchNorm(hidden, affine=True, eps=eps, dtype=dtype) if batchnorm else None
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def forward(self, z: Tensor) -> Tensor:
        x = self.fc1.forward(z)
        if self.bn is not None:
            x = self.bn.forward(x)
        return self.fc2.forward(x.relu())


class TaskHead(Module):
    """Plain MLP head; classification emits one logit per class, regression one scalar."""

    def __init__(self, in_dim: int, kind: str, rng: np.random.Generator,
                 n_classes: int = 2, hidden: tuple[int, ...] | None = None, dtype=np.float32):
        super().__init__()
        if kind not in ("classification", "regression"):
            raise ValueError(f"unknown head kind {kind!r}")
        self.kind = kind
        out_dim = n_classes if kind == "classification" else 1
        hidden = hidden if hidden is not None else (in_dim, in_dim)
        dims = [in_dim, *hidden, out_dim]
        self.layers = ModuleList([
            Linear(dims[i], dims[i + 1], rng, dtype=dtype) for i in range(len(dims) - 1)
        ])

    def forward(self, z: Tensor) -> Tensor:
        x = z
        for i, layer in enumerate(self.layers):
            x = layer.forward(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x


class GraphImageEncoder(Module):
    """Joint encoder f: (graph, volume) -> R^d with ablation toggles.

    A disabled branch contributes a constant zero block (no parameters, no
    gradient); with the projection disabled the representation is the raw
    branch concatenation.
    """

    def __init__(self, config: EncoderConfig, seed=0):
        super().__init__()
        self.config = config.validate()
        rng = np.random.default_rng((*_seed_key(seed), _INIT_TAG))
        dtype = config.np_dtype
        if config.use_gnn:
            self.graph_enc = GraphEncoder(config.n_rois, config.gat_width, rng, dtype)
        else:
            self.graph_enc = None
        if config.use_cnn:
            self.image_enc = CnnEncoder(config.cnn_channels, rng, dtype)
        else:
            self.image_enc = None
        if config.use_projection:
            self.projection = ProjectionHead(
                config.concat_dim, config.embed_dim, rng, eps=config.bn_eps, dtype=dtype
            )
        else:
            self.projection = None

    @property
    def out_dim(self) -> int:
        return self.config.out_dim

    # -- input packing -----------------------------------------------------
    def pack_graphs(self, graphs: list[BrainGraph]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.config.n_rois
        dtype = self.config.np_dtype
        b = len(graphs)
        feats = np.zeros((b, n, n), dtype=dtype)
        adj_w = np.zeros((b, n, n), dtype=dtype)
        adj_m = np.zeros((b, n, n), dtype=dtype)
        eye = np.arange(n)
        for k, g in enumerate(graphs):
            if g.n != n:
                raise ValueError(f"graph has {g.n} nodes, encoder expects {n}")
            feats[k] = g.node_features
            if g.edge_index.size:
                if g.edge_index.max() >= n or g.edge_index.min() < 0:
                    raise ValueError("edge endpoint out of range")
                i, j = g.edge_index[:, 0], g.edge_index[:, 1]
                adj_w[k, i, j] = g.edge_weight
                adj_w[k, j, i] = g.edge_weight
                adj_m[k, i, j] = 1.0
                adj_m[k, j, i] = 1.0
            adj_w[k, eye, eye] = 1.0  # unit self-loops
            adj_m[k, eye, eye] = 1.0
        return feats, adj_w, adj_m

    def pack_images(self, images: list[np.ndarray]) -> np.ndarray:
        """Channels-last (B, D, H, W, 1) batch."""
        dtype = self.config.np_dtype
        shape = tuple(self.config.image_shape)
        arr = np.zeros((len(images),) + shape + (1,), dtype=dtype)
        for k, img in enumerate(images):
            img = np.asarray(img)
            if img.shape != shape:
                raise ValueError(f"image shape {img.shape}, encoder expects {shape}")
            arr[k, ..., 0] = img
        return arr

    # -- forward -------------------------------------------------------------
    def forward_packed(self, graph_inputs, image_input) -> Tensor:
        """graph_inputs: (features, adj_weight, adj_mask) Tensors/arrays or None;
        image_input: channels-last (B, D, H, W, 1) Tensor/array or None."""
        cfg = self.config
        parts = []
        batch = None
        if self.graph_enc is not None:
            feats, adj_w, adj_m = graph_inputs
            feats = as_tensor(feats)
            batch = feats.shape[0]
            parts.append(self.graph_enc.forward(feats, np.asarray(adj_w), np.asarray(adj_m)))
        if self.image_enc is not None:
            x = as_tensor(image_input)
            batch = x.shape[0] if batch is None else batch
            parts.append(self.image_enc.forward(x))
        # a disabled branch contributes constant zeros of its embedding width
        if self.graph_enc is None:
            parts.insert(0, as_tensor(np.zeros((batch, cfg.graph_embed_dim), dtype=cfg.np_dtype)))
        if self.image_enc is None:
            parts.append(as_tensor(np.zeros((batch, cfg.image_embed_dim), dtype=cfg.np_dtype)))
        cat = concat(parts, axis=-1)
        if self.projection is not None:
            return self.projection.forward(cat)
        return cat

    def encode_views(self, views) -> Tensor:
        """Encode a list of objects carrying ``.graph`` and ``.image``."""
        views = list(views)
        graphs = [v.graph for v in views]
        images = [v.image for v in views]
        g_in = self.pack_graphs(graphs) if self.graph_enc is not None else None
        i_in = self.pack_images(images) if self.image_enc is not None else None
        return self.forward_packed(g_in, i_in)


def clone_encoder(encoder: GraphImageEncoder) -> GraphImageEncoder:
    """Independent deep copy (fresh parameters loaded from the source state)."""
    out = GraphImageEncoder(encoder.config, seed=0)
    out.load_state_arrays({k: v.copy() for k, v in encoder.state_arrays().items()})
    out.set_mode(encoder.mode)
    return out


def encode(view, encoder: GraphImageEncoder) -> np.ndarray:
    """Representation of a single view (eval semantics; batch of one)."""
    return encoder.encode_views([view]).data[0]


def build_predictor(config: EncoderConfig, seed=0,
                    hidden: int | None = None, batchnorm: bool = True) -> Predictor:
    rng = np.random.default_rng((*_seed_key(seed), _INIT_TAG, 1))
    return Predictor(config.out_dim, rng, hidden=hidden, batchnorm=batchnorm,
                     eps=config.bn_eps, dtype=config.np_dtype)


def build_task_head(config: EncoderConfig, kind: str, seed=0,
                    n_classes: int = 2, hidden: tuple[int, ...] | None = None) -> TaskHead:
    rng = np.random.default_rng((*_seed_key(seed), _INIT_TAG, 2))
    return TaskHead(config.out_dim, kind, rng, n_classes=n_classes, hidden=hidden,
                    dtype=config.np_dtype)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_NAME = "checkpoint.json"


def _dump_arrays(root: Path, sub: str, state: dict[str, np.ndarray]) -> dict:
    entries = {}
    for name, arr in state.items():
        rel = f"{sub}/{name}.bin"
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(arr.tobytes())  # C-order bytes regardless of layout
        entries[name] = {"file": rel, "shape": list(arr.shape), "dtype": str(arr.dtype)}
    return entries


def _load_arrays(root: Path, entries: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, rec in entries.items():
        path = root / rec["file"]
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint blob missing: {path}")
        arr = np.frombuffer(path.read_bytes(), dtype=np.dtype(rec["dtype"]))
        out[name] = arr.reshape(rec["shape"]).copy()
    return out


def save_checkpoint(out_dir: str | Path, encoder: GraphImageEncoder,
                    predictor: Predictor | None = None,
                    predictor_meta: dict | None = None,
                    seed: int | None = None,
                    meta: dict | None = None) -> Path:
    """Write a checkpoint directory: config snapshot, parameter/buffer blobs
    (native dtype, float32 by default), and arbitrary metadata.  Reloading
    reproduces eval-mode forward passes bit-identically."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "brainpair.checkpoint",
        "version": 1,
        "encoder_config": encoder.config.to_dict(),
        "encoder_state": _dump_arrays(out_dir, "encoder", encoder.state_arrays()),
        "seed": seed,
        "meta": meta or {},
    }
    if predictor is not None:
        manifest["predictor_meta"] = predictor_meta or {
            "hidden": predictor.hidden, "batchnorm": predictor.bn is not None
        }
        manifest["predictor_state"] = _dump_arrays(out_dir, "predictor", predictor.state_arrays())
    path = out_dir / CHECKPOINT_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[GraphImageEncoder, Predictor | None, dict]:
    path = Path(path)
    manifest_path = path / CHECKPOINT_NAME if path.is_dir() else path
    if not manifest_path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {manifest_path}")
    root = manifest_path.parent
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "brainpair.checkpoint":
        raise ValueError(f"not a checkpoint manifest: {manifest_path}")
    config = EncoderConfig.from_dict(manifest["encoder_config"])
    encoder = GraphImageEncoder(config, seed=manifest.get("seed") or 0)
    encoder.load_state_arrays(_load_arrays(root, manifest["encoder_state"]))
    predictor = None
    if "predictor_state" in manifest:
        pm = manifest.get("predictor_meta", {})
        predictor = build_predictor(
            config, seed=manifest.get("seed") or 0,
            hidden=pm.get("hidden"), batchnorm=pm.get("batchnorm", True),
        )
        predictor.load_state_arrays(_load_arrays(root, manifest["predictor_state"]))
    return encoder, predictor, manifest.get("meta", {})
