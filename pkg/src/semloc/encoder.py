"""Two-stream KNN-graph feature extractor for 2D and 3D semantic elements.

Each stream stacks residual blocks over a static KNN graph built once on the
raw concatenated inputs [coordinates, direction, one-hot]. A block gathers
each anchor's k neighbors, forms edge features concat(h_i, h_j - h_i), runs a
two-layer MLP per edge, average-pools over the edges and adds the result back
to the anchor (linear shortcut on the first block, identity afterwards). A
final linear projection yields the embedding.

Forward/backward run in float64 torch; weights are held as plain tensors so
the training loop can hand them straight to an optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DomainError

STREAMS = ("2d", "3d")


@dataclass(frozen=True)
class EncoderConfig:
    n_classes: int = 4
    dim: int = 128
    blocks: int = 12
    k: int = 4
    # "static": KNN built once on raw inputs and reused by every block;
    # "dynamic": rebuilt per block on the current features.
    graph_mode: str = "static"

    def __post_init__(self):
        if self.n_classes < 1 or self.dim < 1 or self.blocks < 1 or self.k < 1:
            raise ConfigError("encoder config values must be positive")
        if self.graph_mode not in ("static", "dynamic"):
            raise ConfigError("graph_mode must be 'static' or 'dynamic'")

    @property
    def input_dim(self) -> int:
        return 6 + self.n_classes


def _tensor_specs(cfg: EncoderConfig):
    """Ordered (name, shape, fan_in) triples for one stream."""
    specs = []
    w_in = cfg.input_dim
    for b in range(cfg.blocks):
        specs.append((f"block{b}/w1", (2 * w_in, cfg.dim), 2 * w_in))
        specs.append((f"block{b}/b1", (cfg.dim,), 2 * w_in))
        specs.append((f"block{b}/w2", (cfg.dim, cfg.dim), cfg.dim))
        specs.append((f"block{b}/b2", (cfg.dim,), cfg.dim))
        if b == 0:
            specs.append((f"block{b}/w_sc", (w_in, cfg.dim), w_in))
        w_in = cfg.dim
    specs.append(("proj_w", (cfg.dim, cfg.dim), cfg.dim))
    specs.append(("proj_b", (cfg.dim,), cfg.dim))
    return specs


@dataclass
class EncoderWeights:
    """All parameters of both streams, keyed '<stream>/<tensor>'."""

    config: EncoderConfig
    tensors: dict[str, torch.Tensor]

    def stream_tensors(self, stream: str) -> dict[str, torch.Tensor]:
        prefix = stream + "/"
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def clone(self, requires_grad: bool = False) -> "EncoderWeights":
        out = {k: v.detach().clone() for k, v in self.tensors.items()}
        for v in out.values():
            v.requires_grad_(requires_grad)
        return EncoderWeights(self.config, out)

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self.tensors.items()}


def init_weights(cfg: EncoderConfig, seed: int = 0) -> EncoderWeights:
    """Seeded uniform +-1/sqrt(fan_in) initialization of both streams."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, torch.Tensor] = {}
    for stream in STREAMS:
        for name, shape, fan_in in _tensor_specs(cfg):
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
            tensors[f"{stream}/{name}"] = torch.tensor(arr, dtype=torch.float64)
    return EncoderWeights(cfg, tensors)


def build_input(element, origin=None) -> np.ndarray:
    """Concatenate [coordinates (3), direction (3), one-hot (C)].

    2D elements use their unit bearing as coordinates; 3D elements use their
    map position, centered on ``origin`` when given (submap centering keeps
    magnitudes bounded by the crop radius).
    """
    if hasattr(element, "bearing"):
        coords = element.bearing.vec
    else:
        coords = element.point
        if origin is not None:
            coords = coords - np.asarray(origin, dtype=float).reshape(3)
    return np.concatenate([coords, element.direction, element.semantic])


def input_matrix(elements, origin=None) -> np.ndarray:
    if len(elements) == 0:
        raise DomainError("cannot encode an empty element collection")
    return np.stack([build_input(e, origin) for e in elements])


def knn_graph(inputs: np.ndarray, k: int) -> np.ndarray:
    """Indices of each row's k nearest neighbors (self excluded).

    Ties break deterministically toward the lower index. When fewer than k
    neighbors exist the nearest one is repeated; a single-element collection
    falls back to a self-loop (its edge features are all zero).
    """
    x = np.asarray(inputs, dtype=float)
    n = x.shape[0]
    if n == 1:
        return np.zeros((1, k), dtype=np.int64)
    d2 = ((x[:, None] - x[None]) ** 2).sum(axis=-1)
    np.fill_diagonal(d2, np.inf)
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        order = np.argsort(d2[i], kind="stable")[: min(k, n - 1)]
        if len(order) < k:
            order = np.concatenate([order, np.full(k - len(order), order[0])])
        out[i] = order
    return out


@dataclass(frozen=True)
class EmbeddingSet:
    """Per-element embeddings (rows) plus the matching semantic class ids."""

    vectors: np.ndarray
    class_ids: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.vectors).all():
            raise DomainError("embeddings must be finite")
        if len(self.vectors) != len(self.class_ids):
            raise DomainError("one class id per embedding row required")

    def __len__(self) -> int:
        return len(self.vectors)


def forward_stream(
    x: torch.Tensor, idx: np.ndarray, stream_tensors: dict[str, torch.Tensor], cfg: EncoderConfig
) -> torch.Tensor:
    """Differentiable forward pass of one stream; KNN indices are constants."""
    n = x.shape[0]
    idx_t = torch.as_tensor(idx, dtype=torch.long)
    h = x
    for b in range(cfg.blocks):
        if cfg.graph_mode == "dynamic" and b > 0:
            idx_t = torch.as_tensor(knn_graph(h.detach().numpy(), cfg.k), dtype=torch.long)
        hj = h[idx_t]                              # (n, k, w)
        hi = h.unsqueeze(1).expand(n, idx_t.shape[1], h.shape[1])
        edge = torch.cat([hi, hj - hi], dim=-1)    # (n, k, 2w)
        e = F.elu(edge @ stream_tensors[f"block{b}/w1"] + stream_tensors[f"block{b}/b1"])
        e = F.elu(e @ stream_tensors[f"block{b}/w2"] + stream_tensors[f"block{b}/b2"])
        pooled = e.mean(dim=1)
        if b == 0:
            h = h @ stream_tensors["block0/w_sc"] + pooled
        else:
            h = h + pooled
    return h @ stream_tensors["proj_w"] + stream_tensors["proj_b"]


def _check_compat(weights: EncoderWeights, inputs: np.ndarray) -> None:
    if inputs.shape[1] != weights.config.input_dim:
        raise ConfigError(
            f"input length {inputs.shape[1]} incompatible with encoder configured "
            f"for {weights.config.n_classes} classes"
        )


def encode(elements, weights: EncoderWeights, stream: str, origin=None) -> EmbeddingSet:
    """Embed a collection of elements with the given stream's parameters."""
    if stream not in STREAMS:
        raise ConfigError(f"stream must be one of {STREAMS}")
    inputs = input_matrix(elements, origin)
    _check_compat(weights, inputs)
    idx = knn_graph(inputs, weights.config.k)
    with torch.no_grad():
        z = forward_stream(
            torch.tensor(inputs, dtype=torch.float64), idx, weights.stream_tensors(stream), weights.config
        )
    class_ids = np.array([e.class_id for e in elements])
    return EmbeddingSet(z.numpy(), class_ids)


def cost_matrix(zf: EmbeddingSet, zp: EmbeddingSet) -> np.ndarray:
    """Exact pairwise L2 distances between the two embedding sets."""
    a, b = zf.vectors, zp.vectors
    if a.shape[1] != b.shape[1]:
        raise DomainError("embedding dimensions must match")
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return np.sqrt(np.maximum(d2, 0.0))


def cost_matrix_torch(za: torch.Tensor, zb: torch.Tensor) -> torch.Tensor:
    """Differentiable pairwise L2 with a zero (not NaN) gradient at zero."""
    d2 = ((za.unsqueeze(1) - zb.unsqueeze(0)) ** 2).sum(dim=-1)
    positive = d2 > 0
    safe = torch.where(positive, d2, torch.ones_like(d2))
    return torch.where(positive, torch.sqrt(safe), torch.zeros_like(d2))


def encode_backward(
    elements, weights: EncoderWeights, upstream: np.ndarray, stream: str, origin=None
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Reverse-mode gradients of :func:`encode` w.r.t. weights and inputs.

    KNN indices are treated as constants. Returns (weight gradients keyed like
    the stream's tensors, gradient on the input matrix).
    """
    inputs = input_matrix(elements, origin)
    _check_compat(weights, inputs)
    idx = knn_graph(inputs, weights.config.k)
    x = torch.tensor(inputs, dtype=torch.float64, requires_grad=True)
    stream_tensors = {
        k: v.detach().clone().requires_grad_(True) for k, v in weights.stream_tensors(stream).items()
    }
    z = forward_stream(x, idx, stream_tensors, weights.config)
    up = torch.as_tensor(np.asarray(upstream, dtype=float))
    if up.shape != z.shape:
        raise DomainError("upstream gradient shape must match the embeddings")
    names = list(stream_tensors)
    grads = torch.autograd.grad(z, [x] + [stream_tensors[n] for n in names], grad_outputs=up)
    weight_grads = {n: g.numpy() for n, g in zip(names, grads[1:])}
    return weight_grads, grads[0].numpy()
