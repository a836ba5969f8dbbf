"""Embedding network: conv backbone followed by a part-attention head.

The part head runs K detectors (1×1 conv + sigmoid or spatial softmax)
over the feature map, weights the map with each detected part, average
pools, reduces each part with its own matrix and concatenates. Baseline
heads (stripes, grid cells, external masks, global pooling, one FC layer)
share the backbone so they can be swapped in for comparison.

Images and feature maps are channels-last: (N, H, W, C).
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor

HEADS = ("partnet", "stripe", "grid", "fixed-mask", "pool", "fc")
ATTENTIONS = ("sigmoid", "softmax")




@dataclass
class BackboneConfig:
    input_hw: Tuple[int, int] = (40, 20)
    channels: Tuple[int, ...] = (16, 32, 64)
    strides: Tuple[int, ...] = (1, 2, 2)
    kernel: int = 3
    in_channels: int = 3

    def __post_init__(self):
        self.input_hw = tuple(int(v) for v in self.input_hw)
        self.channels = tuple(int(v) for v in self.channels)
        self.strides = tuple(int(v) for v in self.strides)
        if len(self.channels) != len(self.strides):
            raise ValueError(f"channels {self.channels} and strides {self.strides} differ in length")
        h, w = self.feature_hw
        if h < 1 or w < 1:
            raise ValueError(f"input {self.input_hw} collapses to feature map {h}x{w}")

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @property
    def feature_hw(self) -> Tuple[int, int]:
        h, w = self.input_hw
        for s in self.strides:
            h = (h + 2 * self.padding - self.kernel) // s + 1
            w = (w + 2 * self.padding - self.kernel) // s + 1
        return h, w

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    @property
    def downsample(self) -> int:
        return int(np.prod(self.strides))


@dataclass
class PartNetConfig:
    head: str = "partnet"
    parts: int = 8
    attention: str = "sigmoid"
    width: int = 64
    stripes: int = 5
    grid: int = 5
    eps: float = 1e-12

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; choose from {', '.join(HEADS)}")
        if self.attention not in ATTENTIONS:
            raise ValueError(f"unknown attention {self.attention!r}; choose from {', '.join(ATTENTIONS)}")
        if self.parts < 1 or self.width < 1:
            raise ValueError("parts and width must be >= 1")

    @property
    def num_regions(self) -> int:
        """Number of pooled regions the head concatenates."""
        if self.head == "stripe":
            return self.stripes
        if self.head == "grid":
            return self.grid * self.grid
        if self.head in ("pool", "fc"):
            return 1
        return self.parts

    @property
    def part_dim(self) -> int:
        # nearest integer to width / regions, so widths stay close across heads
        return max(1, int(round(self.width / self.num_regions)))

    @property
    def embedding_dim(self) -> int:
        if self.head in ("pool", "fc"):
            return self.width
        return self.part_dim * self.num_regions


@dataclass
class Model:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: PartNetConfig = field(default_factory=PartNetConfig)
    params: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)

    def config_dict(self) -> dict:
        return {"backbone": asdict(self.backbone), "partnet": asdict(self.head)}


def init_params(backbone: BackboneConfig, head: PartNetConfig,
                rng: np.random.Generator) -> "OrderedDict[str, Tensor]":
    """He-scaled conv filters, near-zero detectors, zero biases."""
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    cin = backbone.in_channels
    k = backbone.kernel
    for i, cout in enumerate(backbone.channels):
        std = np.sqrt(2.0 / (k * k * cin))
        params[f"conv{i}.w"] = Tensor(rng.normal(0.0, std, (k, k, cin, cout)), True, f"conv{i}.w")
        params[f"conv{i}.b"] = Tensor(np.zeros(cout), True, f"conv{i}.b")
        cin = cout
    c = backbone.out_channels
    fh, fw = backbone.feature_hw
    if head.head == "partnet":
        params["detector.w"] = Tensor(rng.normal(0.0, 0.01, (1, 1, c, head.parts)), True, "detector.w")
        params["detector.b"] = Tensor(np.zeros(head.parts), True, "detector.b")
    if head.head in ("partnet", "stripe", "grid", "fixed-mask"):
        r, d = head.num_regions, head.part_dim
        params["reduce.w"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(c), (r, d, c)), True, "reduce.w")
    elif head.head == "pool":
        params["reduce.w"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(c), (head.width, c)), True, "reduce.w")
    elif head.head == "fc":
        n_in = fh * fw * c
        params["reduce.w"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(n_in), (head.width, n_in)), True, "reduce.w")
    return params


def build_model(backbone: Optional[BackboneConfig] = None, head: Optional[PartNetConfig] = None,
                seed: int = 0) -> Model:
    backbone = backbone or BackboneConfig()
    head = head or PartNetConfig()
    return Model(backbone, head, init_params(backbone, head, np.random.default_rng(seed)))


# ---------------------------------------------------------------- forward pieces


def backbone_forward(images, params, cfg: BackboneConfig) -> Tensor:
    images = images if isinstance(images, Tensor) else Tensor(images)
    if images.shape[-3:-1] != cfg.input_hw or images.shape[-1] != cfg.in_channels:
        raise ValueError(f"image extents {images.shape} do not match backbone input "
                         f"{cfg.input_hw + (cfg.in_channels,)}")
    x = images
    for i, s in enumerate(cfg.strides):
        x = nd.conv2d(x, params[f"conv{i}.w"], params[f"conv{i}.b"], stride=s, padding=cfg.padding)
        x = nd.relu(x)
    return x


def detect_part_maps(T: Tensor, params, attention: str = "sigmoid") -> Tensor:
    """All K part maps at once, shape (..., H, W, K)."""
    logits = nd.conv2d(T, params["detector.w"], params["detector.b"])
    if attention == "sigmoid":
        return nd.sigmoid(logits)
    # spatial axes are -3, -2 in the channels-last layout
    return nd.softmax_spatial(logits, axes=(-3, -2))


def detect_part_map(T: Tensor, k: int, params, attention: str = "sigmoid") -> Tensor:
    """Map of part ``k`` alone, shape (..., H, W)."""
    w, b = params["detector.w"], params["detector.b"]
    if not 0 <= k < w.shape[-1]:
        raise IndexError(f"part index {k} out of range for {w.shape[-1]} detectors")
    wk = Tensor(w.data[..., k:k + 1])
    bk = Tensor(b.data[k:k + 1])
    logits = nd.reshape(nd.conv2d(T, wk, bk), T.shape[:-1])
    if attention == "sigmoid":
        return nd.sigmoid(logits)
    return nd.softmax_spatial(logits)


def part_feature(T: Tensor, M: Tensor, Wk: Tensor) -> Tensor:
    """``Wk @ mean_xy(T * M)`` for one part; M has shape (..., H, W)."""
    m = M if isinstance(M, Tensor) else Tensor(M)
    weighted = nd.mul(T, nd.reshape(m, m.shape + (1,)))
    return nd.linear(nd.avgpool_full(weighted), Wk)


def pool_parts(T: Tensor, maps: Tensor, reduce_w: Tensor) -> Tensor:
    """Batched version of :func:`part_feature` over all parts, concatenated.

    T: (N, H, W, C); maps: (N, H, W, K); reduce_w: (K, d, C). Returns (N, K*d).
    """
    n, h, w, _ = T.shape
    pooled = nd.scale(nd.einsum("nhwc,nhwk->nkc", T, maps), 1.0 / (h * w))
    reduced = nd.einsum("nkc,kdc->nkd", pooled, reduce_w)
    k, d = reduce_w.shape[0], reduce_w.shape[1]
    return nd.reshape(reduced, (n, k * d))


def make_baseline_masks(kind: str, h: int, w: int, count: int) -> np.ndarray:
    """Binary partition masks, shape (H, W, count).

    ``stripe`` cuts ``count`` horizontal bands, ``grid`` ``count``×``count``
    cells. Remainder rows/columns go to the earliest cells.
    """
    def bands(extent: int, n: int) -> List[Tuple[int, int]]:
        if n > extent:
            raise ValueError(f"cannot cut {extent} cells into {n} bands")
        base, rem = divmod(extent, n)
        out, start = [], 0
        for i in range(n):
            size = base + (1 if i < rem else 0)
            out.append((start, start + size))
            start += size
        return out

    if kind == "stripe":
        rows = bands(h, count)
        masks = np.zeros((h, w, count))
        for i, (a, b) in enumerate(rows):
            masks[a:b, :, i] = 1.0
        return masks
    if kind == "grid":
        rows, cols = bands(h, count), bands(w, count)
        masks = np.zeros((h, w, count * count))
        for i, (a, b) in enumerate(rows):
            for j, (c, e) in enumerate(cols):
                masks[a:b, c:e, i * count + j] = 1.0
        return masks
    raise ValueError(f"unknown mask kind {kind!r}; choose stripe or grid")


def _l2(x: Tensor, cfg: PartNetConfig) -> Tensor:
    return nd.l2_normalize(x, cfg.eps)


def fixed_mask_head(T: Tensor, masks, params, cfg: PartNetConfig) -> Tensor:
    """Part pooling with externally supplied constant masks (N, H, W, K) or (H, W, K)."""
    m = np.asarray(masks.data if isinstance(masks, Tensor) else masks, dtype=float)
    k = params["reduce.w"].shape[0]
    if m.shape[-1] != k:
        raise ValueError(f"got {m.shape[-1]} masks but the head has {k} parts")
    if m.shape[-3:-1] != T.shape[-3:-1]:
        raise ValueError(f"mask extents {m.shape[-3:-1]} do not match feature map {T.shape[-3:-1]}")
    if m.ndim == 3:
        m = np.broadcast_to(m, T.shape[:1] + m.shape)
    return _l2(pool_parts(T, Tensor(m), params["reduce.w"]), cfg)


def pool_head(T: Tensor, params, cfg: PartNetConfig) -> Tensor:
    return _l2(nd.linear(nd.avgpool_full(T), params["reduce.w"]), cfg)


def fc_head(T: Tensor, params, cfg: PartNetConfig) -> Tensor:
    n = T.shape[0]
    flat = nd.reshape(T, (n, int(np.prod(T.shape[1:]))))
    return _l2(nd.linear(flat, params["reduce.w"]), cfg)


def head_maps(T: Tensor, params, cfg: PartNetConfig, masks=None):
    """Region maps the head pools over: a Tensor for learned maps, array otherwise."""
    h, w = T.shape[-3], T.shape[-2]
    if cfg.head == "partnet":
        return detect_part_maps(T, params, cfg.attention)
    if cfg.head == "stripe":
        return make_baseline_masks("stripe", h, w, cfg.stripes)
    if cfg.head == "grid":
        return make_baseline_masks("grid", h, w, cfg.grid)
    if cfg.head == "fixed-mask":
        if masks is None:
            raise ValueError("fixed-mask head needs external masks")
        return np.asarray(masks, dtype=float)
    return None


def embed(images, model: Model, masks=None) -> Tensor:
    """Unit-norm embeddings, shape (N, D); a single image gives (1, D)."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.data.ndim == 3:
        x = nd.reshape(x, (1,) + x.shape)
    T = backbone_forward(x, model.params, model.backbone)
    return embed_from_features(T, model, masks)


def embed_from_features(T: Tensor, model: Model, masks=None) -> Tensor:
    cfg, params = model.head, model.params
    if cfg.head == "pool":
        return pool_head(T, params, cfg)
    if cfg.head == "fc":
        return fc_head(T, params, cfg)
    maps = head_maps(T, params, cfg, masks)
    if isinstance(maps, Tensor):
        return _l2(pool_parts(T, maps, params["reduce.w"]), cfg)
    return fixed_mask_head(T, maps, params, cfg)


def part_maps(images, model: Model) -> np.ndarray:
    """Learned maps as a plain array (N, H, W, K); partnet head only."""
    if model.head.head != "partnet":
        raise ValueError(f"head {model.head.head!r} has no learned part maps")
    x = Tensor(np.asarray(images, dtype=float))
    if x.data.ndim == 3:
        x = Tensor(x.data[None])
    T = backbone_forward(x, model.params, model.backbone)
    return detect_part_maps(T, model.params, model.head.attention).data


def embed_numpy(images: np.ndarray, model: Model, masks=None, chunk: int = 128) -> np.ndarray:
    """Embeddings without recording a tape, in chunks."""
    images = np.asarray(images, dtype=float)
    out = []
    for s in range(0, len(images), chunk):
        m = None if masks is None else masks[s:s + chunk]
        out.append(embed(images[s:s + chunk], model, m).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.head.embedding_dim))


def check_params(model: Model, params: Dict[str, np.ndarray]) -> List[str]:
    """Names/shape mismatches between ``params`` and what ``model`` expects."""
    expected = init_params(model.backbone, model.head, np.random.default_rng(0))
    problems = []
    for name, t in expected.items():
        if name not in params:
            problems.append(f"missing parameter {name} (expected shape {t.shape})")
        elif tuple(params[name].shape) != t.shape:
            problems.append(f"{name}: checkpoint shape {tuple(params[name].shape)}, model expects {t.shape}")
    for name in params:
        if name not in expected:
            problems.append(f"unexpected parameter {name}")
    return problems
