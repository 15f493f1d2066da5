"""Tokenizers mapping raw modality inputs into a common token space.

Point clouds pass through a graph-convolution stage (or several): FPS
picks centers, kNN gathers neighborhoods, and per edge (i, j)

    e_ij = gelu(h1([p_j - p_i ; x_j - x_i]))
    token_i = max_j h2([e_ij ; max_j' e_ij'])

Images pass through a flattening linear patch projection. Both emit a
TokenSet of width C, the backbone embedding width, plus one cls token.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError
from .geometry import NeighborIndex, PointCloud, farthest_point_sample, knn_for_centers

INPUT_MODES = ("relative", "abs_pos", "abs_feat")


@dataclass
class TokenSet:
    """N_c tokens plus cls; the backbone's universal input.

    center_pos rows are real 3D coordinates for point tokens and
    (row, col, 0) grid coordinates for image patches.
    """

    center_pos: np.ndarray
    tokens: Tensor
    cls: Tensor

    def __post_init__(self):
        n_c, width = self.tokens.data.shape
        if n_c < 1:
            raise ShapeError("TokenSet needs at least one token")
        if self.center_pos.shape != (n_c, 3):
            raise ShapeError(
                f"center_pos {self.center_pos.shape} does not match {n_c} tokens")
        if self.cls.data.shape != (1, width):
            raise ShapeError(
                f"cls shape {self.cls.data.shape}, expected (1, {width})")
        if not (np.all(np.isfinite(self.tokens.data))
                and np.all(np.isfinite(self.center_pos))):
            raise ValueError("TokenSet contains non-finite values")

    @property
    def n_tokens(self) -> int:
        return self.tokens.data.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.data.shape[1]


@dataclass
class TokenizerConfig:
    """Point tokenizer settings.

    ``downsample_ratio`` is the total reduction across all stages; with
    several stages it is split as evenly as possible (round(R^(1/s)) per
    stage, remainder folded into the last). ``hidden`` defaults to
    width // 2 so the concat entering h2 has width = 2*hidden = width.
    """

    width: int
    c_in: int = 0
    k: int = 16
    downsample_ratio: int = 16
    input_mode: str = "relative"
    n_stages: int = 1
    hidden: int | None = None

    def __post_init__(self):
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"input_mode must be one of {INPUT_MODES}")
        if self.width < 2 or self.k < 1 or self.downsample_ratio < 1 or self.n_stages < 1:
            raise ConfigError("width >= 2, k >= 1, ratio >= 1, n_stages >= 1 required")
        if self.hidden is None:
            self.hidden = self.width // 2

    def stage_ratios(self) -> list[int]:
        if self.n_stages == 1:
            return [self.downsample_ratio]
        r = max(1, round(self.downsample_ratio ** (1.0 / self.n_stages)))
        head = [r] * (self.n_stages - 1)
        last = max(1, self.downsample_ratio // (r ** (self.n_stages - 1)))
        return head + [last]


def init_point_tokenizer(cfg: TokenizerConfig, rng: np.random.Generator,
                         dtype=np.float32) -> dict[str, Tensor]:
    """Uniform(-1/sqrt(fan_in), +) init for each stage's h1/h2 pair."""
    params: dict[str, Tensor] = {}
    c_in = cfg.c_in
    for j in range(cfg.n_stages):
        d_in = 3 + c_in
        for leaf, shape in ((f"point_tokenizer.s{j}.h1.weight", (d_in, cfg.hidden)),
                            (f"point_tokenizer.s{j}.h1.bias", (cfg.hidden,)),
                            (f"point_tokenizer.s{j}.h2.weight", (2 * cfg.hidden, cfg.width)),
                            (f"point_tokenizer.s{j}.h2.bias", (cfg.width,))):
            bound = 1.0 / np.sqrt(shape[0] if len(shape) == 2 else d_in)
            params[leaf] = ag.param(rng.uniform(-bound, bound, size=shape), dtype=dtype)
        c_in = cfg.width  # later stages consume the previous stage's tokens
    return params


def init_image_tokenizer(patch: int, c_img: int, width: int,
                         rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    d_in = patch * patch * c_img
    bound = 1.0 / np.sqrt(d_in)
    return {
        "patch_embed.weight": ag.param(rng.uniform(-bound, bound, size=(d_in, width)), dtype=dtype),
        "patch_embed.bias": ag.param(rng.uniform(-bound, bound, size=(width,)), dtype=dtype),
    }


def init_cls(width: int, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    return ag.param(rng.normal(0.0, 0.02, size=(1, width)), dtype=dtype)


def graph_conv(positions: np.ndarray, features: Tensor | None,
               neighbors: NeighborIndex, w1: Tensor, b1: Tensor,
               w2: Tensor, b2: Tensor, input_mode: str = "relative") -> Tensor:
    """One graph-convolution stage over fixed centers and neighbor sets.

    Returns (N_c, C) tokens. Exposed separately so neighborhood
    permutation invariance can be tested with hand-built NeighborIndex.
    """
    center_ids = neighbors.center_ids
    nb = neighbors.neighbor_ids
    n_c, k = nb.shape
    dtype = w1.data.dtype

    gathered = positions[nb]  # (N_c, k, 3)
    if input_mode == "abs_pos":
        pos_in = gathered
    else:
        pos_in = gathered - positions[center_ids][:, None, :]
    parts = [ag.const(pos_in, dtype=dtype)]

    if features is not None:
        c_in = features.data.shape[1]
        nb_feat = ag.take(features, nb.reshape(-1)).reshape((n_c, k, c_in))
        if input_mode == "abs_feat":
            parts.append(nb_feat)
        else:
            ctr_feat = ag.take(features, center_ids).reshape((n_c, 1, c_in))
            parts.append(nb_feat - ctr_feat.expand((n_c, k, c_in)))

    h = parts[0] if len(parts) == 1 else ag.concat(parts, axis=2)
    if h.data.shape[2] != w1.data.shape[0]:
        raise ShapeError(
            f"edge input width {h.data.shape[2]} does not match h1 input "
            f"width {w1.data.shape[0]}")
    e = ag.gelu(h @ w1 + b1)  # (N_c, k, hidden)
    pooled = e.max(axis=1, keepdims=True).expand(e.data.shape)
    t = ag.concat([e, pooled], axis=2) @ w2 + b2  # (N_c, k, C)
    return t.max(axis=1)


def tokenize_points(cloud: PointCloud, params: Mapping[str, Tensor],
                    cfg: TokenizerConfig, start: int = 0,
                    features: Tensor | None = None) -> TokenSet:
    """Graph-convolution tokenizer: FPS centers, kNN edges, Eq-style conv.

    ``features`` overrides cloud.features with a differentiable tensor
    (same row count) so gradients can flow into the inputs.
    """
    positions = cloud.positions.astype(np.float64)
    if features is None and cloud.features is not None:
        features = ag.const(cloud.features)
    if features is not None and features.data.shape[0] != cloud.n:
        raise ShapeError("feature rows do not match point count")

    feat = features
    for j, ratio in enumerate(cfg.stage_ratios()):
        n = positions.shape[0]
        n_c = max(1, n // ratio)
        center_ids = farthest_point_sample(positions, n_c, start=start if j == 0 else 0)
        nb = knn_for_centers(PointCloud(positions=positions), center_ids, cfg.k)
        feat = graph_conv(positions, feat, nb,
                          params[f"point_tokenizer.s{j}.h1.weight"],
                          params[f"point_tokenizer.s{j}.h1.bias"],
                          params[f"point_tokenizer.s{j}.h2.weight"],
                          params[f"point_tokenizer.s{j}.h2.bias"],
                          input_mode=cfg.input_mode)
        positions = positions[center_ids]

    return TokenSet(center_pos=positions, tokens=feat, cls=params["cls"])


def tokenize_image(image: np.ndarray | Tensor, params: Mapping[str, Tensor],
                   patch: int) -> TokenSet:
    """Non-overlapping patch projection; center_pos = (row, col, 0) grid."""
    img = image if isinstance(image, Tensor) else ag.const(np.asarray(image))
    if img.data.ndim != 3:
        raise ShapeError(f"image must be (H, W, C_img), got {img.data.shape}")
    h, w, c_img = img.data.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch

    grid = img.reshape((gh, patch, gw, patch, c_img)).swapaxes(1, 2)
    flat = grid.reshape((gh * gw, patch * patch * c_img))
    weight = params["patch_embed.weight"]
    if flat.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(
            f"patch width {flat.data.shape[1]} does not match projection "
            f"input {weight.data.shape[0]}")
    if flat.data.dtype != weight.data.dtype:
        flat = ag.cast(flat, weight.data.dtype)
    tokens = flat @ weight + params["patch_embed.bias"]

    rows, cols = np.divmod(np.arange(gh * gw), gw)
    center_pos = np.stack([rows, cols, np.zeros_like(rows)], axis=1).astype(np.float64)
    return TokenSet(center_pos=center_pos, tokens=tokens, cls=params["cls"])
