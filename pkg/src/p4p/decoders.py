"""Task heads over backbone features, plus evaluation metrics.

The classifier pools point tokens with an elementwise max, concatenates
the cls output, and funnels through three linear layers (2C -> C -> C/2
-> K) with normalization, ReLU, and dropout between them. The segmenter
interpolates token features back to every raw point, appends the global
max and cls rows, and funnels the 3C vector the same way. Normalization
flavor is configurable: batch-style with running statistics (default) or
per-row layer norm, which sidesteps batch statistics entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError
from .geometry import farthest_point_sample, three_nn_weights

NORM_KINDS = ("batch", "layer")
GLOBAL_SOURCES = ("backbone", "interpolated")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class HeadConfig:
    dim: int
    n_classes: int
    dropout: float = 0.5
    norm: str = "batch"
    # segmentation-only knobs
    no_globals: bool = False
    global_source: str = "backbone"
    interp_stages: int = 1

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.dim < 4:
            raise ConfigError("head dim must be >= 4")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.norm not in NORM_KINDS:
            raise ConfigError(f"norm must be one of {NORM_KINDS}")
        if self.global_source not in GLOBAL_SOURCES:
            raise ConfigError(f"global_source must be one of {GLOBAL_SOURCES}")
        if self.interp_stages < 1:
            raise ConfigError("interp_stages must be >= 1")


def _init_head(prefix: str, in_width: int, cfg: HeadConfig,
               rng: np.random.Generator, dtype) -> dict[str, Tensor]:
    mid1, mid2 = cfg.dim, cfg.dim // 2
    params: dict[str, Tensor] = {}

    def linear(tag, d_in, d_out):
        bound = 1.0 / np.sqrt(d_in)
        params[f"{prefix}.{tag}.weight"] = ag.param(
            rng.uniform(-bound, bound, size=(d_in, d_out)), dtype=dtype)
        params[f"{prefix}.{tag}.bias"] = ag.param(
            rng.uniform(-bound, bound, size=(d_out,)), dtype=dtype)

    def norm(tag, width):
        params[f"{prefix}.{tag}.weight"] = ag.param(np.ones(width), dtype=dtype)
        params[f"{prefix}.{tag}.bias"] = ag.param(np.zeros(width), dtype=dtype)
        params[f"{prefix}.{tag}.running_mean"] = ag.const(np.zeros(width, dtype=dtype))
        params[f"{prefix}.{tag}.running_var"] = ag.const(np.ones(width, dtype=dtype))

    linear("fc1", in_width, mid1)
    norm("norm1", mid1)
    linear("fc2", mid1, mid2)
    norm("norm2", mid2)
    linear("fc3", mid2, cfg.n_classes)
    return params


def init_classifier_head(cfg: HeadConfig, rng: np.random.Generator,
                         dtype=np.float32) -> dict[str, Tensor]:
    return _init_head("head", 2 * cfg.dim, cfg, rng, dtype)


def init_segmenter_head(cfg: HeadConfig, rng: np.random.Generator,
                        dtype=np.float32) -> dict[str, Tensor]:
    in_width = cfg.dim if cfg.no_globals else 3 * cfg.dim
    return _init_head("seg_head", in_width, cfg, rng, dtype)


def _norm_block(x: Tensor, params, tag: str, cfg: HeadConfig, mode: str) -> Tensor:
    weight, bias = params[f"{tag}.weight"], params[f"{tag}.bias"]
    if cfg.norm == "layer":
        return ag.layer_norm(x, weight, bias, eps=BN_EPS)
    if mode == "train":
        mu = x.mean(axis=0, keepdims=True)
        var = ((x - mu) * (x - mu)).mean(axis=0, keepdims=True)  # biased
        xhat = (x - mu) / ag.sqrt(var + BN_EPS)
        rm, rv = params[f"{tag}.running_mean"], params[f"{tag}.running_var"]
        rm.data = ((1 - BN_MOMENTUM) * rm.data
                   + BN_MOMENTUM * mu.data.reshape(-1).astype(rm.data.dtype))
        rv.data = ((1 - BN_MOMENTUM) * rv.data
                   + BN_MOMENTUM * var.data.reshape(-1).astype(rv.data.dtype))
    else:
        rm = ag.const(params[f"{tag}.running_mean"].data)
        rv = ag.const(params[f"{tag}.running_var"].data)
        xhat = (x - rm) / ag.sqrt(rv + BN_EPS)
    return xhat * weight + bias


def _mlp_head(x: Tensor, params, prefix: str, cfg: HeadConfig, mode: str,
              rng: np.random.Generator | None) -> Tensor:
    if x.data.shape[1] != params[f"{prefix}.fc1.weight"].data.shape[0]:
        raise ShapeError(
            f"head input width {x.data.shape[1]} does not match "
            f"{params[f'{prefix}.fc1.weight'].data.shape[0]}")
    drop = cfg.dropout if mode == "train" else 0.0
    if drop and rng is None:
        raise ConfigError("train-mode dropout needs an rng")
    for tag in ("fc1", "fc2"):
        x = x @ params[f"{prefix}.{tag}.weight"] + params[f"{prefix}.{tag}.bias"]
        x = _norm_block(x, params, f"{prefix}.norm{tag[-1]}", cfg, mode)
        x = ag.relu(x)
        if drop:
            x = ag.dropout(x, drop, rng)
    return x @ params[f"{prefix}.fc3.weight"] + params[f"{prefix}.fc3.bias"]


def classifier_features(features: Tensor) -> Tensor:
    """[elementwise max over point tokens ; cls row] -> (1, 2C)."""
    t = features.data.shape[0]
    if t < 2:
        raise ShapeError("need at least one point token plus cls")
    pooled = features[: t - 1].max(axis=0, keepdims=True)
    return ag.concat([pooled, features[t - 1:]], axis=1)


def classify(features: Tensor, params, cfg: HeadConfig, mode: str = "eval",
             rng: np.random.Generator | None = None) -> Tensor:
    """(N_c+1, C) backbone features -> (1, K) logits for one cloud."""
    return _mlp_head(classifier_features(features), params, "head", cfg, mode, rng)


def classify_batch(feats_2c: Tensor, params, cfg: HeadConfig, mode: str = "eval",
                   rng: np.random.Generator | None = None) -> Tensor:
    """(B, 2C) stacked classifier features -> (B, K) logits.

    The batched entry point exists so batch-style normalization sees the
    whole batch at once during training.
    """
    return _mlp_head(feats_2c, params, "head", cfg, mode, rng)


def _interp_tokens(x: Tensor, source_pos: np.ndarray, target_pos: np.ndarray) -> Tensor:
    idx, w = three_nn_weights(source_pos, target_pos)
    q, c = target_pos.shape[0], x.data.shape[1]
    gathered = ag.take(x, idx.reshape(-1)).reshape((q, 3, c))
    weights = ag.const(w[:, :, None].astype(x.data.dtype))
    return (gathered * weights.expand((q, 3, c))).sum(axis=1)


def interpolate_to_points(x: Tensor, token_pos: np.ndarray, raw_pos: np.ndarray,
                          stages: int = 1) -> Tensor:
    """Token features -> per-raw-point features via staged 3-NN hops.

    With stages > 1, intermediate position sets are FPS subsets of the
    raw cloud with geometrically interpolated sizes, so the feature field
    densifies gradually instead of jumping straight to N points.
    """
    n_c, n = token_pos.shape[0], raw_pos.shape[0]
    pos = token_pos
    for s in range(1, stages + 1):
        if s == stages:
            target = raw_pos
        else:
            size = int(round(n_c * (n / max(n_c, 1)) ** (s / stages)))
            size = min(max(size, 1), n)
            target = raw_pos[farthest_point_sample(raw_pos, size)]
        x = _interp_tokens(x, pos, target)
        pos = target
    return x


def segment(features: Tensor, token_pos: np.ndarray, raw_pos: np.ndarray,
            params, cfg: HeadConfig, mode: str = "eval",
            rng: np.random.Generator | None = None) -> Tensor:
    """(N_c+1, C) backbone features -> (N, K) per-point logits."""
    t = features.data.shape[0]
    if token_pos.shape[0] != t - 1:
        raise ShapeError(f"{t - 1} point tokens but {token_pos.shape[0]} positions")
    tokens, cls_row = features[: t - 1], features[t - 1:]
    per_point = interpolate_to_points(tokens, token_pos, raw_pos, cfg.interp_stages)
    n = raw_pos.shape[0]
    if cfg.no_globals:
        x = per_point
    else:
        source = tokens if cfg.global_source == "backbone" else per_point
        pooled = source.max(axis=0, keepdims=True)
        c = features.data.shape[1]
        x = ag.concat([per_point,
                       pooled.expand((n, c)),
                       cls_row.expand((n, c))], axis=1)
    return _mlp_head(x, params, "seg_head", cfg, mode, rng)


def compute_metrics(pred, truth, n_classes: int, task: str = "cls") -> dict[str, float]:
    """OA / mAcc / mIoU on a 0-100 scale.

    ``pred`` is logits (last axis K, argmaxed here) or integer labels;
    ``task`` is "cls" (per-sample labels) or "seg" (per-point labels) —
    both flatten to the same confusion-matrix computation. mAcc averages
    recall over classes present in the truth; mIoU averages TP/(TP+FP+FN)
    over classes present in either prediction or truth.
    """
    if task not in ("cls", "seg"):
        raise ConfigError(f"task must be cls or seg, got {task!r}")
    pred = np.asarray(pred)
    truth = np.asarray(truth).reshape(-1).astype(np.int64)
    if pred.dtype.kind == "f":
        if pred.shape[-1] != n_classes:
            raise ShapeError(f"logits last axis {pred.shape[-1]} != {n_classes}")
        pred = pred.argmax(axis=-1)
    pred = pred.reshape(-1).astype(np.int64)
    if pred.size == 0:
        raise ValueError("empty prediction")
    if pred.shape != truth.shape:
        raise ShapeError(f"{pred.shape[0]} predictions vs {truth.shape[0]} labels")
    if truth.min() < 0 or truth.max() >= n_classes or pred.min() < 0 or pred.max() >= n_classes:
        raise ValueError("class ids out of range")

    cm = np.bincount(truth * n_classes + pred,
                     minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    tp = np.diag(cm).astype(np.float64)
    support_t = cm.sum(axis=1).astype(np.float64)
    support_p = cm.sum(axis=0).astype(np.float64)

    oa = 100.0 * tp.sum() / cm.sum()
    seen_t = support_t > 0
    macc = 100.0 * float(np.mean(tp[seen_t] / support_t[seen_t]))
    denom = support_t + support_p - tp
    seen_any = denom > 0
    miou = 100.0 * float(np.mean(tp[seen_any] / denom[seen_any]))
    return {"OA": float(oa), "mAcc": macc, "mIoU": miou}
