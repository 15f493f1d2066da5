"""Named finite-difference suites over every differentiable stage.

One place defines what "the gradient checks" are, so the CLI gate and
the test suite exercise identical closures: tokenizer, encoder, both
heads, and the end-to-end training loss.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .backbone import BackboneConfig, backbone_forward, init_backbone
from .decoders import (HeadConfig, classify, init_classifier_head,
                       init_segmenter_head, segment)
from .errors import ConfigError
from .geometry import PointCloud
from .gradcheck import GradCheckResult, check_gradients
from .pipeline import ModelConfig, build_model
from .tokenizer import TokenizerConfig, init_point_tokenizer, tokenize_points
from .training import batch_loss

SUITE_NAMES = ("tokenizer", "backbone", "classifier", "segmenter", "end_to_end")
FD_TOLERANCE = {"f64": 1e-4, "f32": 1e-2}


def _cloud(rng, n=24, c_in=2):
    return PointCloud(positions=rng.normal(size=(n, 3)),
                      features=rng.normal(size=(n, c_in)))


def _suite_tokenizer(seed: int, dtype) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    cloud = _cloud(rng)
    cfg = TokenizerConfig(width=8, c_in=2, k=4, downsample_ratio=4)
    params = init_point_tokenizer(cfg, rng, dtype=dtype)

    def loss():
        out = tokenize_points(cloud, {**params, "cls": ag.const(np.zeros((1, 8)))},
                              cfg).tokens
        return (out * out).sum()

    return check_gradients(loss, params, max_coords=8,
                           rng=np.random.default_rng(seed + 1))


def _suite_backbone(seed: int, dtype) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    cfg = BackboneConfig(depth=2, heads=2, dim=8, pos_mode="mlp")
    state = init_backbone(cfg, rng, dtype=dtype)
    state["cls"] = ag.param(rng.normal(0, 0.02, size=(1, 8)), dtype=dtype)
    cloud = _cloud(rng, n=6, c_in=8)
    from .tokenizer import TokenSet
    tokens = TokenSet(center_pos=cloud.positions,
                      tokens=ag.const(cloud.features.astype(dtype)),
                      cls=state["cls"])

    def loss():
        return backbone_forward(tokens, state, cfg, mode="train").sum()

    return check_gradients(loss, state, max_coords=8,
                           rng=np.random.default_rng(seed + 1))


def _head_features(rng, dtype, dim=8, rows=5):
    return ag.const(rng.normal(size=(rows + 1, dim)).astype(dtype))


def _suite_classifier(seed: int, dtype) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    cfg = HeadConfig(dim=8, n_classes=4, dropout=0.0, norm="layer")
    params = init_classifier_head(cfg, rng, dtype=dtype)
    feats = _head_features(rng, dtype)

    def loss():
        out = classify(feats, params, cfg, mode="train")
        return (out * out).sum()

    return check_gradients(loss, {n: t for n, t in params.items() if t.requires_grad},
                           max_coords=8, rng=np.random.default_rng(seed + 1))


def _suite_segmenter(seed: int, dtype) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    cfg = HeadConfig(dim=8, n_classes=4, dropout=0.0, norm="layer")
    params = init_segmenter_head(cfg, rng, dtype=dtype)
    feats = _head_features(rng, dtype)
    token_pos = rng.normal(size=(5, 3))
    raw_pos = rng.normal(size=(12, 3))

    def loss():
        out = segment(feats, token_pos, raw_pos, params, cfg, mode="train")
        return (out * out).sum()

    return check_gradients(loss, {n: t for n, t in params.items() if t.requires_grad},
                           max_coords=8, rng=np.random.default_rng(seed + 1))


def _suite_end_to_end(seed: int, dtype) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    cloud = PointCloud(positions=rng.normal(size=(32, 3)),
                       features=rng.normal(size=(32, 2)), labels=3)
    cfg = ModelConfig(task="cls", n_classes=8, dim=16, depth=2, heads=2,
                      k=4, downsample_ratio=4, c_in=2, norm="layer",
                      dtype="f64" if dtype == np.float64 else "f32")
    model = build_model(cfg, seed=seed)

    def loss():
        return batch_loss(model, [cloud], 0.1, mode="train")

    return check_gradients(loss, model.trainable(), max_coords=4,
                           rng=np.random.default_rng(seed + 1))


_SUITES = {
    "tokenizer": _suite_tokenizer,
    "backbone": _suite_backbone,
    "classifier": _suite_classifier,
    "segmenter": _suite_segmenter,
    "end_to_end": _suite_end_to_end,
}


def run_gradient_suites(seeds, precision: str = "f64",
                        suites=SUITE_NAMES) -> dict[str, GradCheckResult]:
    """Worst result per suite across all seeds."""
    if precision not in FD_TOLERANCE:
        raise ConfigError(f"precision must be one of {sorted(FD_TOLERANCE)}")
    dtype = np.float64 if precision == "f64" else np.float32
    worst: dict[str, GradCheckResult] = {}
    for name in suites:
        if name not in _SUITES:
            raise ConfigError(f"unknown gradient suite {name!r}")
        for seed in seeds:
            result = _SUITES[name](int(seed), dtype)
            if name not in worst or result.max_rel_error > worst[name].max_rel_error:
                worst[name] = result
    return worst
