"""Modality-agnostic pre-norm Transformer encoder.

The encoder sees only a TokenSet: it never knows whether tokens came
from point neighborhoods or image patches. Point runs add a coordinate
MLP positional embedding; image runs use a learned per-patch table; both
can be disabled. The cls token always sits at the END of the sequence
(index N_c), matching the canonical checkpoint layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, NanActivationError, ShapeError
from .tokenizer import TokenSet

POS_MODES = ("mlp", "table", "none")


@dataclass
class BackboneConfig:
    depth: int
    heads: int
    dim: int
    mlp_ratio: float = 4.0
    dropout: float = 0.0
    prenorm: bool = True
    pos_mode: str = "mlp"

    def __post_init__(self):
        if self.depth < 0 or self.heads < 1 or self.dim < 1:
            raise ConfigError("depth >= 0, heads >= 1, dim >= 1 required")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.pos_mode not in POS_MODES:
            raise ConfigError(f"pos_mode must be one of {POS_MODES}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return int(self.dim * self.mlp_ratio)


def vit_s(**overrides) -> BackboneConfig:
    """The 12-layer, 6-head, 384-wide configuration."""
    base = dict(depth=12, heads=6, dim=384)
    base.update(overrides)
    return BackboneConfig(**base)


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator,
                  dtype=np.float32, n_pos_tokens: int | None = None) -> dict[str, Tensor]:
    """Named state tensors: blocks.<i>.<leaf>, final norm, pos embedding.

    ``n_pos_tokens`` (token count excluding cls) is required for the
    table positional mode, where `pos_embed` has one row per token plus
    a final row for cls.
    """
    def linear(d_in, d_out):
        bound = 1.0 / np.sqrt(d_in)
        w = ag.param(rng.uniform(-bound, bound, size=(d_in, d_out)), dtype=dtype)
        b = ag.param(rng.uniform(-bound, bound, size=(d_out,)), dtype=dtype)
        return w, b

    state: dict[str, Tensor] = {}
    for i in range(cfg.depth):
        p = f"blocks.{i}"
        state[f"{p}.norm1.weight"] = ag.param(np.ones(cfg.dim), dtype=dtype)
        state[f"{p}.norm1.bias"] = ag.param(np.zeros(cfg.dim), dtype=dtype)
        state[f"{p}.attn.qkv.weight"], state[f"{p}.attn.qkv.bias"] = linear(cfg.dim, 3 * cfg.dim)
        state[f"{p}.attn.proj.weight"], state[f"{p}.attn.proj.bias"] = linear(cfg.dim, cfg.dim)
        state[f"{p}.norm2.weight"] = ag.param(np.ones(cfg.dim), dtype=dtype)
        state[f"{p}.norm2.bias"] = ag.param(np.zeros(cfg.dim), dtype=dtype)
        state[f"{p}.mlp.fc1.weight"], state[f"{p}.mlp.fc1.bias"] = linear(cfg.dim, cfg.mlp_hidden)
        state[f"{p}.mlp.fc2.weight"], state[f"{p}.mlp.fc2.bias"] = linear(cfg.mlp_hidden, cfg.dim)
    state["norm.weight"] = ag.param(np.ones(cfg.dim), dtype=dtype)
    state["norm.bias"] = ag.param(np.zeros(cfg.dim), dtype=dtype)

    if cfg.pos_mode == "mlp":
        hidden = cfg.dim
        state["pos.fc1.weight"], state["pos.fc1.bias"] = linear(3, hidden)
        state["pos.fc2.weight"], state["pos.fc2.bias"] = linear(hidden, cfg.dim)
        state["pos.cls"] = ag.param(rng.normal(0.0, 0.02, size=(1, cfg.dim)), dtype=dtype)
    elif cfg.pos_mode == "table":
        if n_pos_tokens is None:
            raise ConfigError("table positional mode needs n_pos_tokens")
        state["pos_embed"] = ag.param(
            rng.normal(0.0, 0.02, size=(n_pos_tokens + 1, cfg.dim)), dtype=dtype)
    return state


def _check_finite(x: Tensor, stage: str) -> None:
    if np.isnan(x.data).any():
        raise NanActivationError(f"NaN activation after {stage}")


def positional_embedding(tokens: TokenSet, state: Mapping[str, Tensor],
                         cfg: BackboneConfig) -> Tensor | None:
    """(N_c+1, C) positional rows (cls row last), or None when disabled."""
    if cfg.pos_mode == "none":
        return None
    if cfg.pos_mode == "table":
        pe = state["pos_embed"]
        if pe.data.shape[0] != tokens.n_tokens + 1:
            raise ShapeError(
                f"pos_embed has {pe.data.shape[0]} rows, sequence needs "
                f"{tokens.n_tokens + 1}")
        return pe
    coords = ag.const(tokens.center_pos.astype(state["pos.fc1.weight"].data.dtype))
    h = ag.gelu(coords @ state["pos.fc1.weight"] + state["pos.fc1.bias"])
    pe = h @ state["pos.fc2.weight"] + state["pos.fc2.bias"]
    return ag.concat([pe, state["pos.cls"]], axis=0)


def backbone_forward(tokens: TokenSet, state: Mapping[str, Tensor],
                     cfg: BackboneConfig, mode: str = "eval",
                     rng: np.random.Generator | None = None,
                     collect_attention: list | None = None) -> Tensor:
    """Encode (tokens ++ cls) through depth pre-norm blocks + final LN.

    Returns (N_c+1, C) features, cls features in the last row. Pass a
    list as ``collect_attention`` to receive each block's (heads, T, T)
    softmax rows (detached).
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be train or eval, got {mode!r}")
    if tokens.width != cfg.dim:
        raise ShapeError(f"token width {tokens.width} != backbone dim {cfg.dim}")
    drop = cfg.dropout if mode == "train" else 0.0
    if drop and rng is None:
        raise ConfigError("train-mode dropout needs an rng")

    x = ag.concat([tokens.tokens, tokens.cls], axis=0)
    pe = positional_embedding(tokens, state, cfg)
    if pe is not None:
        x = x + pe
        _check_finite(x, "pos")

    t = x.data.shape[0]
    scale = 1.0 / np.sqrt(cfg.head_dim)
    for i in range(cfg.depth):
        p = f"blocks.{i}"
        h = ag.layer_norm(x, state[f"{p}.norm1.weight"], state[f"{p}.norm1.bias"]) \
            if cfg.prenorm else x
        qkv = h @ state[f"{p}.attn.qkv.weight"] + state[f"{p}.attn.qkv.bias"]
        q = qkv[:, :cfg.dim].reshape(t, cfg.heads, cfg.head_dim).swapaxes(0, 1)
        k = qkv[:, cfg.dim:2 * cfg.dim].reshape(t, cfg.heads, cfg.head_dim).swapaxes(0, 1)
        v = qkv[:, 2 * cfg.dim:].reshape(t, cfg.heads, cfg.head_dim).swapaxes(0, 1)
        attn = ag.softmax((q @ k.swapaxes(1, 2)) * scale, axis=-1)
        if collect_attention is not None:
            collect_attention.append(attn.data.copy())
        if drop:
            attn = ag.dropout(attn, drop, rng)
        out = (attn @ v).swapaxes(0, 1).reshape(t, cfg.dim)
        out = out @ state[f"{p}.attn.proj.weight"] + state[f"{p}.attn.proj.bias"]
        if drop:
            out = ag.dropout(out, drop, rng)
        x = x + out
        if not cfg.prenorm:
            x = ag.layer_norm(x, state[f"{p}.norm1.weight"], state[f"{p}.norm1.bias"])
        _check_finite(x, f"{p}.attn")

        h = ag.layer_norm(x, state[f"{p}.norm2.weight"], state[f"{p}.norm2.bias"]) \
            if cfg.prenorm else x
        m = ag.gelu(h @ state[f"{p}.mlp.fc1.weight"] + state[f"{p}.mlp.fc1.bias"])
        if drop:
            m = ag.dropout(m, drop, rng)
        m = m @ state[f"{p}.mlp.fc2.weight"] + state[f"{p}.mlp.fc2.bias"]
        if drop:
            m = ag.dropout(m, drop, rng)
        x = x + m
        if not cfg.prenorm:
            x = ag.layer_norm(x, state[f"{p}.norm2.weight"], state[f"{p}.norm2.bias"])
        _check_finite(x, f"{p}.mlp")

    x = ag.layer_norm(x, state["norm.weight"], state["norm.bias"])
    _check_finite(x, "norm")
    return x


def attention_rollout_shapes(cfg: BackboneConfig, n_tokens: int) -> list[dict]:
    """Expected per-block tensor shapes for a sequence of n_tokens + cls."""
    t = n_tokens + 1
    return [{
        "block": i,
        "activation": (t, cfg.dim),
        "qkv_weight": (cfg.dim, 3 * cfg.dim),
        "attention": (cfg.heads, t, t),
        "mlp_hidden": (t, cfg.mlp_hidden),
    } for i in range(cfg.depth)]
