"""Model assembly: tokenizer + encoder + task head over one flat
parameter namespace, with state install/freeze helpers.

The same encoder weights serve both modalities; only the tokenizer in
front and the head behind differ, which is what makes checkpoint
transfer across modalities a pure name-and-shape match.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .backbone import BackboneConfig, backbone_forward, init_backbone
from .decoders import (HeadConfig, classifier_features, classify_batch,
                       init_classifier_head, init_segmenter_head, segment)
from .errors import ConfigError, IncompatibleCheckpointError, ShapeError
from .geometry import PointCloud
from .tokenizer import (TokenizerConfig, init_cls, init_image_tokenizer,
                        init_point_tokenizer, tokenize_image, tokenize_points)
from .transfer import BACKBONE_LEAVES, BACKBONE_PREFIXES

_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to rebuild a model from a checkpoint's meta."""

    task: str = "cls"            # cls | seg
    modality: str = "points"     # points | image
    n_classes: int = 8
    dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    dropout: float = 0.0
    prenorm: bool = True
    pos_mode: str = "mlp"
    n_tokens: int | None = None  # table positional mode only
    # point tokenizer
    k: int = 8
    downsample_ratio: int = 4
    n_stages: int = 1
    input_mode: str = "relative"
    c_in: int = 0
    # image tokenizer
    patch: int = 4
    img_size: int = 16
    img_channels: int = 1
    # head
    head_dropout: float = 0.0
    norm: str = "batch"
    no_globals: bool = False
    global_source: str = "backbone"
    interp_stages: int = 1
    dtype: str = "f32"

    def __post_init__(self):
        if self.task not in ("cls", "seg"):
            raise ConfigError(f"task must be cls or seg, got {self.task!r}")
        if self.modality not in ("points", "image"):
            raise ConfigError(f"modality must be points or image, got {self.modality!r}")
        if self.task == "seg" and self.modality == "image":
            raise ConfigError("segmentation is defined for point clouds only")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.modality == "image" and self.img_size % self.patch:
            raise ConfigError(f"img_size {self.img_size} not divisible by patch {self.patch}")
        # sub-configs run their own range checks
        self.backbone_config()
        self.head_config()
        if self.modality == "points":
            self.tokenizer_config()

    def tokenizer_config(self) -> TokenizerConfig:
        return TokenizerConfig(width=self.dim, c_in=self.c_in, k=self.k,
                               downsample_ratio=self.downsample_ratio,
                               input_mode=self.input_mode, n_stages=self.n_stages)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(depth=self.depth, heads=self.heads, dim=self.dim,
                              mlp_ratio=self.mlp_ratio, dropout=self.dropout,
                              prenorm=self.prenorm, pos_mode=self.pos_mode)

    def head_config(self) -> HeadConfig:
        return HeadConfig(dim=self.dim, n_classes=self.n_classes,
                          dropout=self.head_dropout, norm=self.norm,
                          no_globals=self.no_globals,
                          global_source=self.global_source,
                          interp_stages=self.interp_stages)

    def to_dict(self) -> dict:
        return asdict(self)


def make_model_config(**kw) -> ModelConfig:
    """ModelConfig with unknown keys reported as config errors."""
    try:
        return ModelConfig(**kw)
    except TypeError as exc:
        raise ConfigError(f"bad model config: {exc}") from None


class Model:
    """One task network: config plus a flat name -> Tensor state dict."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self._bb = cfg.backbone_config()
        self._head = cfg.head_config()
        self._tok = cfg.tokenizer_config() if cfg.modality == "points" else None
        # last_* hold the most recent forward's outputs for metric logging
        self.last_logits: list[Tensor] = []
        self.last_truth: list = []

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.params.items() if t.requires_grad}

    def freeze_backbone(self) -> int:
        """requires_grad = False on encoder tensors (and cls); returns count."""
        frozen = 0
        for name, t in self.params.items():
            if (name.startswith(BACKBONE_PREFIXES) or name in BACKBONE_LEAVES
                    or name == "cls"):
                t.requires_grad = False
                frozen += 1
        return frozen

    def _encode_cloud(self, cloud: PointCloud, mode: str, rng):
        tokens = tokenize_points(cloud, self.params, self._tok)
        feats = backbone_forward(tokens, self.params, self._bb, mode=mode, rng=rng)
        return tokens, feats

    def logits_batch(self, batch: Sequence, mode: str = "eval",
                     rng: np.random.Generator | None = None):
        """Forward one minibatch.

        Returns (logit tensors, truths): classification yields a single
        stacked (B, K) tensor so batch-style normalization sees the whole
        batch, segmentation one (N, K) tensor per cloud (its rows are the
        normalization batch).
        """
        if not batch:
            raise ShapeError("empty batch")
        if self.cfg.task == "seg":
            logits, truths = [], []
            for cloud in batch:
                tokens, feats = self._encode_cloud(cloud, mode, rng)
                logits.append(segment(feats, tokens.center_pos, cloud.positions,
                                      self.params, self._head, mode, rng))
                truths.append(cloud.labels)
        else:
            rows, labels = [], []
            for sample in batch:
                if self.cfg.modality == "image":
                    image, label = sample
                    tokens = tokenize_image(image, self.params, self.cfg.patch)
                    feats = backbone_forward(tokens, self.params, self._bb,
                                             mode=mode, rng=rng)
                else:
                    _, feats = self._encode_cloud(sample, mode, rng)
                    label = sample.labels
                rows.append(classifier_features(feats))
                labels.append(int(label))
            stacked = rows[0] if len(rows) == 1 else ag.concat(rows, axis=0)
            logits = [classify_batch(stacked, self.params, self._head, mode, rng)]
            truths = [np.asarray(labels, dtype=np.int64)]
        self.last_logits, self.last_truth = logits, truths
        return logits, truths

    def predict(self, sample, mode: str = "eval") -> np.ndarray:
        logits, _ = self.logits_batch([sample], mode=mode)
        return np.argmax(logits[0].data, axis=-1)


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Initialize all named tensors with one seeded generator.

    Init order (tokenizer, cls, encoder, head) is fixed so a given
    (config, seed) pair always produces bit-identical parameters.
    """
    rng = np.random.default_rng(seed)
    dtype = _DTYPES[cfg.dtype]
    params: dict[str, Tensor] = {}
    if cfg.modality == "points":
        params.update(init_point_tokenizer(cfg.tokenizer_config(), rng, dtype))
    else:
        params.update(init_image_tokenizer(cfg.patch, cfg.img_channels,
                                           cfg.dim, rng, dtype))
    params["cls"] = init_cls(cfg.dim, rng, dtype)

    n_pos = None
    if cfg.pos_mode == "table":
        if cfg.modality == "image":
            n_pos = (cfg.img_size // cfg.patch) ** 2
        elif cfg.n_tokens is not None:
            n_pos = cfg.n_tokens
        else:
            raise ConfigError("table positional mode needs n_tokens for point models")
    params.update(init_backbone(cfg.backbone_config(), rng, dtype, n_pos_tokens=n_pos))

    head_init = init_segmenter_head if cfg.task == "seg" else init_classifier_head
    params.update(head_init(cfg.head_config(), rng, dtype))
    return Model(cfg, params)


def install_state(model: Model, arrays: Mapping[str, np.ndarray]) -> None:
    """Overwrite every model tensor from a name -> array mapping.

    The name sets must match exactly; values are cast to each tensor's
    dtype (a same-dtype checkpoint restores bit-exact).
    """
    missing = sorted(set(model.params) - set(arrays))
    extra = sorted(set(arrays) - set(model.params))
    if missing or extra:
        raise IncompatibleCheckpointError(
            f"state mismatch: missing {missing[:4]}, unexpected {extra[:4]}")
    for name, arr in arrays.items():
        p = model.params[name]
        if tuple(np.shape(arr)) != tuple(p.data.shape):
            raise IncompatibleCheckpointError(
                f"shape mismatch for {name!r}: {np.shape(arr)} vs {p.data.shape}")
        p.data = np.asarray(arr, dtype=p.data.dtype)


def param_groups(params: Mapping[str, Tensor]) -> dict[str, list[str]]:
    """Partition trainable names into tokenizer / encoder / head groups."""
    groups = {"tokenizer": [], "encoder": [], "head": []}
    for name, t in params.items():
        if not t.requires_grad:
            continue
        if (name.startswith(BACKBONE_PREFIXES) or name in BACKBONE_LEAVES
                or name == "cls"):
            groups["encoder"].append(name)
        elif name.startswith(("head.", "seg_head.")):
            groups["head"].append(name)
        else:
            groups["tokenizer"].append(name)
    return {k: sorted(v) for k, v in groups.items()}
