"""Neutral tensor-archive checkpoints and cross-modal weight transfer.

An archive is two files sharing a prefix: ``<prefix>.manifest.json``
describing entries {name, dtype, shape, offset, byte_len} plus optional
``meta``, and ``<prefix>.bin`` holding the raw little-endian row-major
tensor bytes back to back. The manifest entry order equals blob order,
offsets ascend without overlap, and names are unique. save then load is
a bit-exact round trip in the stored dtype.

Transfer installs every name-and-shape-compatible backbone tensor from
an image checkpoint into the target state; tokenizer, positional, and
decoder tensors keep their fresh initialization. Image positional tables
are never compatible with the coordinate MLP, so `transfer_pos` can only
produce a warned no-op.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .autograd import Tensor
from .errors import ArchiveError, IncompatibleCheckpointError

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

BACKBONE_PREFIXES = ("blocks.",)
BACKBONE_LEAVES = ("norm.weight", "norm.bias")


def _as_array(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def save_archive(state: Mapping[str, Tensor | np.ndarray], prefix,
                 meta: dict | None = None) -> None:
    """Write ``<prefix>.manifest.json`` and ``<prefix>.bin``."""
    prefix = Path(prefix)
    entries = []
    blob = bytearray()
    for name, value in state.items():
        arr = np.ascontiguousarray(_as_array(value))
        key = _DTYPE_NAMES.get(arr.dtype.newbyteorder("="))
        if key is None:
            raise ArchiveError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = arr.astype(_DTYPES[key], copy=False).tobytes()
        entries.append({"name": name, "dtype": key, "shape": list(arr.shape),
                        "offset": len(blob), "byte_len": len(raw)})
        blob.extend(raw)
    manifest = {"entries": entries}
    if meta is not None:
        manifest["meta"] = meta
    prefix.parent.mkdir(parents=True, exist_ok=True)
    with open(f"{prefix}.manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
    with open(f"{prefix}.bin", "wb") as f:
        f.write(bytes(blob))


def load_archive(prefix) -> tuple[dict[str, np.ndarray], dict]:
    """Read an archive back as {name: array} plus its meta dict.

    Arrays come back in their stored dtype, bit-exact. All manifest
    invariants are validated before any tensor data is decoded.
    """
    prefix = Path(prefix)
    manifest_path = Path(f"{prefix}.manifest.json")
    blob_path = Path(f"{prefix}.bin")
    if not manifest_path.exists() or not blob_path.exists():
        raise ArchiveError(f"archive {prefix} not found")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ArchiveError(f"manifest is not valid JSON: {e}") from e
    if not isinstance(manifest, dict) or not isinstance(manifest.get("entries"), list):
        raise ArchiveError("manifest must contain an 'entries' list")

    entries = manifest["entries"]
    seen = set()
    cursor = 0
    for e in entries:
        for key in ("name", "dtype", "shape", "offset", "byte_len"):
            if key not in e:
                raise ArchiveError(f"manifest entry missing {key!r}")
        name = e["name"]
        if name in seen:
            raise ArchiveError(f"duplicate tensor name {name!r}")
        seen.add(name)
        if e["dtype"] not in _DTYPES:
            raise ArchiveError(f"unknown dtype {e['dtype']!r} for {name!r}")
        shape = e["shape"]
        if not all(isinstance(s, int) and s >= 0 for s in shape):
            raise ArchiveError(f"bad shape {shape} for {name!r}")
        expected = _DTYPES[e["dtype"]].itemsize * int(np.prod(shape, dtype=np.int64))
        if e["byte_len"] != expected:
            raise ArchiveError(
                f"length mismatch for {name!r}: byte_len {e['byte_len']}, "
                f"dtype x shape needs {expected}")
        if e["offset"] < cursor:
            raise ArchiveError(f"overlapping or non-ascending offset for {name!r}")
        cursor = e["offset"] + e["byte_len"]

    blob = blob_path.read_bytes()
    if len(blob) < cursor:
        raise ArchiveError(
            f"blob truncated: {len(blob)} bytes, manifest needs {cursor}")

    tensors = {}
    for e in entries:
        raw = blob[e["offset"]:e["offset"] + e["byte_len"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        tensors[e["name"]] = arr.copy()  # writable, native layout
    return tensors, manifest.get("meta") or {}


@dataclass
class TransferPolicy:
    transfer_cls: bool = True
    transfer_pos: bool = False
    freeze_backbone: bool = False
    strict: bool = False


@dataclass
class TransferReport:
    """Partition of checkpoint entries: each name lands in exactly one list."""
    matched: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    mismatched: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)  # target-side, informational
    frozen: int = 0

    def summary(self) -> str:
        return (f"matched {len(self.matched)}, skipped {len(self.skipped)}, "
                f"mismatched {len(self.mismatched)}, missing {len(self.missing)}")


def _is_backbone_name(name: str) -> bool:
    return name.startswith(BACKBONE_PREFIXES) or name in BACKBONE_LEAVES


def transfer_image_weights(ckpt: Mapping[str, np.ndarray],
                           target: Mapping[str, Tensor],
                           policy: TransferPolicy | None = None) -> TransferReport:
    """Initialize the point-model backbone from an image checkpoint.

    Transferable names: every ``blocks.*`` leaf, the final ``norm.*``
    pair, and ``cls`` when the policy allows it. Everything else in the
    checkpoint (patch projection, positional table, image head) is
    reported as skipped. strict mode turns shape mismatches and
    backbone-looking names absent from the target into errors, and
    requires the checkpoint to cover the whole target backbone.
    """
    policy = policy or TransferPolicy()
    report = TransferReport()

    if policy.transfer_pos:
        warnings.warn("image positional embeddings have no 3D counterpart; "
                      "transfer_pos is a no-op", stacklevel=2)

    def transferable(name: str) -> bool:
        if _is_backbone_name(name):
            return True
        return name == "cls" and policy.transfer_cls

    for name, value in ckpt.items():
        if not transferable(name):
            report.skipped.append(name)
            continue
        tensor = target.get(name)
        if tensor is None:
            if policy.strict:
                raise IncompatibleCheckpointError(
                    f"checkpoint tensor {name!r} has no target counterpart")
            warnings.warn(f"no target tensor for {name!r}; skipped", stacklevel=2)
            report.skipped.append(name)
            continue
        value = np.asarray(value)
        if tuple(value.shape) != tuple(tensor.data.shape):
            if policy.strict:
                raise IncompatibleCheckpointError(
                    f"shape mismatch for {name!r}: checkpoint {value.shape}, "
                    f"target {tensor.data.shape}")
            warnings.warn(f"shape mismatch for {name!r}; skipped", stacklevel=2)
            report.mismatched.append(name)
            continue
        if value.dtype != tensor.data.dtype:
            if value.dtype == np.float64 and tensor.data.dtype == np.float32:
                warnings.warn(f"downcasting {name!r} f64 -> f32", stacklevel=2)
            value = value.astype(tensor.data.dtype)
        tensor.data = value.copy()
        report.matched.append(name)

    if not report.matched:
        raise IncompatibleCheckpointError(
            "incompatible checkpoint: zero tensors matched")

    matched = set(report.matched)
    report.missing = [n for n in target
                      if _is_backbone_name(n) and n not in matched]
    if policy.strict and report.missing:
        raise IncompatibleCheckpointError(
            f"checkpoint does not cover backbone tensors: {report.missing}")

    if policy.freeze_backbone:
        for name in report.matched:
            target[name].requires_grad = False
            report.frozen += 1
    return report
