"""Acceptance gate: one test per release criterion.

Each test prints a single [acceptance] PASS line with the measured
numbers (visible with -s, or in the captured output on failure), and the
pytest -v status line doubles as the pass/fail record. Tolerances are
pinned here and nowhere else. The last criterion exercises the separately
built checkpoint converter and skips cleanly when it is absent, so this
suite runs standalone.
"""

import json
import statistics
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.special import erf

from p4p import autograd as ag
from p4p.cli import main as cli_main
from p4p.data import SyntheticTaskSpec, gen_shapes8
from p4p.decoders import compute_metrics
from p4p.geometry import (NeighborIndex, PointCloud, farthest_point_sample,
                          knn_for_centers, knn_query, three_nn_weights)
from p4p.geometry_reference import (fps_reference, knn_reference,
                                    three_nn_weights_reference)
from p4p.pipeline import build_model, make_model_config, param_groups
from p4p.tokenizer import TokenizerConfig, graph_conv, tokenize_points
from p4p.training import init_adamw, run_experiment, train_step
from p4p.transfer import (TransferPolicy, load_archive, save_archive,
                          transfer_image_weights)
from p4p.verification import FD_TOLERANCE, SUITE_NAMES, run_gradient_suites

REPO = Path(__file__).resolve().parents[1]

GRAD_SEEDS = 20
GRAD_TOL = 1e-4
GRAD_BUDGET_S = 120.0
GEOMETRY_INSTANCES = 200
GEOMETRY_MAX_N = 512
WEIGHT_RTOL = 1e-6
TOKENIZER_RTOL = 1e-5
OVERFIT_STEPS = 200
OVERFIT_LOSS = 0.01
METRIC_ATOL = 1e-9
F32_RTOL = 1e-6


def _report(criterion: str, detail: str) -> None:
    print(f"[acceptance] {criterion}: PASS ({detail})")


# 1. finite-difference gradients across every module, 20 seeds, 2 min cap

def test_criterion_1_gradient_suites():
    started = time.perf_counter()
    results = run_gradient_suites(range(GRAD_SEEDS), precision="f64")
    elapsed = time.perf_counter() - started
    assert set(results) == set(SUITE_NAMES)
    worst = max(r.max_rel_error for r in results.values())
    for name, result in results.items():
        assert result.max_rel_error < GRAD_TOL, (
            f"{name} exceeded {GRAD_TOL}: {result.max_rel_error:.3e} "
            f"at {result.worst_tensor}")
    assert elapsed < GRAD_BUDGET_S
    assert GRAD_TOL == FD_TOLERANCE["f64"]
    _report("gradient-suites",
            f"5 suites x {GRAD_SEEDS} seeds, worst {worst:.3e}, {elapsed:.1f}s")


# 2. geometry kernels against brute-force references, 200 random instances

def test_criterion_2_geometry_oracles():
    rng = np.random.default_rng(20260818)
    checked = 0
    for trial in range(GEOMETRY_INSTANCES):
        # first trial pins the largest size; the rest are random
        n = GEOMETRY_MAX_N if trial == 0 else int(rng.integers(8, GEOMETRY_MAX_N + 1))
        pts = rng.normal(size=(n, 3))
        m = max(1, n // 4)
        k = int(rng.integers(1, min(16, n) + 1))

        got_fps = np.asarray(farthest_point_sample(pts, m))
        want_fps = np.asarray(fps_reference(pts, m))
        assert np.array_equal(got_fps, want_fps), f"FPS indices diverge at n={n}"

        centers = pts[got_fps]
        got_knn = knn_query(pts, centers, k).neighbor_ids
        want_knn = knn_reference(pts, centers, k)
        assert np.array_equal(got_knn, want_knn), f"kNN indices diverge at n={n}"

        got_idx, got_w = three_nn_weights(centers, pts)
        want_idx, want_w = three_nn_weights_reference(centers, pts)
        assert np.array_equal(got_idx, want_idx), f"3-NN indices diverge at n={n}"
        np.testing.assert_allclose(got_w, want_w, rtol=WEIGHT_RTOL, atol=1e-12)
        checked += 1
    assert checked == GEOMETRY_INSTANCES
    _report("geometry-oracles",
            f"{checked} instances up to N={GEOMETRY_MAX_N}, indices exact, "
            f"weights rtol {WEIGHT_RTOL:g}")


# 3. graph-conv tokenizer against a straight-line loop oracle

def _gelu64(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _tokens_by_loop(positions, features, center_ids, neighbor_ids, params):
    w1 = params["point_tokenizer.s0.h1.weight"].data
    b1 = params["point_tokenizer.s0.h1.bias"].data
    w2 = params["point_tokenizer.s0.h2.weight"].data
    b2 = params["point_tokenizer.s0.h2.bias"].data
    out = np.empty((len(center_ids), w2.shape[1]))
    for ci, i in enumerate(center_ids):
        edges = []
        for j in neighbor_ids[ci]:
            rel = np.concatenate([positions[j] - positions[i],
                                  features[j] - features[i]])
            edges.append(_gelu64(rel @ w1 + b1))
        pooled = np.max(np.stack(edges), axis=0)
        outs = [np.concatenate([e, pooled]) @ w2 + b2 for e in edges]
        out[ci] = np.max(np.stack(outs), axis=0)
    return out


def test_criterion_3_tokenizer_fidelity():
    from p4p.tokenizer import init_cls, init_point_tokenizer

    cfg = TokenizerConfig(width=16, c_in=3, k=6, downsample_ratio=4)
    for seed in range(5):
        rng = np.random.default_rng(seed)
        cloud = PointCloud(positions=rng.normal(size=(24, 3)),
                           features=rng.normal(size=(24, 3)))
        prng = np.random.default_rng(seed + 50)
        params = init_point_tokenizer(cfg, prng, dtype=np.float64)
        params["cls"] = init_cls(cfg.width, prng, dtype=np.float64)

        ts = tokenize_points(cloud, params, cfg)
        center_ids = np.asarray(farthest_point_sample(cloud, 6))
        nb = knn_for_centers(cloud, center_ids, cfg.k)
        expect = _tokens_by_loop(cloud.positions, cloud.features,
                                 center_ids, nb.neighbor_ids, params)
        np.testing.assert_allclose(ts.tokens.data, expect,
                                   rtol=TOKENIZER_RTOL, atol=1e-9)

        # max pooling makes neighbor order irrelevant
        shuffled = np.stack([np.random.default_rng(seed + 99).permutation(row)
                             for row in nb.neighbor_ids])
        args = (params["point_tokenizer.s0.h1.weight"],
                params["point_tokenizer.s0.h1.bias"],
                params["point_tokenizer.s0.h2.weight"],
                params["point_tokenizer.s0.h2.bias"])
        a = graph_conv(cloud.positions, ag.const(cloud.features), nb, *args)
        b = graph_conv(cloud.positions, ag.const(cloud.features),
                       NeighborIndex(neighbor_ids=shuffled,
                                     center_ids=nb.center_ids), *args)
        np.testing.assert_allclose(a.data, b.data, rtol=1e-12, atol=1e-12)

        # relative inputs shift centers without touching token values
        shift = np.array([25.0, -4.0, 7.0])
        moved = PointCloud(positions=cloud.positions + shift,
                           features=cloud.features)
        ts2 = tokenize_points(moved, params, cfg)
        assert np.max(np.abs((ts2.center_pos - ts.center_pos) - shift)) < 1e-9
        np.testing.assert_allclose(ts2.tokens.data, ts.tokens.data,
                                   rtol=TOKENIZER_RTOL, atol=1e-9)
    _report("tokenizer-fidelity",
            f"loop oracle rtol {TOKENIZER_RTOL:g}, neighbor permutation and "
            f"translation invariance over 5 seeds")


# 4. checkpoint round-trip, transfer partition, frozen-backbone training

def _point_model(seed=0, **overrides):
    kw = dict(task="cls", modality="points", n_classes=8, dim=16, depth=1,
              heads=2, k=4, downsample_ratio=4, norm="layer")
    kw.update(overrides)
    return build_model(make_model_config(**kw), seed=seed)


def test_criterion_4_transfer_mechanics(tmp_path):
    model = _point_model(seed=3)
    save_archive(dict(model.params), tmp_path / "ck")
    arrays, _ = load_archive(tmp_path / "ck")
    assert set(arrays) == set(model.params)
    for name, arr in arrays.items():
        assert arr.dtype == model.params[name].data.dtype
        assert np.array_equal(arr, model.params[name].data), name

    image = build_model(make_model_config(
        task="cls", modality="image", n_classes=8, dim=16, depth=1, heads=2,
        patch=4, img_size=8, norm="layer"), seed=4)
    ckpt = {n: t.data.copy() for n, t in image.params.items()}
    target = _point_model(seed=5)
    report = transfer_image_weights(ckpt, target.params, TransferPolicy())

    def is_backbone(name):
        return name.startswith("blocks.") or name in ("norm.weight", "norm.bias")

    want_matched = sorted(n for n in ckpt
                          if (is_backbone(n) or n == "cls") and n in target.params)
    want_skipped = sorted(n for n in ckpt if not (is_backbone(n) or n == "cls"))
    assert sorted(report.matched) == want_matched
    assert sorted(report.skipped) == want_skipped
    assert report.mismatched == [] and report.missing == []
    assert len(report.matched) + len(report.skipped) == len(ckpt)
    for name in report.matched:
        assert np.array_equal(target.params[name].data, ckpt[name]), name

    frozen = _point_model(seed=6)
    transfer_image_weights(ckpt, frozen.params,
                           TransferPolicy(freeze_backbone=True))
    groups = param_groups(frozen.params)
    before = {n: t.data.copy() for n, t in frozen.params.items()}
    spec = SyntheticTaskSpec("shapes8", n_train=4, n_val=2, points=32, seed=7)
    batch, _ = gen_shapes8(spec)
    opt = init_adamw(frozen.params)
    for step in range(50):
        train_step(frozen, batch, opt, lr=1e-3, step=step)

    for name in ("cls", "norm.weight", "norm.bias"):
        assert np.array_equal(frozen.params[name].data, before[name]), name
    for name in before:
        if name.startswith("blocks."):
            assert np.array_equal(frozen.params[name].data, before[name]), name
    moving = groups["tokenizer"] + groups["head"]
    for name in moving:
        assert not np.array_equal(frozen.params[name].data, before[name]), name
    _report("transfer-mechanics",
            f"round-trip bit-exact, partition {len(report.matched)}/"
            f"{len(report.skipped)} matched/skipped, 50 frozen steps moved "
            f"{len(moving)} tensors and pinned the backbone")


# 5. small model drives an 8-cloud batch to zero training error

def test_criterion_5_overfit_sanity():
    spec = SyntheticTaskSpec("shapes8", n_train=8, n_val=4, points=64, seed=0)
    train, _ = gen_shapes8(spec)
    truth = np.array([int(c.labels) for c in train])
    model = build_model(make_model_config(
        task="cls", modality="points", n_classes=8, dim=64, depth=2, heads=4,
        k=8, downsample_ratio=4, norm="layer"), seed=1)
    opt = init_adamw(model.params)
    first_hit = None
    for step in range(OVERFIT_STEPS):
        lr = 4e-3 * min(1.0, (step + 1) / 15)
        loss, preds, _ = train_step(model, train, opt, lr=lr, step=step)
        acc = float(np.mean(np.concatenate(preds) == truth))
        if first_hit is None and acc == 1.0 and loss < OVERFIT_LOSS:
            first_hit = step
    assert acc == 1.0, f"train accuracy stuck at {acc:.3f}"
    assert loss < OVERFIT_LOSS, f"final loss {loss:.4f}"
    assert first_hit is not None and first_hit < OVERFIT_STEPS
    _report("overfit-sanity",
            f"100% train accuracy, loss {loss:.4f} (first hit step {first_hit})")


# 6. image pretraining beats scratch initialization on the point task

def test_criterion_6_toy_transfer(tmp_path):
    pretrain = {
        "task": "patches2d", "seed": 100, "epochs": 8, "batch_size": 32,
        "data": {"train": 2000, "val": 200},
        "model": {"dim": 64, "depth": 2, "heads": 4, "patch": 4,
                  "norm": "layer"},
        "train": {"lr": 1e-3, "weight_decay": 1e-2, "warmup_epochs": 1,
                  "label_smoothing": 0.1},
    }
    started = time.perf_counter()
    pre = run_experiment(pretrain, tmp_path / "pre")
    pretrain_s = time.perf_counter() - started
    assert pre["best_metric"] > 50.0, "image pretraining failed to learn"

    def finetune(seed, init):
        cfg = {
            "task": "shapes8", "seed": seed, "epochs": 30, "batch_size": 16,
            "data": {"train": 64, "val": 32, "points": 64},
            "model": {"dim": 64, "depth": 2, "heads": 4, "k": 8,
                      "downsample_ratio": 4, "norm": "layer"},
            "train": {"lr": 1e-3, "weight_decay": 1e-2, "warmup_epochs": 2,
                      "label_smoothing": 0.1,
                      "augmentations": ["rotate", "scale", "jitter"]},
        }
        if init:
            cfg["init"] = str(tmp_path / "pre" / "best")
        tag = "pretrained" if init else "scratch"
        return run_experiment(cfg, tmp_path / f"ft_{tag}_{seed}")["best_metric"]

    runs = []
    for seed in range(5):
        runs.append({"seed": seed,
                     "pretrained": finetune(seed, True),
                     "scratch": finetune(seed, False)})
    med_pre = statistics.median(r["pretrained"] for r in runs)
    med_scr = statistics.median(r["scratch"] for r in runs)

    artifact = {
        "experiment": "toy transfer: image-pretrained vs scratch init",
        "pretrain": {"images": 2000, "epochs": 8,
                     "best_val_OA": pre["best_metric"],
                     "seconds": round(pretrain_s, 1)},
        "finetune": {"train_clouds": 64, "epochs": 30, "seeds": 5},
        "runs": runs,
        "median_pretrained_OA": med_pre,
        "median_scratch_OA": med_scr,
    }
    out = REPO / "experiments"
    out.mkdir(exist_ok=True)
    (out / "toy_transfer.json").write_text(json.dumps(artifact, indent=1))

    assert med_pre >= med_scr, (
        f"pretrained median {med_pre} < scratch median {med_scr}")
    _report("toy-transfer",
            f"median val OA pretrained {med_pre:.2f} >= scratch {med_scr:.2f} "
            f"over 5 seeds, artifact at experiments/toy_transfer.json")


# 7. metric computation against hand-built confusion matrices

def _metrics_by_hand(pred, truth, k):
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    cm = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(truth, pred):
        cm[t, p] += 1
    oa = 100.0 * np.trace(cm) / cm.sum()
    recalls = [cm[c, c] / cm[c].sum() for c in range(k) if cm[c].sum() > 0]
    ious = []
    for c in range(k):
        union = cm[c].sum() + cm[:, c].sum() - cm[c, c]
        if union > 0:
            ious.append(cm[c, c] / union)
    return oa, 100.0 * float(np.mean(recalls)), 100.0 * float(np.mean(ious))


def test_criterion_7_metric_oracles():
    rng = np.random.default_rng(11)
    cases = [
        ("perfect", [0, 1, 2, 3], [0, 1, 2, 3], 4),
        ("all wrong", [1, 0, 1, 0], [0, 1, 0, 1], 2),
        ("constant prediction", [0, 0, 0, 0], [0, 0, 1, 1], 2),
        ("single correct sample", [2], [2], 3),
        ("phantom class predicted", [0, 2, 0, 1], [0, 1, 0, 1], 3),
        ("segmentation grid", [[0, 1], [1, 1]], [[0, 1], [0, 1]], 2),
        ("unused class id", [0, 1, 0], [0, 1, 1], 5),
        ("swapped pair", [1, 0], [0, 1], 2),
        ("random balanced", rng.integers(0, 4, 60), rng.integers(0, 4, 60), 4),
        ("random skewed", rng.choice(3, 80, p=[0.7, 0.2, 0.1]),
         rng.choice(3, 80, p=[0.1, 0.2, 0.7]), 3),
    ]
    assert len(cases) == 10
    for name, pred, truth, k in cases:
        task = "seg" if np.asarray(pred).ndim > 1 else "cls"
        got = compute_metrics(np.asarray(pred), np.asarray(truth), k, task=task)
        oa, macc, miou = _metrics_by_hand(pred, truth, k)
        assert got["OA"] == pytest.approx(oa, abs=METRIC_ATOL), name
        assert got["mAcc"] == pytest.approx(macc, abs=METRIC_ATOL), name
        assert got["mIoU"] == pytest.approx(miou, abs=METRIC_ATOL), name

    pinned = compute_metrics(np.array([0, 0, 0, 0]), np.array([0, 0, 1, 1]), 2)
    assert pinned == {"OA": 50.0, "mAcc": 50.0, "mIoU": 25.0}
    _report("metric-oracles", "10 confusion cases, constant-prediction "
            "case pinned at OA 50 / mAcc 50 / mIoU 25")


# 8. identical seed and argv reproduce the metric log byte for byte

def test_criterion_8_determinism(tmp_path, capsys):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({
        "task": "shapes8", "batch_size": 8,
        "data": {"train": 16, "val": 8, "points": 64},
        "model": {"dim": 16, "depth": 1, "heads": 2, "k": 4,
                  "downsample_ratio": 4, "norm": "layer"},
        "train": {"lr": 1e-3, "warmup_epochs": 1, "label_smoothing": 0.1,
                  "augmentations": ["rotate", "jitter"]},
    }))
    for name in ("a", "b"):
        code = cli_main(["train", "--config", str(cfg), "--seed", "7",
                         "--epochs", "2", "--workdir", str(tmp_path / name)])
        assert code == 0
    capsys.readouterr()
    log_a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    log_b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert log_a == log_b
    # initial val record plus train and val records for each of 2 epochs
    records = [json.loads(l) for l in log_a.decode().splitlines()]
    assert len(records) == 5
    _report("determinism", f"train --seed 7 --epochs 2 twice: "
            f"{len(log_a)}-byte logs identical")


# 9. converter round-trip (skips when the secondary package is not built)

CONVERTER_CLI = REPO / "converter" / "dist" / "cli.js"


def _write_safetensors(path: Path, tensors: dict[str, np.ndarray]) -> None:
    header = {}
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        blobs.append(arr.tobytes())
        header[name] = {"dtype": "F32", "shape": list(arr.shape),
                        "data_offsets": [offset, offset + arr.nbytes]}
        offset += arr.nbytes
    raw = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(len(raw).to_bytes(8, "little"))
        f.write(raw)
        for blob in blobs:
            f.write(blob)


def _tiny_vit_fixture(rng) -> dict[str, np.ndarray]:
    dim, patch, tokens, blocks = 8, 4, 4, 2
    t = {"cls_token": rng.normal(size=(1, 1, dim)),
         "pos_embed": rng.normal(size=(1, tokens + 1, dim)),
         "patch_embed.proj.weight": rng.normal(size=(dim, 1, patch, patch)),
         "patch_embed.proj.bias": rng.normal(size=(dim,)),
         "norm.weight": rng.normal(size=(dim,)),
         "norm.bias": rng.normal(size=(dim,)),
         "head.weight": rng.normal(size=(10, dim)),
         "head.bias": rng.normal(size=(10,))}
    for i in range(blocks):
        b = f"blocks.{i}."
        t[b + "norm1.weight"] = rng.normal(size=(dim,))
        t[b + "norm1.bias"] = rng.normal(size=(dim,))
        t[b + "attn.qkv.weight"] = rng.normal(size=(3 * dim, dim))
        t[b + "attn.qkv.bias"] = rng.normal(size=(3 * dim,))
        t[b + "attn.proj.weight"] = rng.normal(size=(dim, dim))
        t[b + "attn.proj.bias"] = rng.normal(size=(dim,))
        t[b + "norm2.weight"] = rng.normal(size=(dim,))
        t[b + "norm2.bias"] = rng.normal(size=(dim,))
        t[b + "mlp.fc1.weight"] = rng.normal(size=(4 * dim, dim))
        t[b + "mlp.fc1.bias"] = rng.normal(size=(4 * dim,))
        t[b + "mlp.fc2.weight"] = rng.normal(size=(dim, 4 * dim))
        t[b + "mlp.fc2.bias"] = rng.normal(size=(dim,))
    return t


def _expected_canonical(src: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """The documented mapping: transpose linear weights, reshape cls,
    drop the pos_embed batch axis and move its cls row last."""
    out = {}
    for name, arr in src.items():
        arr = arr.astype(np.float32)
        if name == "cls_token":
            out["cls"] = arr.reshape(1, -1)
        elif name == "pos_embed":
            flat = arr.reshape(arr.shape[1], arr.shape[2])
            out["pos_embed"] = np.concatenate([flat[1:], flat[:1]], axis=0)
        elif name == "patch_embed.proj.weight":
            c_out = arr.shape[0]
            out["patch_embed.weight"] = (
                arr.transpose(2, 3, 1, 0).reshape(-1, c_out))
        elif name == "patch_embed.proj.bias":
            out["patch_embed.bias"] = arr
        elif name.startswith("head."):
            continue
        elif name.endswith(".weight") and arr.ndim == 2:
            out[name] = arr.T
        else:
            out[name] = arr
    return out


@pytest.mark.skipif(not CONVERTER_CLI.exists(),
                    reason="secondary converter not built; primary suite "
                           "runs standalone")
def test_criterion_9_converter_contract(tmp_path):
    rng = np.random.default_rng(1234)
    src = _tiny_vit_fixture(rng)
    fixture = tmp_path / "tiny_vit.safetensors"
    _write_safetensors(fixture, src)

    out_prefix = tmp_path / "converted"
    proc = subprocess.run(
        ["node", str(CONVERTER_CLI), "export", "--src", str(fixture),
         "--variant", "fixture-tiny", "--out", str(out_prefix)],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr

    arrays, meta = load_archive(out_prefix)
    expect = _expected_canonical(src)
    assert set(arrays) == set(expect)
    for name, want in expect.items():
        got = arrays[name]
        assert got.shape == want.shape, name
        np.testing.assert_allclose(got, want, rtol=F32_RTOL, atol=1e-7,
                                   err_msg=name)

    # the exported archive must satisfy the core's transfer contract:
    # depth matches the fixture so every backbone row finds a target, and
    # only the image tokenizer tensors stay behind
    target = _point_model(seed=8, dim=8, heads=2, depth=2)
    report = transfer_image_weights(arrays, target.params, TransferPolicy())
    assert report.missing == [] and report.mismatched == []
    assert set(report.skipped) == {"pos_embed", "patch_embed.weight",
                                   "patch_embed.bias"}
    assert set(report.matched) == set(arrays) - set(report.skipped)
    _report("converter-contract",
            f"{len(arrays)} tensors round-tripped within f32 tolerance, "
            f"{len(report.matched)} installed into the point model")
