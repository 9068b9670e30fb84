"""Acceptance gate: ten go/no-go checks, each printing one PASS/FAIL line.

The desk benchmark (criteria 7 and 9) drives the command-line pipeline on a
synthetic dataset at full working scale; the remaining criteria are oracle
and invariant checks with explicit runtime budgets.
"""

from __future__ import annotations

import csv
import json
import time
from collections import deque

import numpy as np
import pytest
import torch
from scipy import stats as sstats
from scipy.ndimage import correlate

from hsad.cli import main
from hsad.cube import GroundTruthMap, HsiCube, normalize_symmetric
from hsad.detectors import ScoreMap, grx
from hsad.evaluation import asnpr_db, auc, roc
from hsad.masking import MaskParams, generate_mask_map
from hsad.msgms import SOBEL_BANK, MsgmsConfig, gms_map, gradient_magnitude, msgms_loss
from hsad.network import (
    FeatureMap,
    NetParams,
    NetworkConfig,
    forward,
    init_params,
    loss_and_grad,
    window_attention_probs,
)
from hsad.training import TrainConfig, train


def _report(num: int, description: str, ok: bool, detail: str = "") -> None:
    verdict = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"criterion {num:02d} {description}: {verdict}{suffix}")
    assert ok, f"criterion {num:02d} {description}: {verdict}{suffix}"


# ---------------------------------------------------------------------------
# criterion 1: global Mahalanobis scores against a per-pixel linear solve
# ---------------------------------------------------------------------------


def test_criterion_01_grx_oracle():
    rng = np.random.default_rng(101)
    started = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        h = int(rng.integers(8, 33))
        w = int(rng.integers(8, 33))
        b = int(rng.integers(4, 9))
        values = rng.normal(size=(h, w, b))
        got = grx(HsiCube(values)).scores
        x = values.reshape(-1, b)
        mean = x.mean(axis=0)
        cov = np.cov(x, rowvar=False, ddof=1).reshape(b, b)
        want = np.array(
            [float(d @ np.linalg.solve(cov, d)) for d in x - mean]
        ).reshape(h, w)
        worst = max(worst, float(np.max(np.abs(got - want) / np.abs(want))))
    elapsed = time.perf_counter() - started
    _report(
        1,
        "global detector matches linear-solve oracle on 50 cubes",
        worst < 1e-6 and elapsed < 5.0,
        f"max rel err {worst:.2e}, {elapsed:.2f} s",
    )


# ---------------------------------------------------------------------------
# criterion 2: trapezoid ROC AUC against the tie-corrected rank statistic
# ---------------------------------------------------------------------------


def test_criterion_02_auc_oracle():
    rng = np.random.default_rng(102)
    started = time.perf_counter()
    worst = 0.0
    for trial in range(100):
        shape = (12, 12)
        scores = (
            rng.integers(0, 6, size=shape).astype(float)
            if trial % 2
            else rng.random(shape)
        )
        labels = np.zeros(shape, dtype=np.uint8)
        k = int(rng.integers(1, shape[0] * shape[1] // 2))
        labels.ravel()[rng.choice(labels.size, size=k, replace=False)] = 1
        got = auc(roc(ScoreMap(scores), GroundTruthMap(labels)))
        ranks = sstats.rankdata(scores.ravel())
        t = labels.ravel().astype(bool)
        n_t, n_b = int(t.sum()), int((~t).sum())
        want = (ranks[t].sum() - n_t * (n_t + 1) / 2) / (n_t * n_b)
        worst = max(worst, abs(got - want))
    elapsed = time.perf_counter() - started
    _report(
        2,
        "ROC AUC matches rank statistic on 100 pairs",
        worst <= 1e-9 and elapsed < 5.0,
        f"max abs err {worst:.2e}, {elapsed:.2f} s",
    )


# ---------------------------------------------------------------------------
# criterion 3: structural loss — exact self-loss, GMS range, straight-line
# oracle, and analytic gradients against central finite differences
# ---------------------------------------------------------------------------


def _straight_line_loss(x: np.ndarray, y: np.ndarray, c: float, scales: int) -> float:
    def magnitude(values):
        out = np.zeros_like(values)
        for b in range(values.shape[2]):
            acc = np.zeros(values.shape[:2])
            for kernel in SOBEL_BANK:
                resp = correlate(values[:, :, b], kernel, mode="nearest")
                acc += resp * resp
            out[:, :, b] = np.sqrt(acc)
        return out

    def pool(values):
        h2, w2 = values.shape[0] // 2, values.shape[1] // 2
        return values[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2, -1).mean(axis=(1, 3))

    total = 0.0
    for level in range(scales):
        if level:
            x, y = pool(x), pool(y)
        a, b = magnitude(x), magnitude(y)
        total += float(np.mean(1.0 - (2 * a * b + c) / (a * a + b * b + c)))
    return total / scales


def test_criterion_03_msgms_correctness():
    started = time.perf_counter()
    rng = np.random.default_rng(103)
    cfg = MsgmsConfig()

    self_loss_ok = all(
        abs(msgms_loss(c, c, cfg)) <= 1e-12
        for c in (
            HsiCube(rng.random((48, 48, 4))),
            HsiCube(np.full((48, 48, 2), 0.25)),
        )
    )

    range_ok = True
    oracle_err = 0.0
    for _ in range(20):
        x = rng.random((24, 24, 3))
        y = rng.random((24, 24, 3))
        gms = gms_map(
            gradient_magnitude(HsiCube(x)), gradient_magnitude(HsiCube(y)), 1.0
        ).values
        range_ok &= bool((gms > 0).all() and (gms <= 1).all())
        got = msgms_loss(HsiCube(x), HsiCube(y), MsgmsConfig(scales=3))
        oracle_err = max(oracle_err, abs(got - _straight_line_loss(x, y, 1.0, 3)))

    net_cfg = NetworkConfig(
        channels_c=4, heads=(1, 1, 1, 1, 1), window_partition=2, input_size=(8, 8, 3)
    )
    params = init_params(net_cfg, np.random.default_rng(104), zero_residual=False)
    xm = HsiCube(rng.random((8, 8, 3)) * 0.2 - 0.1)
    xo = HsiCube(rng.random((8, 8, 3)) * 0.2 - 0.1)
    loss_cfg = MsgmsConfig(scales=2)
    _, grads = loss_and_grad(xm, xo, params, loss_cfg)
    names = sorted(params.tensors)
    # central differences carry ~eps_mach*|loss|/(2h) of cancellation noise;
    # the denominator floor keeps true-zero gradients from failing spuriously
    eps = 1e-5
    worst_rel = 0.0
    for _ in range(200):
        name = names[int(rng.integers(len(names)))]
        flat = int(rng.integers(params.tensors[name].size))
        base = params.tensors[name].ravel()[flat]

        def loss_at(value):
            t = {k: v.copy() for k, v in params.tensors.items()}
            t[name].ravel()[flat] = value
            return msgms_loss(xo, forward(xm, NetParams(net_cfg, t)), loss_cfg)

        fd = (loss_at(base + eps) - loss_at(base - eps)) / (2 * eps)
        an = grads[name].ravel()[flat]
        worst_rel = max(worst_rel, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    elapsed = time.perf_counter() - started
    _report(
        3,
        "structural loss: self-loss 0, GMS range, oracle, gradients",
        self_loss_ok and range_ok and oracle_err <= 1e-10 and worst_rel < 1e-5
        and elapsed < 60.0,
        f"oracle err {oracle_err:.2e}, grad rel {worst_rel:.2e}, {elapsed:.1f} s",
    )


# ---------------------------------------------------------------------------
# criterion 4: 10^4 mask generations — connectivity, disjointness, ranges,
# and the masked-fraction expectation
# ---------------------------------------------------------------------------


def _is_four_connected(region: frozenset) -> bool:
    pixels = set(region)
    start = next(iter(pixels))
    seen = {start}
    queue = deque([start])
    while queue:
        r, c = queue.popleft()
        for nb in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if nb in pixels and nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return seen == pixels


def test_criterion_04_mask_invariants():
    params = MaskParams()  # grid 8, count 1..32, area 3..20
    started = time.perf_counter()
    fractions = np.empty(10_000)
    ok = True
    for i in range(10_000):
        mask = generate_mask_map(64, 64, params, np.random.default_rng(i))
        regions = mask.regions
        ok &= regions is not None and 1 <= len(regions) <= 32
        seen: set = set()
        for region in regions:
            ok &= 3 <= len(region) <= 20
            ok &= not (seen & region)
            seen |= region
            ok &= all(0 <= r < 64 and 0 <= c < 64 for r, c in region)
            ok &= _is_four_connected(region)
        ok &= len(seen) == int((mask.bits == 0).sum())
        fractions[i] = mask.masked_fraction
        if not ok:
            break
    elapsed = time.perf_counter() - started
    expected = np.arange(1, 33).mean() * np.arange(3, 21).mean() / 4096
    gap = abs(float(fractions.mean()) - expected)
    _report(
        4,
        "10^4 masks: connected, disjoint, in-range, expected coverage",
        ok and gap <= 0.005 and elapsed < 30.0,
        f"mean frac {fractions.mean():.4f} vs {expected:.4f}, {elapsed:.1f} s",
    )


# ---------------------------------------------------------------------------
# criterion 5: network contracts — shapes, exact identity at the
# zero-residual start, softmax normalization, shifted-window blocking
# ---------------------------------------------------------------------------


def test_criterion_05_network_contracts():
    configs = [
        NetworkConfig(),  # 64x64x50, C=32
        NetworkConfig(channels_c=8, heads=(1, 2, 4, 2, 1), window_partition=2,
                      input_size=(16, 16, 5)),
        NetworkConfig(channels_c=12, heads=(2, 4, 8, 4, 2), window_partition=4,
                      input_size=(32, 32, 8)),
    ]
    shapes_ok = identity_ok = True
    for i, cfg in enumerate(configs):
        params = init_params(cfg, np.random.default_rng(200 + i))
        x = HsiCube(np.random.default_rng(300 + i).random(cfg.input_size) * 0.2 - 0.1)
        out = forward(x, params)
        shapes_ok &= out.values.shape == x.values.shape
        identity_ok &= bool(np.array_equal(out.values, x.values))  # bit-exact

    rng = np.random.default_rng(105)
    d, win, heads = 4, 4, 2
    weights = {}
    for prefix in ("p1", "p2"):
        weights.update({
            f"{prefix}.qkv.w": rng.normal(size=(3 * d, d)) * 0.1,
            f"{prefix}.qkv.b": np.zeros(3 * d),
            f"{prefix}.proj.w": rng.normal(size=(d, d)) * 0.1,
            f"{prefix}.proj.b": np.zeros(d),
            f"{prefix}.bias.tab": rng.normal(size=((2 * win - 1) ** 2, heads)) * 0.1,
            f"{prefix}.norm.g": np.ones(d),
            f"{prefix}.norm.b": np.zeros(d),
            f"{prefix}.mlp1.w": rng.normal(size=(4 * d, d)) * 0.1,
            f"{prefix}.mlp1.b": np.zeros(4 * d),
            f"{prefix}.mlp2.w": rng.normal(size=(d, 4 * d)) * 0.1,
            f"{prefix}.mlp2.b": np.zeros(d),
        })
    feature = FeatureMap(rng.normal(size=(8, 8, d)))

    probs = window_attention_probs(feature, weights, heads, win, shifted=False)
    softmax_ok = bool(np.abs(probs.sum(axis=-1) - 1.0).max() <= 1e-12)

    shifted = window_attention_probs(feature, weights, heads, win, shifted=True)
    softmax_ok &= bool(np.abs(shifted.sum(axis=-1) - 1.0).max() <= 1e-12)
    # pair-enumeration oracle: tokens may attend iff they fall on the same
    # side of the cyclic wrap in rows and in columns
    h = w = 8
    shift = win // 2
    rows, cols = np.divmod(np.arange(win * win), win)
    mask_ok = True
    for wi in range(shifted.shape[0]):
        wr, wc = divmod(wi, w // win)
        wrap_r = (wr * win + rows) >= h - shift
        wrap_c = (wc * win + cols) >= w - shift
        blocked = (wrap_r[:, None] != wrap_r[None, :]) | (
            wrap_c[:, None] != wrap_c[None, :]
        )
        for head in range(shifted.shape[1]):
            mask_ok &= bool((shifted[wi, head][blocked] == 0.0).all())
            mask_ok &= bool((shifted[wi, head][~blocked] > 0.0).all())
    _report(
        5,
        "network: shapes, exact identity start, softmax, shifted mask",
        shapes_ok and identity_ok and softmax_ok and mask_ok,
    )


# ---------------------------------------------------------------------------
# criterion 6: validation-metric search — argmax selection and exact stop
# ---------------------------------------------------------------------------


def test_criterion_06_domain_search_stops_exactly():
    net_cfg = NetworkConfig(
        channels_c=4, heads=(1, 1, 1, 1, 1), window_partition=2, input_size=(16, 16, 2)
    )
    cubes = [HsiCube(np.random.default_rng(s).random((16, 16, 2))) for s in (1, 2)]
    val = HsiCube(np.random.default_rng(3).random((16, 16, 2)))
    train_cfg = TrainConfig(
        max_epochs=200,
        patience_epochs=30,
        loss="l2",
        mask_params=MaskParams(grid_k=4, n_range=(1, 3), area_range=(3, 6)),
    )

    def scripted(seq):
        it = iter(seq)
        return lambda params: next(it)

    # peak early: the run must stop exactly at best + patience
    seq_a = [1.0, 2.0, 5.0] + [0.0] * 197
    _, report_a = train(cubes, val, net_cfg, train_cfg, metric_fn=scripted(seq_a))
    early_ok = report_a.selected_epoch == 3 and len(report_a.history) == 33

    # peak late: best + patience exceeds the budget, so max_epochs wins
    seq_b = [float(i) for i in range(1, 186)] + [185.0 - i for i in range(1, 16)]
    _, report_b = train(cubes, val, net_cfg, train_cfg, metric_fn=scripted(seq_b))
    late_ok = report_b.selected_epoch == 185 and len(report_b.history) == 200

    _report(
        6,
        "metric search selects argmax and stops at min(best+30, 200)",
        early_ok and late_ok,
        f"stops at {len(report_a.history)} and {len(report_b.history)}",
    )


# ---------------------------------------------------------------------------
# criteria 7 + 9: the desk benchmark (command-line pipeline, full scale)
# ---------------------------------------------------------------------------

SYNTH_CFG = {
    "seed": 7,
    "train_count": 32,
    "val_count": 1,
    "test_count": 10,
    "height": 64,
    "width": 64,
    "bands": 30,
}

TRAIN_CFG = {
    "channels_c": 16,
    "max_epochs": 8,
    "patience_epochs": 8,
}


def _run_benchmark(root):
    """synth -> train -> detect (raw + enhanced) -> eval (both); returns
    paths and the wall time of the whole pipeline."""
    root.mkdir(parents=True, exist_ok=True)
    paths = {
        "dataset": root / "dataset",
        "model": root / "model",
        "scores_raw": root / "scores_raw",
        "scores_enh": root / "scores_enh",
        "eval_raw": root / "eval_raw",
        "eval_enh": root / "eval_enh",
    }
    started = time.perf_counter()

    cfg = root / "synth.json"
    cfg.write_text(json.dumps(SYNTH_CFG))
    assert main(["synth", "--config", str(cfg), "--out", str(paths["dataset"])]) == 0

    cfg = root / "train.json"
    cfg.write_text(json.dumps({**TRAIN_CFG, "dataset": str(paths["dataset"])}))
    assert main(["train", "--config", str(cfg), "--out", str(paths["model"])]) == 0

    cfg = root / "detect_raw.json"
    cfg.write_text(json.dumps({"dataset": str(paths["dataset"])}))
    assert main(["detect", "--config", str(cfg), "--out", str(paths["scores_raw"])]) == 0

    cfg = root / "detect_enh.json"
    cfg.write_text(
        json.dumps(
            {
                "dataset": str(paths["dataset"]),
                "detector": "enhanced",
                "checkpoint": str(paths["model"] / "checkpoint.json"),
            }
        )
    )
    assert main(["detect", "--config", str(cfg), "--out", str(paths["scores_enh"])]) == 0

    truths = str(paths["dataset"] / "test")
    for kind in ("raw", "enh"):
        cfg = root / f"eval_{kind}.json"
        cfg.write_text(json.dumps({"scores": str(paths[f"scores_{kind}"]), "truths": truths}))
        assert main(["eval", "--config", str(cfg), "--out", str(paths[f"eval_{kind}"])]) == 0

    return paths, time.perf_counter() - started


def _read_metrics(path):
    with open(path / "metrics.csv", newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    paths, seconds = _run_benchmark(root / "run1")
    return {"root": root, "paths": paths, "seconds": seconds}


def test_criterion_07_desk_benchmark(desk):
    raw = _read_metrics(desk["paths"]["eval_raw"])
    enh = _read_metrics(desk["paths"]["eval_enh"])
    assert [r["scene_id"] for r in raw] == [r["scene_id"] for r in enh]

    side_by_side = desk["root"] / "benchmark.csv"
    with open(side_by_side, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id", "auc_raw", "auc_enhanced"])
        for row_raw, row_enh in zip(raw, enh):
            writer.writerow([row_raw["scene_id"], row_raw["auc"], row_enh["auc"]])

    mauc_raw = float(raw[-1]["auc"])
    mauc_enh = float(enh[-1]["auc"])
    _report(
        7,
        "desk benchmark: raw mAUC >= 0.95, enhanced within 0.02, < 15 min",
        mauc_raw >= 0.95 and mauc_enh >= mauc_raw - 0.02 and desk["seconds"] < 900,
        f"raw {mauc_raw:.4f}, enhanced {mauc_enh:.4f}, {desk['seconds']:.0f} s",
    )


# ---------------------------------------------------------------------------
# criterion 8: metric invariances
# ---------------------------------------------------------------------------


def test_criterion_08_metric_invariances():
    rng = np.random.default_rng(108)
    monotone_ok = affine_ok = True
    for _ in range(20):
        scores = rng.random((12, 12))
        labels = np.zeros((12, 12), dtype=np.uint8)
        labels.ravel()[rng.choice(144, size=int(rng.integers(2, 40)), replace=False)] = 1
        score, gt = ScoreMap(scores), GroundTruthMap(labels)
        base_auc = auc(roc(score, gt))
        for f in (lambda s: 3 * s + 1, np.exp, np.sqrt, lambda s: s**3):
            monotone_ok &= abs(auc(roc(ScoreMap(f(scores)), gt)) - base_auc) <= 1e-12
        base_snpr = asnpr_db(score, gt)
        affine_ok &= abs(asnpr_db(ScoreMap(2.5 * scores + 4.0), gt) - base_snpr) <= 1e-9

    flat = ScoreMap(np.full((4, 4), 3.0))
    labels = np.zeros((4, 4), dtype=np.uint8)
    labels[1, 2] = 1
    gt = GroundTruthMap(labels)
    degenerate_ok = auc(roc(flat, gt)) == 0.5 and asnpr_db(flat, gt) == 0.0
    _report(
        8,
        "AUC monotone-invariant, adaptive SNPR affine-invariant, flat map exact",
        monotone_ok and affine_ok and degenerate_ok,
    )


# ---------------------------------------------------------------------------
# criterion 9: benchmark determinism across identical reruns
# ---------------------------------------------------------------------------


def _epoch_rows_without_seconds(model_dir):
    with open(model_dir / "epochs.csv", newline="") as fh:
        return [
            (r["epoch"], r["mean_loss"], r["domain_metric"], r["is_peak"])
            for r in csv.DictReader(fh)
        ]


def test_criterion_09_benchmark_determinism(desk):
    paths2, _ = _run_benchmark(desk["root"] / "run2")
    paths1 = desk["paths"]

    epochs_ok = _epoch_rows_without_seconds(paths1["model"]) == _epoch_rows_without_seconds(
        paths2["model"]
    )
    checkpoint_ok = all(
        (paths1["model"] / name).read_bytes() == (paths2["model"] / name).read_bytes()
        for name in ("checkpoint.json", "checkpoint.bin")
    )
    rasters_ok = True
    for kind in ("scores_raw", "scores_enh"):
        for i in range(10):
            name = f"test{i:03d}.raw"
            rasters_ok &= (paths1[kind] / name).read_bytes() == (
                paths2[kind] / name
            ).read_bytes()
    _report(
        9,
        "identical rerun: epoch log, checkpoint bytes, score rasters",
        epochs_ok and checkpoint_ok and rasters_ok,
    )


# ---------------------------------------------------------------------------
# criterion 10: single-core throughput sanity
# ---------------------------------------------------------------------------


def test_criterion_10_throughput():
    rng = np.random.default_rng(110)
    cube = HsiCube(rng.random((64, 64, 50)))

    grx_best = min(
        _timed(lambda: grx(cube)) for _ in range(5)
    )

    cfg = NetworkConfig()  # C=32, 64x64x50
    params = init_params(cfg, np.random.default_rng(111))
    normalized, _ = normalize_symmetric(cube)
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        enhanced_best = min(
            _timed(lambda: grx(forward(normalized, params))) for _ in range(3)
        )
    finally:
        torch.set_num_threads(threads)
    _report(
        10,
        "raw detector < 50 ms, enhanced single-core pipeline < 2 s",
        grx_best < 0.050 and enhanced_best < 2.0,
        f"raw {grx_best * 1e3:.1f} ms, enhanced {enhanced_best:.2f} s",
    )


def _timed(fn) -> float:
    started = time.perf_counter()
    fn()
    return time.perf_counter() - started
