"""Command-line front door: dataset synthesis, training, detection,
evaluation, and mask previews.

Subcommands: synth | train | detect | eval | mask-preview. Each takes a JSON
config (strictly validated — unknown keys are rejected) plus the common flags
--config/--seed/--jobs/--out; flags override config keys. Outputs are staged
in a temporary sibling directory and promoted atomically on success, so a
failed run leaves no partial output directory.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .cube import (
    HsiCube,
    load_cube,
    load_truth,
    normalize_unit,
    save_cube,
    save_pgm,
    save_truth,
    select_bands,
)
from .detectors import (
    DEFAULT_RIDGE_EPS,
    LRX_DEFAULT_WINDOWS,
    DualWindow,
    enhance_and_detect,
    grx,
    lrx,
    residual_map,
    save_score_map,
    save_score_pgm,
    load_score_map,
)
from .evaluation import evaluate_scene, summarize, write_metrics_csv
from .masking import MaskParams, generate_mask_map
from .network import NetworkConfig, load_checkpoint, save_checkpoint
from .synth import SynthParams, synth_scene
from .training import TrainConfig, train, write_epoch_log


class ConfigError(ValueError):
    """Invalid or unknown configuration keys/values."""


_REQUIRED = object()


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {p}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {p} must hold a JSON object")
    return cfg


def _validate(cfg: dict, schema: dict[str, tuple]) -> dict:
    """Check types against the schema, apply defaults, reject unknown keys."""
    unknown = sorted(set(cfg) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for key, (check, default) in schema.items():
        if key in cfg:
            value = check(key, cfg[key])
        elif default is _REQUIRED:
            raise ConfigError(f"missing required config key: {key!r}")
        else:
            value = default
        out[key] = value
    return out


def _int(key, v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{key!r} must be an integer, got {v!r}")
    return v


def _number(key, v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{key!r} must be a number, got {v!r}")
    return float(v)


def _str(key, v):
    if not isinstance(v, str):
        raise ConfigError(f"{key!r} must be a string, got {v!r}")
    return v


def _bool(key, v):
    if not isinstance(v, bool):
        raise ConfigError(f"{key!r} must be a boolean, got {v!r}")
    return v


def _int_pair(key, v):
    if not (isinstance(v, list) and len(v) == 2 and all(isinstance(x, int) for x in v)):
        raise ConfigError(f"{key!r} must be a pair of integers, got {v!r}")
    return (v[0], v[1])


def _int_list(n):
    def check(key, v):
        if not (isinstance(v, list) and len(v) == n and all(isinstance(x, int) for x in v)):
            raise ConfigError(f"{key!r} must be a list of {n} integers, got {v!r}")
        return tuple(v)

    return check


class _Staging:
    """Write into <out>.tmp-<pid>, promote to <out> on success."""

    def __init__(self, out: str | Path):
        self.final = Path(out)
        self.tmp = self.final.parent / f"{self.final.name}.tmp-{os.getpid()}"

    def __enter__(self) -> Path:
        if self.final.exists():
            if self.final.is_dir() and not any(self.final.iterdir()):
                self.final.rmdir()
            else:
                raise ConfigError(f"output path {self.final} already exists")
        self.final.parent.mkdir(parents=True, exist_ok=True)
        if self.tmp.exists():
            shutil.rmtree(self.tmp)
        self.tmp.mkdir(parents=True)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            os.replace(self.tmp, self.final)
        else:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

_SYNTH_SCHEMA = {
    "seed": (_int, 0),
    "out": (_str, None),
    "train_count": (_int, 32),
    "val_count": (_int, 1),
    "test_count": (_int, 10),
    "height": (_int, 64),
    "width": (_int, 64),
    "bands": (_int, 30),
    "endmember_count": (_int, 5),
    "anomaly_count": (_int, 3),
    "anomaly_area_range": (_int_pair, (6, 25)),
    "contrast": (_number, 0.9),
    "noise_sigma": (_number, 0.03),
}


def cmd_synth(cfg: dict, out: Path, jobs: int) -> None:
    """Write train/ (anomaly-free), val/ and test/ (with truths) + manifest.

    Scene seeds derive from the top seed as (seed, split, index) with split
    0=train, 1=val, 2=test, so every cube is reproducible in isolation.
    """
    size = (cfg["height"], cfg["width"], cfg["bands"])
    shared = dict(
        endmember_count=cfg["endmember_count"],
        anomaly_area_range=cfg["anomaly_area_range"],
        contrast=cfg["contrast"],
        noise_sigma=cfg["noise_sigma"],
        size=size,
    )
    train_params = SynthParams(anomaly_count=0, **shared)
    anomalous_params = SynthParams(anomaly_count=cfg["anomaly_count"], **shared)
    splits = {
        "train": (0, cfg["train_count"], train_params, "train"),
        "val": (1, cfg["val_count"], anomalous_params, "val"),
        "test": (2, cfg["test_count"], anomalous_params, "test"),
    }
    manifest: dict = {
        "seed": cfg["seed"],
        "size": list(size),
        "params": {
            "endmember_count": cfg["endmember_count"],
            "anomaly_count": cfg["anomaly_count"],
            "anomaly_area_range": list(cfg["anomaly_area_range"]),
            "contrast": cfg["contrast"],
            "noise_sigma": cfg["noise_sigma"],
        },
        "splits": {},
    }
    with _Staging(out) as tmp:
        for name, (split_id, count, params, prefix) in splits.items():
            (tmp / name).mkdir()
            stems = []
            for i in range(count):
                cube, truth = synth_scene(params, (cfg["seed"], split_id, i))
                stem = f"{name}/{prefix}{i:03d}"
                save_cube(cube, tmp / stem)
                if truth.target_count > 0:
                    save_truth(truth, (tmp / stem).with_suffix(".pgm"))
                stems.append(stem)
            manifest["splits"][name] = stems
        _write_json(tmp / "dataset.json", manifest)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_TRAIN_SCHEMA = {
    "seed": (_int, 0),
    "out": (_str, None),
    "dataset": (_str, _REQUIRED),
    "channels_c": (_int, 32),
    "heads": (_int_list(5), (2, 4, 8, 4, 2)),
    "window_partition": (_int, 8),
    "mlp_ratio": (_int, 4),
    "learning_rate": (_number, 1e-4),
    "weight_decay": (_number, 5e-6),
    "batch_size": (_int, 16),
    "max_epochs": (_int, 200),
    "patience_epochs": (_int, 30),
    "fill_mode": (_str, "cutout"),
    "loss": (_str, "msgms"),
    "mask_grid_k": (_int, 8),
    "mask_n_range": (_int_pair, (1, 32)),
    "mask_area_range": (_int_pair, (3, 20)),
    "msgms_scales": (_int, 5),
    "msgms_c": (_number, 1.0),
}


def _read_manifest(dataset: Path) -> dict:
    manifest_path = dataset / "dataset.json"
    if not manifest_path.exists():
        raise ConfigError(f"dataset manifest not found: {manifest_path}")
    return json.loads(manifest_path.read_text())


def cmd_train(cfg: dict, out: Path, jobs: int) -> None:
    """Train on the dataset's train split, validate on its first val cube."""
    dataset = Path(cfg["dataset"])
    manifest = _read_manifest(dataset)
    train_cubes = [load_cube(dataset / stem) for stem in manifest["splits"]["train"]]
    val_stems = manifest["splits"]["val"]
    if not val_stems:
        raise ConfigError("dataset has no validation cube")
    val_cube = load_cube(dataset / val_stems[0])
    if not train_cubes:
        raise ConfigError("dataset has no training cubes")
    h, w, b = train_cubes[0].height, train_cubes[0].width, train_cubes[0].bands
    net_cfg = NetworkConfig(
        channels_c=cfg["channels_c"],
        heads=cfg["heads"],
        window_partition=cfg["window_partition"],
        mlp_ratio=cfg["mlp_ratio"],
        input_size=(h, w, b),
    )
    train_cfg = TrainConfig(
        learning_rate=cfg["learning_rate"],
        weight_decay=cfg["weight_decay"],
        batch_size=cfg["batch_size"],
        max_epochs=cfg["max_epochs"],
        patience_epochs=min(cfg["patience_epochs"], cfg["max_epochs"]),
        seed=cfg["seed"],
        fill_mode=cfg["fill_mode"],
        mask_params=MaskParams(
            grid_k=cfg["mask_grid_k"],
            n_range=cfg["mask_n_range"],
            area_range=cfg["mask_area_range"],
        ),
        loss=cfg["loss"],
        msgms_scales=cfg["msgms_scales"],
        msgms_c=cfg["msgms_c"],
    )
    params, report = train(train_cubes, val_cube, net_cfg, train_cfg)
    with _Staging(out) as tmp:
        save_checkpoint(params, tmp / "checkpoint")
        report = replace(report, checkpoint_path=str(out / "checkpoint.json"))
        write_epoch_log(report, tmp / "epochs.csv")


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------

_DETECT_SCHEMA = {
    "seed": (_int, 0),
    "out": (_str, None),
    "dataset": (_str, None),
    "inputs": (lambda k, v: [_str(k, x) for x in v] if isinstance(v, list) else _str(k, v), None),
    "detector": (_str, "grx"),
    "checkpoint": (_str, None),
    "bands": (_int, None),
    "lrx_inner": (_int, LRX_DEFAULT_WINDOWS[0]),
    "lrx_outer": (_int, LRX_DEFAULT_WINDOWS[1]),
    "ridge_eps": (_number, DEFAULT_RIDGE_EPS),
    "emit_residual": (_bool, False),
}


def _detect_one(stem: Path, cfg: dict, params) -> tuple[str, "np.ndarray", float, object]:
    cube = load_cube(stem)
    residual = None
    started = time.perf_counter()
    if cfg["detector"] == "enhanced":
        score = enhance_and_detect(cube, params, cfg["ridge_eps"])
        if cfg["emit_residual"]:
            residual = residual_map(cube, params)
    else:
        sel = select_bands(cube, cfg["bands"]) if cfg["bands"] else cube
        normalized, _ = normalize_unit(sel)
        if cfg["detector"] == "grx":
            score = grx(normalized, cfg["ridge_eps"])
        else:
            dw = DualWindow(cfg["lrx_inner"], cfg["lrx_outer"])
            score = lrx(normalized, dw, cfg["ridge_eps"])
    seconds = time.perf_counter() - started
    return stem.name, score, seconds, residual


def cmd_detect(cfg: dict, out: Path, jobs: int) -> None:
    """Score every input cube; writes rasters, PGMs, and a timing CSV."""
    if cfg["detector"] not in ("grx", "lrx", "enhanced"):
        raise ConfigError(f"unknown detector {cfg['detector']!r}")
    params = None
    if cfg["detector"] == "enhanced":
        if not cfg["checkpoint"]:
            raise ConfigError("enhanced detection requires a checkpoint")
        params = load_checkpoint(Path(cfg["checkpoint"]).with_suffix(""))
    if cfg["dataset"]:
        dataset = Path(cfg["dataset"])
        manifest = _read_manifest(dataset)
        stems = [dataset / s for s in manifest["splits"]["test"]]
    elif cfg["inputs"]:
        raw = cfg["inputs"] if isinstance(cfg["inputs"], list) else [cfg["inputs"]]
        stems = [Path(s).with_suffix("") for s in raw]
    else:
        raise ConfigError("detect needs either 'dataset' or 'inputs'")
    with _Staging(out) as tmp:
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(lambda s: _detect_one(s, cfg, params), stems))
        else:
            results = [_detect_one(s, cfg, params) for s in stems]
        with open(tmp / "timings.csv", "w", newline="") as fh:
            fh.write("scene_id,seconds\n")
            for name, score, seconds, residual in results:
                save_score_map(score, tmp / name)
                save_score_pgm(score, tmp / f"{name}_vis.pgm")
                if residual is not None:
                    save_cube(residual, tmp / f"{name}_residual")
                fh.write(f"{name},{seconds!r}\n")


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

_EVAL_SCHEMA = {
    "seed": (_int, 0),
    "out": (_str, None),
    "scores": (_str, _REQUIRED),
    "truths": (_str, _REQUIRED),
}


def cmd_eval(cfg: dict, out: Path, jobs: int) -> None:
    """Pair score maps with truths by scene stem; write the metrics CSV."""
    scores_dir = Path(cfg["scores"])
    truths_dir = Path(cfg["truths"])
    stems = sorted(
        p.stem
        for p in scores_dir.glob("*.json")
        if not p.stem.endswith("_residual")
    )
    if not stems:
        raise ConfigError(f"no score maps found in {scores_dir}")
    timings: dict[str, float] = {}
    timing_path = scores_dir / "timings.csv"
    if timing_path.exists():
        for line in timing_path.read_text().splitlines()[1:]:
            name, _, value = line.partition(",")
            timings[name] = float(value)

    def one(stem: str):
        truth_path = truths_dir / f"{stem}.pgm"
        if not truth_path.exists():
            raise ConfigError(f"missing ground truth for scene {stem!r}: {truth_path}")
        score = load_score_map(scores_dir / stem)
        truth = load_truth(truth_path)
        return evaluate_scene(score, truth, scene_id=stem, seconds=timings.get(stem, 0.0))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            metrics = list(pool.map(one, stems))
    else:
        metrics = [one(s) for s in stems]
    summary = summarize(metrics)
    with _Staging(out) as tmp:
        write_metrics_csv(summary, tmp / "metrics.csv")


# ---------------------------------------------------------------------------
# mask-preview
# ---------------------------------------------------------------------------

_MASK_SCHEMA = {
    "seed": (_int, 0),
    "out": (_str, None),
    "count": (_int, 8),
    "height": (_int, 64),
    "width": (_int, 64),
    "grid_k": (_int, 8),
    "n_range": (_int_pair, (1, 32)),
    "area_range": (_int_pair, (3, 20)),
}


def cmd_mask_preview(cfg: dict, out: Path, jobs: int) -> None:
    """Render seeded mask maps as PGM (masked pixels white)."""
    params = MaskParams(
        grid_k=cfg["grid_k"], n_range=cfg["n_range"], area_range=cfg["area_range"]
    )
    with _Staging(out) as tmp:
        for i in range(cfg["count"]):
            rng = np.random.default_rng((cfg["seed"], i))
            mask = generate_mask_map(cfg["height"], cfg["width"], params, rng)
            save_pgm(((1 - mask.bits) * np.uint8(255)), tmp / f"mask_{i:03d}.pgm")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "synth": (_SYNTH_SCHEMA, cmd_synth),
    "train": (_TRAIN_SCHEMA, cmd_train),
    "detect": (_DETECT_SCHEMA, cmd_detect),
    "eval": (_EVAL_SCHEMA, cmd_eval),
    "mask-preview": (_MASK_SCHEMA, cmd_mask_preview),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hsad",
        description="Hyperspectral anomaly detection toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel scene workers")
        p.add_argument("--out", help="output directory (required here or in config)")
        if name == "train":
            p.add_argument("--max-epochs", type=int, dest="max_epochs")
        if name == "detect":
            p.add_argument("--detector", choices=["grx", "lrx", "enhanced"])
            p.add_argument("--checkpoint")
            p.add_argument("--emit-residual", action="store_true", default=None,
                           dest="emit_residual")
        if name == "mask-preview":
            p.add_argument("--count", type=int)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    schema, runner = _COMMANDS[args.command]
    try:
        cfg = _load_config(args.config)
        for key in ("seed", "max_epochs", "detector", "checkpoint", "emit_residual", "count"):
            value = getattr(args, key, None)
            if value is not None:
                cfg[key] = value
        cfg = _validate(cfg, schema)
        out = args.out or cfg.get("out")
        if not out:
            raise ConfigError("an output directory is required (--out or config 'out')")
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        runner(cfg, Path(out), args.jobs)
    except Exception as exc:  # CLI contract: nonzero exit, message on stderr
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
