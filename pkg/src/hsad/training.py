"""Self-supervised training with validation-driven model selection.

Each epoch: shuffle the training cubes, give every item a fresh geometric
augmentation and a fresh random mask, and minimize the reconstruction loss of
net(masked) against the unmasked original with Adam (decoupled weight decay).
After the epoch, score the validation cube by the maximum global Mahalanobis
distance of its reconstruction; the parameters at the peak of that metric are
kept, and training stops once the peak is `patience_epochs` old (ties do not
refresh it) or `max_epochs` is reached.

All randomness derives from TrainConfig.seed: stream (seed, 0) initializes
parameters, (seed, epoch) shuffles, (seed, epoch, item) drives item
augmentation/masking — so batch items could be prepared concurrently without
changing results.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .cube import HsiCube, normalize_symmetric, random_rotate_flip
from .detectors import DEFAULT_RIDGE_EPS, grx
from .masking import CUTMIX, CUTOUT, FillSpec, MaskParams, apply_mask, generate_mask_map
from .msgms import MsgmsConfig, _l2_loss_t, _msgms_loss_t
from .network import NetParams, NetworkConfig, _forward_t, _to_torch, forward, init_params

LOSS_MSGMS = "msgms"
LOSS_L2 = "l2"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 5e-6
    batch_size: int = 16
    max_epochs: int = 200
    patience_epochs: int = 30
    seed: int = 0
    fill_mode: str = CUTOUT
    mask_params: MaskParams = field(default_factory=MaskParams)
    loss: str = LOSS_MSGMS
    msgms_scales: int = 5
    msgms_c: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay <= 0:
            raise ValueError("learning_rate and weight_decay must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if not 1 <= self.patience_epochs <= self.max_epochs:
            raise ValueError(
                f"patience {self.patience_epochs} must lie in [1, {self.max_epochs}]"
            )
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.fill_mode not in (CUTOUT, CUTMIX):
            raise ValueError(f"fill_mode must be {CUTOUT!r} or {CUTMIX!r}")
        if self.loss not in (LOSS_MSGMS, LOSS_L2):
            raise ValueError(f"loss must be {LOSS_MSGMS!r} or {LOSS_L2!r}")

    def loss_config(self) -> MsgmsConfig:
        return MsgmsConfig(self.msgms_c, self.msgms_scales)


@dataclass
class DomainSearchState:
    """Running peak of the per-epoch validation metric."""

    best_metric: float = -math.inf
    best_epoch: int = 0
    best_params: NetParams | None = None
    epochs_since_peak: int = 0
    history: list[tuple[float, float]] = field(default_factory=list)

    def update(
        self, epoch: int, mean_loss: float, metric: float, params: NetParams | None
    ) -> bool:
        """Record one epoch; returns True when it sets a new peak.

        A metric merely equal to the running peak is not a new peak, so it
        does not reset the patience counter.
        """
        self.history.append((mean_loss, metric))
        if metric > self.best_metric:
            self.best_metric = metric
            self.best_epoch = epoch
            self.best_params = params.copy() if params is not None else None
            self.epochs_since_peak = 0
            return True
        self.epochs_since_peak += 1
        return False

    def should_stop(self, patience: int) -> bool:
        return self.epochs_since_peak >= patience


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_loss: float
    domain_metric: float
    is_peak: bool
    seconds: float


@dataclass(frozen=True)
class TrainReport:
    history: tuple[EpochRecord, ...]
    selected_epoch: int
    checkpoint_path: str | None = None


def domain_metric(
    params: NetParams, val_cube: HsiCube, ridge_eps: float = DEFAULT_RIDGE_EPS
) -> float:
    """Max over pixels of the global Mahalanobis score of forward(val_cube)."""
    return float(grx(forward(val_cube, params), ridge_eps).scores.max())


def augment_and_mask(
    cube: HsiCube,
    mask_params: MaskParams,
    fill_mode: str,
    donor_pool: list[tuple[str, HsiCube]] | None,
    rng: np.random.Generator,
    own_tag: str | None = None,
) -> tuple[HsiCube, HsiCube]:
    """One training pair: (masked cube, augmented+normalized original).

    Draw order: rotation/flips, then the mask map, then (CutMix only) the
    donor index among pool entries whose source tag differs from ``own_tag``.
    The donor is normalized to the network input range but not geometrically
    augmented.
    """
    augmented = random_rotate_flip(cube, rng)
    original, _ = normalize_symmetric(augmented)
    mask = generate_mask_map(original.height, original.width, mask_params, rng)
    if fill_mode == CUTMIX:
        eligible = [c for tag, c in (donor_pool or []) if tag != own_tag]
        if not eligible:
            raise ValueError("CutMix requires at least one donor with a different source tag")
        donor = eligible[int(rng.integers(0, len(eligible)))]
        fill = FillSpec(CUTMIX, normalize_symmetric(donor)[0])
    else:
        fill = FillSpec(CUTOUT)
    return apply_mask(original, mask, fill), original


class _Adam:
    """Adam with bias-corrected moments and decoupled weight decay:
    θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)."""

    def __init__(self, tensors, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.wd = lr, weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: torch.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: torch.zeros_like(v) for k, v in tensors.items()}

    @torch.no_grad()
    def step(self, tensors) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in tensors.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            update = (m / bc1) / ((v / bc2).sqrt() + self.eps) + self.wd * p
            p.add_(update, alpha=-self.lr)
            p.grad = None


def _stack(cubes: list[HsiCube]) -> torch.Tensor:
    arrs = [np.ascontiguousarray(c.values.transpose(2, 0, 1)) for c in cubes]
    return torch.from_numpy(np.stack(arrs))


def _snapshot(cfg: NetworkConfig, tensors: dict[str, torch.Tensor]) -> NetParams:
    return NetParams(cfg, {k: v.detach().numpy().copy() for k, v in tensors.items()})


def train(
    train_cubes: list[HsiCube],
    val_cube: HsiCube,
    net_cfg: NetworkConfig,
    train_cfg: TrainConfig,
    tags: list[str] | None = None,
    metric_fn=None,
) -> tuple[NetParams, TrainReport]:
    """Train and return (parameters at the metric peak, report).

    ``tags`` label each training cube's source (CutMix donors must come from
    a different tag; default: every cube is its own source). ``metric_fn``
    overrides the per-epoch validation metric (signature: NetParams -> float),
    used by scripted tests; the default reconstructs the normalized validation
    cube and takes its max global Mahalanobis score.
    """
    if not train_cubes:
        raise ValueError("training set is empty")
    h, w, b = net_cfg.input_size
    for i, c in enumerate(train_cubes):
        if (c.height, c.width, c.bands) != (h, w, b):
            raise ValueError(
                f"training cube {i} has shape {(c.height, c.width, c.bands)}, "
                f"expected {(h, w, b)} (no silent resizing)"
            )
    if (val_cube.height, val_cube.width, val_cube.bands) != (h, w, b):
        raise ValueError("validation cube does not match the network input size")
    if tags is not None and len(tags) != len(train_cubes):
        raise ValueError("tags must pair 1:1 with training cubes")
    if tags is None:
        tags = [str(i) for i in range(len(train_cubes))]
    pool = list(zip(tags, train_cubes))
    if train_cfg.fill_mode == CUTMIX and len(set(tags)) < 2:
        raise ValueError("CutMix training needs cubes from at least two source tags")

    seed = train_cfg.seed
    params0 = init_params(net_cfg, np.random.default_rng((seed, 0)))
    tensors = _to_torch(params0, requires_grad=True)
    optimizer = _Adam(tensors, train_cfg.learning_rate, train_cfg.weight_decay)
    loss_cfg = train_cfg.loss_config()

    val_norm, _ = normalize_symmetric(val_cube)
    if metric_fn is None:
        metric_fn = lambda p: domain_metric(p, val_norm)  # noqa: E731

    state = DomainSearchState()
    records: list[EpochRecord] = []
    n = len(train_cubes)
    for epoch in range(1, train_cfg.max_epochs + 1):
        started = time.perf_counter()
        order = np.random.default_rng((seed, epoch)).permutation(n)
        pairs = []
        for idx in order:
            item_rng = np.random.default_rng((seed, epoch, int(idx)))
            pairs.append(
                augment_and_mask(
                    train_cubes[idx],
                    train_cfg.mask_params,
                    train_cfg.fill_mode,
                    pool,
                    item_rng,
                    own_tag=tags[idx],
                )
            )
        loss_sum = 0.0
        for lo in range(0, n, train_cfg.batch_size):
            batch = pairs[lo : lo + train_cfg.batch_size]
            xm = _stack([p[0] for p in batch])
            xo = _stack([p[1] for p in batch])
            recon = _forward_t(xm, tensors, net_cfg)
            if train_cfg.loss == LOSS_MSGMS:
                loss = _msgms_loss_t(xo, recon, loss_cfg)
            else:
                loss = _l2_loss_t(xo, recon)
            loss.backward()
            optimizer.step(tensors)
            loss_sum += float(loss.detach()) * len(batch)
        mean_loss = loss_sum / n
        snapshot = _snapshot(net_cfg, tensors)
        metric = float(metric_fn(snapshot))
        is_peak = state.update(epoch, mean_loss, metric, snapshot)
        records.append(
            EpochRecord(epoch, mean_loss, metric, is_peak, time.perf_counter() - started)
        )
        if state.should_stop(train_cfg.patience_epochs):
            break

    assert state.best_params is not None
    return state.best_params, TrainReport(tuple(records), state.best_epoch)


def write_epoch_log(report: TrainReport, path: str | Path) -> None:
    """CSV: epoch, mean_loss, domain_metric, is_peak, seconds."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "domain_metric", "is_peak", "seconds"])
        for rec in report.history:
            writer.writerow(
                [rec.epoch, rec.mean_loss, rec.domain_metric, int(rec.is_peak), rec.seconds]
            )
