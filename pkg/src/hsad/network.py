"""U-shaped windowed-attention reconstruction network with a global residual.

Data flow (spatial side S, spectral size B, base width C):

    x ─ conv3x3 (B→C) ─ attn block (h₁) ─┬─ down ─ attn (h₂) ─┬─ down ─ attn (h₃)
                                         │skip₁               │skip₂       │
    x ─+─ conv3x3 (C→B) ─ attn (h₅) ─ 1x1 ─ cat ─ up ── attn (h₄) ─ 1x1 ─ cat ─ up

Each attention block runs two passes (plain then cyclically shifted windows);
per pass: f = f + MSA(f) (no pre-attention normalization), then
f = f + MLP(LN(f)). Downsampling is a 4x4 stride-2 conv (pad 1, no bias),
upsampling a 2x2 stride-2 transposed conv (no bias); skip fusion concatenates
and reduces with a bias-free 1x1 conv. Window side = resolution /
window_partition per stage; shift = floor(window/2).

Parameters live in numpy float64 dictionaries (NetParams); the forward /
backward passes run in torch float64 on CPU.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import truncnorm

from .cube import HsiCube
from .msgms import MsgmsConfig, _l2_loss_t, _msgms_loss_t

_LN_EPS = 1e-5


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint files."""


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters.

    channels_c: encoder output width C (stages run C, 2C, 4C, 2C, C).
    heads: per-stage attention head counts (enc-1, enc-2, bottleneck, dec-1, dec-2).
    window_partition: windows per side at every resolution (window side =
        side / window_partition, so 64² with partition 8 uses windows 8, 4, 2).
    mlp_ratio: hidden width multiplier of the per-pass MLP.
    input_size: (H, W, B) the network accepts.
    """

    channels_c: int = 32
    heads: tuple[int, int, int, int, int] = (2, 4, 8, 4, 2)
    window_partition: int = 8
    mlp_ratio: int = 4
    input_size: tuple[int, int, int] = (64, 64, 50)

    def __post_init__(self):
        h, w, b = self.input_size
        if self.channels_c < 1:
            raise ValueError("channels_c must be >= 1")
        if len(self.heads) != 5 or any(n < 1 for n in self.heads):
            raise ValueError(f"heads must be five positive counts, got {self.heads}")
        if self.window_partition < 1:
            raise ValueError("window_partition must be >= 1")
        if self.mlp_ratio < 1:
            raise ValueError("mlp_ratio must be >= 1")
        if b < 1:
            raise ValueError("input bands must be >= 1")
        if h % 4 or w % 4:
            raise ValueError(f"input size {h}x{w} must be divisible by 4")
        p = self.window_partition
        for side in (h, w, h // 2, w // 2, h // 4, w // 4):
            if side % p:
                raise ValueError(
                    f"side {side} not divisible by window_partition {p} "
                    f"(input {h}x{w})"
                )
        for dim, n in zip(self.stage_dims, self.heads):
            if dim % n:
                raise ValueError(f"stage width {dim} not divisible by {n} heads")

    @property
    def stage_dims(self) -> tuple[int, int, int, int, int]:
        c = self.channels_c
        return (c, 2 * c, 4 * c, 2 * c, c)

    @property
    def stage_resolutions(self) -> tuple[tuple[int, int], ...]:
        h, w, _ = self.input_size
        return ((h, w), (h // 2, w // 2), (h // 4, w // 4), (h // 2, w // 2), (h, w))

    def stage_window(self, stage: int) -> tuple[int, int]:
        hh, ww = self.stage_resolutions[stage]
        p = self.window_partition
        return hh // p, ww // p


def _expected_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Tensor name -> shape, in data-flow (and initialization) order."""
    h, w, b = cfg.input_size
    c, r = cfg.channels_c, cfg.mlp_ratio
    shapes: dict[str, tuple[int, ...]] = {"enc.w": (c, b, 3, 3), "enc.b": (c,)}

    def block(i: int):
        d = cfg.stage_dims[i - 1]
        wh, ww = cfg.stage_window(i - 1)
        n_heads = cfg.heads[i - 1]
        for pas in ("p1", "p2"):
            p = f"blk{i}.{pas}"
            shapes[f"{p}.qkv.w"] = (3 * d, d)
            shapes[f"{p}.qkv.b"] = (3 * d,)
            shapes[f"{p}.proj.w"] = (d, d)
            shapes[f"{p}.proj.b"] = (d,)
            shapes[f"{p}.bias.tab"] = ((2 * wh - 1) * (2 * ww - 1), n_heads)
            shapes[f"{p}.norm.g"] = (d,)
            shapes[f"{p}.norm.b"] = (d,)
            shapes[f"{p}.mlp1.w"] = (r * d, d)
            shapes[f"{p}.mlp1.b"] = (r * d,)
            shapes[f"{p}.mlp2.w"] = (d, r * d)
            shapes[f"{p}.mlp2.b"] = (d,)

    block(1)
    shapes["down1.w"] = (2 * c, c, 4, 4)
    block(2)
    shapes["down2.w"] = (4 * c, 2 * c, 4, 4)
    block(3)
    shapes["up1.w"] = (4 * c, 2 * c, 2, 2)  # transposed conv: (in, out, kh, kw)
    shapes["fuse1.w"] = (2 * c, 4 * c, 1, 1)
    block(4)
    shapes["up2.w"] = (2 * c, c, 2, 2)
    shapes["fuse2.w"] = (c, 2 * c, 1, 1)
    block(5)
    shapes["dec.w"] = (b, c, 3, 3)
    shapes["dec.b"] = (b,)
    return shapes


@dataclass(frozen=True)
class NetParams:
    """All learnable tensors (numpy float64) plus the config they belong to."""

    config: NetworkConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = _expected_shapes(self.config)
        if set(self.tensors) != set(expected):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ValueError(f"parameter names mismatch: missing {missing}, extra {extra}")
        clean = {}
        for name, shape in expected.items():
            t = np.asarray(self.tensors[name], dtype=np.float64)
            if t.shape != shape:
                raise ValueError(f"{name}: shape {t.shape} != expected {shape}")
            if not np.isfinite(t).all():
                raise ValueError(f"{name}: non-finite values")
            clean[name] = t
        object.__setattr__(self, "tensors", clean)

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "NetParams":
        return NetParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


@dataclass(frozen=True)
class FeatureMap:
    """Intermediate activation: float64 values of shape (height, width, channels)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError(f"feature map must be 3-d, got {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("feature map contains non-finite values")
        object.__setattr__(self, "values", v)


def init_params(
    cfg: NetworkConfig, rng: np.random.Generator, zero_residual: bool = True
) -> NetParams:
    """Draw fresh parameters.

    Attention and MLP weights: truncated normal, std 0.02, clipped at ±2σ.
    Conv kernels: uniform ±1/sqrt(fan_in). Biases, relative-position tables:
    zero; layernorm scale 1, shift 0. With ``zero_residual`` the decoder conv
    is zeroed so forward(x) == x exactly at initialization.
    """
    tensors: dict[str, np.ndarray] = {}
    for name, shape in _expected_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "b" or name.endswith(("bias.tab", "norm.b", "mlp1.b", "mlp2.b",
                                         "qkv.b", "proj.b")):
            tensors[name] = np.zeros(shape)
        elif name.endswith("norm.g"):
            tensors[name] = np.ones(shape)
        elif name.endswith((".qkv.w", ".proj.w", ".mlp1.w", ".mlp2.w")):
            tensors[name] = truncnorm.rvs(
                -2.0, 2.0, loc=0.0, scale=0.02, size=shape, random_state=rng
            )
        else:  # conv kernels: enc/down/up/fuse/dec
            if name == "dec.w" and zero_residual:
                tensors[name] = np.zeros(shape)
                continue
            if name.startswith("up"):  # transposed conv stores (in, out, kh, kw)
                fan_in = shape[0] * shape[2] * shape[3]
            else:
                fan_in = shape[1] * shape[2] * shape[3]
            bound = 1.0 / np.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return NetParams(cfg, tensors)


# ---------------------------------------------------------------------------
# torch internals
# ---------------------------------------------------------------------------

_ATTN_CACHE: dict[tuple, tuple[torch.Tensor, torch.Tensor | None]] = {}


def _to_torch(params: NetParams, requires_grad: bool = False) -> dict[str, torch.Tensor]:
    out = {}
    for name, arr in params.tensors.items():
        t = torch.from_numpy(arr.copy())
        t.requires_grad_(requires_grad)
        out[name] = t
    return out


def _rel_position_index(wh: int, ww: int) -> torch.Tensor:
    """Token-pair -> row of the (2wh-1)(2ww-1) relative-position table."""
    rows = np.repeat(np.arange(wh), ww)
    cols = np.tile(np.arange(ww), wh)
    dr = rows[:, None] - rows[None, :] + (wh - 1)
    dc = cols[:, None] - cols[None, :] + (ww - 1)
    return torch.from_numpy((dr * (2 * ww - 1) + dc).astype(np.int64))


def _seam_mask(h: int, w: int, wh: int, ww: int, sh: int, sw: int) -> torch.Tensor | None:
    """Additive (-inf) mask blocking pairs carried across the cyclic seam.

    Standard shifted-window construction: the rolled map is labeled with one
    region id per (row band x column band), bands being [0, L-window),
    [L-window, L-shift), [L-shift, L); tokens in the same window but with
    different labels (i.e. separated by the wrap) may not attend.
    """
    if not sh and not sw:
        return None
    img = np.zeros((h, w), dtype=np.int64)
    row_bands = [slice(0, h - wh), slice(h - wh, h - sh), slice(h - sh, h)] if sh else [slice(None)]
    col_bands = [slice(0, w - ww), slice(w - ww, w - sw), slice(w - sw, w)] if sw else [slice(None)]
    cnt = 0
    for rs in row_bands:
        for cs in col_bands:
            img[rs, cs] = cnt
            cnt += 1
    nh, nw = h // wh, w // ww
    ids = img.reshape(nh, wh, nw, ww).transpose(0, 2, 1, 3).reshape(nh * nw, wh * ww)
    blocked = ids[:, :, None] != ids[:, None, :]
    mask = np.where(blocked, -np.inf, 0.0)
    return torch.from_numpy(mask)


def _attn_constants(wh: int, ww: int, h: int, w: int, sh: int, sw: int):
    key = (wh, ww, h, w, sh, sw)
    if key not in _ATTN_CACHE:
        _ATTN_CACHE[key] = (_rel_position_index(wh, ww), _seam_mask(h, w, wh, ww, sh, sw))
    return _ATTN_CACHE[key]


def _window_attention_t(
    x: torch.Tensor,
    tp: dict[str, torch.Tensor],
    prefix: str,
    heads: int,
    wh: int,
    ww: int,
    sh: int,
    sw: int,
    return_probs: bool = False,
):
    """Multi-head self-attention over (shifted) non-overlapping windows.

    x: (N, H, W, D) channels-last. Returns the attention branch output (same
    shape); with ``return_probs`` also the softmax weights as
    (N, windows, heads, tokens, tokens).
    """
    n, h, w, d = x.shape
    index, mask = _attn_constants(wh, ww, h, w, sh, sw)
    if sh or sw:
        x = torch.roll(x, (-sh, -sw), dims=(1, 2))
    nh, nw = h // wh, w // ww
    tokens = wh * ww
    xw = (
        x.reshape(n, nh, wh, nw, ww, d)
        .permute(0, 1, 3, 2, 4, 5)
        .reshape(n * nh * nw, tokens, d)
    )
    qkv = F.linear(xw, tp[f"{prefix}.qkv.w"], tp[f"{prefix}.qkv.b"])
    hd = d // heads
    q, k, v = (
        qkv.reshape(-1, tokens, 3, heads, hd).permute(2, 0, 3, 1, 4).unbind(0)
    )
    logits = (q @ k.transpose(-2, -1)) * hd**-0.5
    bias = tp[f"{prefix}.bias.tab"][index.reshape(-1)]
    logits = logits + bias.reshape(tokens, tokens, heads).permute(2, 0, 1)
    if mask is not None:
        logits = logits.reshape(n, nh * nw, heads, tokens, tokens) + mask[:, None, :, :]
        logits = logits.reshape(n * nh * nw, heads, tokens, tokens)
    probs = torch.softmax(logits, dim=-1)
    out = (probs @ v).permute(0, 2, 1, 3).reshape(-1, tokens, d)
    out = F.linear(out, tp[f"{prefix}.proj.w"], tp[f"{prefix}.proj.b"])
    out = (
        out.reshape(n, nh, nw, wh, ww, d)
        .permute(0, 1, 3, 2, 4, 5)
        .reshape(n, h, w, d)
    )
    if sh or sw:
        out = torch.roll(out, (sh, sw), dims=(1, 2))
    if return_probs:
        return out, probs.reshape(n, nh * nw, heads, tokens, tokens)
    return out


def _swin_block_t(
    x: torch.Tensor, tp: dict[str, torch.Tensor], name: str, heads: int, wh: int, ww: int
) -> torch.Tensor:
    """Two attention passes (plain, then shifted by half a window).

    Input/output are (N, D, H, W). Per pass: f = f + MSA(f) with no
    pre-attention normalization, then f = f + MLP(LN(f)).
    """
    f = x.permute(0, 2, 3, 1)
    for pas, (sh, sw) in (("p1", (0, 0)), ("p2", (wh // 2, ww // 2))):
        prefix = f"{name}.{pas}"
        f = f + _window_attention_t(f, tp, prefix, heads, wh, ww, sh, sw)
        g = F.layer_norm(f, (f.shape[-1],), tp[f"{prefix}.norm.g"], tp[f"{prefix}.norm.b"], _LN_EPS)
        g = F.linear(g, tp[f"{prefix}.mlp1.w"], tp[f"{prefix}.mlp1.b"])
        g = F.gelu(g)
        f = f + F.linear(g, tp[f"{prefix}.mlp2.w"], tp[f"{prefix}.mlp2.b"])
    return f.permute(0, 3, 1, 2)


def _body_t(x: torch.Tensor, tp: dict[str, torch.Tensor], cfg: NetworkConfig) -> torch.Tensor:
    """The residual branch on an (N, B, H, W) batch (everything but the +x)."""
    h, w, b = cfg.input_size
    if tuple(x.shape[1:]) != (b, h, w):
        raise ValueError(f"input shape {tuple(x.shape[1:])} != config {(b, h, w)}")
    hd = cfg.heads
    f = F.conv2d(x, tp["enc.w"], tp["enc.b"], padding=1)
    f = _swin_block_t(f, tp, "blk1", hd[0], *cfg.stage_window(0))
    skip1 = f
    f = F.conv2d(f, tp["down1.w"], None, stride=2, padding=1)
    f = _swin_block_t(f, tp, "blk2", hd[1], *cfg.stage_window(1))
    skip2 = f
    f = F.conv2d(f, tp["down2.w"], None, stride=2, padding=1)
    f = _swin_block_t(f, tp, "blk3", hd[2], *cfg.stage_window(2))
    f = F.conv_transpose2d(f, tp["up1.w"], None, stride=2)
    f = F.conv2d(torch.cat([f, skip2], dim=1), tp["fuse1.w"], None)
    f = _swin_block_t(f, tp, "blk4", hd[3], *cfg.stage_window(3))
    f = F.conv_transpose2d(f, tp["up2.w"], None, stride=2)
    f = F.conv2d(torch.cat([f, skip1], dim=1), tp["fuse2.w"], None)
    f = _swin_block_t(f, tp, "blk5", hd[4], *cfg.stage_window(4))
    return F.conv2d(f, tp["dec.w"], tp["dec.b"], padding=1)


def _forward_t(x: torch.Tensor, tp: dict[str, torch.Tensor], cfg: NetworkConfig) -> torch.Tensor:
    """Full reconstruction: global residual around the body."""
    return x + _body_t(x, tp, cfg)


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def forward(x: HsiCube, params: NetParams) -> HsiCube:
    """Reconstruct a cube; output shape equals input shape (global residual)."""
    cfg = params.config
    h, w, b = cfg.input_size
    if (x.height, x.width, x.bands) != (h, w, b):
        raise ValueError(
            f"cube shape {(x.height, x.width, x.bands)} != network input {(h, w, b)}"
        )
    xt = torch.from_numpy(np.ascontiguousarray(x.values.transpose(2, 0, 1))).unsqueeze(0)
    with torch.no_grad():
        out = _forward_t(xt, _to_torch(params), cfg)
    return HsiCube(out.squeeze(0).numpy().transpose(1, 2, 0).copy())


def body_output(x: HsiCube, params: NetParams) -> HsiCube:
    """The residual branch alone: forward(x) == x + body_output(x) bitwise."""
    cfg = params.config
    h, w, b = cfg.input_size
    if (x.height, x.width, x.bands) != (h, w, b):
        raise ValueError(
            f"cube shape {(x.height, x.width, x.bands)} != network input {(h, w, b)}"
        )
    xt = torch.from_numpy(np.ascontiguousarray(x.values.transpose(2, 0, 1))).unsqueeze(0)
    with torch.no_grad():
        out = _body_t(xt, _to_torch(params), cfg)
    return HsiCube(out.squeeze(0).numpy().transpose(1, 2, 0).copy())


def swin_block(
    f: FeatureMap, weights: dict[str, np.ndarray], heads: int, window: int
) -> FeatureMap:
    """One attention block on a single feature map (square windows)."""
    h, w, d = f.values.shape
    if h % window or w % window:
        raise ValueError(f"feature map {h}x{w} not divisible by window {window}")
    if d % heads:
        raise ValueError(f"channels {d} not divisible by {heads} heads")
    tp = {f"blk.{k}": torch.from_numpy(np.asarray(v, dtype=np.float64).copy())
          for k, v in weights.items()}
    xt = torch.from_numpy(np.ascontiguousarray(f.values.transpose(2, 0, 1))).unsqueeze(0)
    with torch.no_grad():
        out = _swin_block_t(xt, tp, "blk", heads, window, window)
    return FeatureMap(out.squeeze(0).numpy().transpose(1, 2, 0).copy())


def window_attention_probs(
    f: FeatureMap, weights: dict[str, np.ndarray], heads: int, window: int, shifted: bool
) -> np.ndarray:
    """Softmax attention weights of one pass: (windows, heads, tokens, tokens)."""
    h, w, d = f.values.shape
    tp = {f"blk.{k}": torch.from_numpy(np.asarray(v, dtype=np.float64).copy())
          for k, v in weights.items()}
    xt = torch.from_numpy(np.ascontiguousarray(f.values.transpose(2, 0, 1))).unsqueeze(0)
    shift = window // 2 if shifted else 0
    prefix = "blk.p2" if shifted else "blk.p1"
    with torch.no_grad():
        _, probs = _window_attention_t(
            xt.permute(0, 2, 3, 1), tp, prefix, heads, window, window, shift, shift,
            return_probs=True,
        )
    return probs.squeeze(0).numpy().copy()


def loss_and_grad(
    x_masked: HsiCube,
    x_orig: HsiCube,
    params: NetParams,
    loss_cfg: MsgmsConfig | None = None,
    loss: str = "msgms",
) -> tuple[float, dict[str, np.ndarray]]:
    """Reconstruction loss of forward(x_masked) against x_orig, plus exact
    analytic gradients for every parameter tensor."""
    if x_masked.values.shape != x_orig.values.shape:
        raise ValueError(
            f"shape mismatch {x_masked.values.shape} vs {x_orig.values.shape}"
        )
    cfg = params.config
    tp = _to_torch(params, requires_grad=True)
    xm = torch.from_numpy(np.ascontiguousarray(x_masked.values.transpose(2, 0, 1))).unsqueeze(0)
    xo = torch.from_numpy(np.ascontiguousarray(x_orig.values.transpose(2, 0, 1))).unsqueeze(0)
    recon = _forward_t(xm, tp, cfg)
    if loss == "msgms":
        value = _msgms_loss_t(xo, recon, loss_cfg or MsgmsConfig())
    elif loss == "l2":
        value = _l2_loss_t(xo, recon)
    else:
        raise ValueError(f"unknown loss {loss!r}")
    value.backward()
    grads = {
        name: (t.grad.numpy().copy() if t.grad is not None else np.zeros(t.shape))
        for name, t in tp.items()
    }
    return float(value.detach()), grads


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: NetParams, stem: str | Path) -> None:
    """Write ``<stem>.json`` manifest + ``<stem>.bin`` f32le payload."""
    stem = Path(stem)
    cfg = params.config
    entries = []
    chunks = []
    offset = 0
    for name, arr in params.tensors.items():
        raw = arr.astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": 1,
        "config": {
            "channels_c": cfg.channels_c,
            "heads": list(cfg.heads),
            "window_partition": cfg.window_partition,
            "mlp_ratio": cfg.mlp_ratio,
            "input_size": list(cfg.input_size),
        },
        "payload": stem.name + ".bin",
        "tensors": entries,
    }
    stem.with_suffix(".json").write_text(json.dumps(manifest, sort_keys=True) + "\n")
    stem.with_suffix(".bin").write_bytes(b"".join(chunks))


def load_checkpoint(stem: str | Path) -> NetParams:
    """Read a checkpoint pair; values widen from f32 to float64."""
    stem = Path(stem)
    manifest_path = stem.with_suffix(".json")
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing checkpoint manifest {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed manifest {manifest_path}: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format_version") != 1:
        raise CheckpointError(f"{manifest_path}: unsupported checkpoint format")
    c = manifest["config"]
    cfg = NetworkConfig(
        channels_c=c["channels_c"],
        heads=tuple(c["heads"]),
        window_partition=c["window_partition"],
        mlp_ratio=c["mlp_ratio"],
        input_size=tuple(c["input_size"]),
    )
    payload_path = stem.parent / manifest["payload"]
    if not payload_path.exists():
        raise FileNotFoundError(f"missing checkpoint payload {payload_path}")
    raw = payload_path.read_bytes()
    tensors = {}
    total = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 4
        total += size
        chunk = raw[entry["offset"] : entry["offset"] + size]
        if len(chunk) != size:
            raise CheckpointError(
                f"{payload_path}: payload truncated at tensor {entry['name']}"
            )
        tensors[entry["name"]] = (
            np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shape)
        )
    if total != len(raw):
        raise CheckpointError(
            f"{payload_path}: payload size {len(raw)} != manifest total {total}"
        )
    return NetParams(cfg, tensors)  # shape/name validation happens here
