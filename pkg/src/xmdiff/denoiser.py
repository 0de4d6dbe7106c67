"""Noise-prediction network: a U-shaped residual conv net with attention.

The condition image enters by channel concatenation at the input; the
sinusoidal timestep embedding and a learned modality-indicator embedding
are summed and injected into every residual block. Indicator index 2 is
a dedicated learned "no indicator" vector used for the unconditional
guidance branch and for training dropout, so that branch stays trainable.

torch is an internal engine here. Public entry points take and return
numpy arrays; parameters travel as immutable named-tensor snapshots so
sampling never races a concurrent training step.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import as_array
from .errors import CheckpointError, ConfigError


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture knobs. Defaults give a ~1M-parameter net for 32x64 images."""

    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2)
    attention_levels: tuple[int, ...] = (1,)
    num_res_blocks: int = 1
    image_size: tuple[int, int] = (32, 64)
    in_channels: int = 4  # image channels + 1 condition channel
    embedding_dim: int = 64
    use_condition: bool = True

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def image_channels(self) -> int:
        return self.in_channels - (1 if self.use_condition else 0)

    def check(self) -> None:
        if self.base_channels < 2 or self.base_channels % 2:
            raise ConfigError(f"base_channels must be a positive even int, got {self.base_channels}")
        if not self.channel_multipliers or any(m < 1 for m in self.channel_multipliers):
            raise ConfigError(f"bad channel_multipliers {self.channel_multipliers}")
        if any(not 0 <= a < self.levels for a in self.attention_levels):
            raise ConfigError(
                f"attention_levels {self.attention_levels} outside [0, {self.levels})"
            )
        if self.num_res_blocks < 1:
            raise ConfigError(f"num_res_blocks must be >= 1, got {self.num_res_blocks}")
        if self.embedding_dim < 1:
            raise ConfigError(f"embedding_dim must be >= 1, got {self.embedding_dim}")
        if self.image_channels not in (1, 3):
            raise ConfigError(
                f"in_channels {self.in_channels} implies {self.image_channels} image "
                "channels; expected 1 or 3"
            )
        div = 2 ** (self.levels - 1)
        h, w = self.image_size
        if h % div or w % div:
            raise ConfigError(f"image size {self.image_size} not divisible by {div}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        for key in ("channel_multipliers", "attention_levels", "image_size"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def config_hash(cfg: DenoiserConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _groups(channels: int) -> int:
    # GroupNorm group count that always divides the channel count
    return math.gcd(8, channels)


def _sinusoidal(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half
    )
    args = t.to(torch.float32)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class _ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.conv2._zero_init = True
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class _Attention(nn.Module):
    """Single-head self-attention over flattened spatial positions."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        self.proj._zero_init = True

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        weights = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bij,bcj->bci", weights, v).reshape(b, c, h, w)
        return x + self.proj(out)


class _NoAttention(nn.Identity):
    pass


class UNet(nn.Module):
    """Architecture skeleton; parameters are owned by DenoiserParams snapshots."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        cfg.check()
        self.cfg = cfg
        chs = [cfg.base_channels * m for m in cfg.channel_multipliers]
        emb = cfg.embedding_dim

        self.time_lin1 = nn.Linear(cfg.base_channels, emb)
        self.time_lin2 = nn.Linear(emb, emb)
        self.indicator = nn.Embedding(3, emb)
        self.stem = nn.Conv2d(cfg.in_channels, chs[0], 3, padding=1)

        def attn_or_skip(level: int, ch: int) -> nn.Module:
            return _Attention(ch) if level in cfg.attention_levels else _NoAttention()

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        skip_chs = [chs[0]]
        ch = chs[0]
        for level, out_ch in enumerate(chs):
            for _ in range(cfg.num_res_blocks):
                self.down_res.append(_ResBlock(ch, out_ch, emb))
                self.down_attn.append(attn_or_skip(level, out_ch))
                ch = out_ch
                skip_chs.append(ch)
            if level < len(chs) - 1:
                self.downsamples.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                skip_chs.append(ch)

        self.mid_res1 = _ResBlock(ch, ch, emb)
        self.mid_attn = _Attention(ch)
        self.mid_res2 = _ResBlock(ch, ch, emb)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for level in reversed(range(len(chs))):
            out_ch = chs[level]
            for _ in range(cfg.num_res_blocks + 1):
                self.up_res.append(_ResBlock(ch + skip_chs.pop(), out_ch, emb))
                self.up_attn.append(attn_or_skip(level, out_ch))
                ch = out_ch
            if level > 0:
                self.upsamples.append(
                    nn.Sequential(
                        nn.Upsample(scale_factor=2, mode="nearest"),
                        nn.Conv2d(ch, ch, 3, padding=1),
                    )
                )

        self.out_norm = nn.GroupNorm(_groups(ch), ch)
        self.out_conv = nn.Conv2d(ch, cfg.image_channels, 3, padding=1)
        self.out_conv._zero_init = True

    def forward(self, x: torch.Tensor, t: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        # match the module dtype so the net also runs in double precision
        emb = _sinusoidal(t, cfg.base_channels).to(self.time_lin1.weight.dtype)
        emb = self.time_lin2(F.silu(self.time_lin1(emb)))
        emb = emb + self.indicator(e)

        h = self.stem(x)
        skips = [h]
        idx = 0
        for level in range(cfg.levels):
            for _ in range(cfg.num_res_blocks):
                h = self.down_attn[idx](self.down_res[idx](h, emb))
                skips.append(h)
                idx += 1
            if level < cfg.levels - 1:
                h = self.downsamples[level](h)
                skips.append(h)

        h = self.mid_res2(self.mid_attn(self.mid_res1(h, emb)), emb)

        idx = 0
        up_idx = 0
        for level in reversed(range(cfg.levels)):
            for _ in range(cfg.num_res_blocks + 1):
                h = self.up_res[idx](torch.cat([h, skips.pop()], dim=1), emb)
                h = self.up_attn[idx](h)
                idx += 1
            if level > 0:
                h = self.upsamples[up_idx](h)
                up_idx += 1

        return self.out_conv(F.silu(self.out_norm(h)))


@dataclass(frozen=True)
class DenoiserParams:
    """Immutable named-parameter snapshot of a UNet."""

    cfg: DenoiserConfig
    tensors: "OrderedDict[str, torch.Tensor]" = field(repr=False)

    @classmethod
    def from_module(cls, net: UNet) -> "DenoiserParams":
        tensors = OrderedDict(
            (name, value.detach().clone()) for name, value in net.state_dict().items()
        )
        return cls(cfg=net.cfg, tensors=tensors)

    def count(self) -> int:
        return sum(v.numel() for v in self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: value.numpy().copy() for name, value in self.tensors.items()}


def build_module(cfg: DenoiserConfig) -> UNet:
    return UNet(cfg)


def parameter_count(cfg: DenoiserConfig) -> int:
    return sum(p.numel() for p in build_module(cfg).parameters())


def init_params(cfg: DenoiserConfig, seed: int) -> DenoiserParams:
    """Deterministic init: fan-in-scaled uniform weights, zeroed output layers.

    Every residual block's second conv, every attention projection, and
    the final output conv start at zero, so a freshly initialized network
    predicts eps_hat identically zero. Embeddings start at N(0, 0.02).
    """
    net = build_module(cfg)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                bound = 1.0 / math.sqrt(module.weight[0].numel())
                module.weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.uniform_(-bound, bound, generator=gen)
            elif isinstance(module, nn.Embedding):
                module.weight.normal_(0.0, 0.02, generator=gen)
            elif isinstance(module, nn.GroupNorm):
                module.weight.fill_(1.0)
                module.bias.fill_(0.0)
        for module in net.modules():
            if getattr(module, "_zero_init", False):
                module.weight.zero_()
                module.bias.zero_()
    return DenoiserParams.from_module(net)


_SKELETONS: dict[DenoiserConfig, UNet] = {}


def _skeleton(cfg: DenoiserConfig) -> UNet:
    net = _SKELETONS.get(cfg)
    if net is None:
        net = build_module(cfg)
        net.eval()
        _SKELETONS[cfg] = net
    return net


def _per_item_int(values, batch: int, name: str) -> torch.Tensor:
    arr = np.asarray(values)
    if arr.ndim == 0:
        arr = np.full(batch, int(arr))
    if arr.shape != (batch,):
        raise ValueError(f"{name} must be a scalar or length-{batch} vector, got {arr.shape}")
    return torch.from_numpy(arr.astype(np.int64))


def predict_eps(params: DenoiserParams, x_t, t, c, e) -> np.ndarray:
    """eps_hat for a batch: numpy in, numpy out, shape preserved.

    `t` and `e` may be scalars or per-item vectors; `c` must be None when
    the config declares no condition channel.
    """
    cfg = params.cfg
    x = np.ascontiguousarray(as_array(x_t), dtype=np.float32)
    if x.ndim != 4 or x.shape[1] != cfg.image_channels:
        raise ValueError(
            f"expected [B,{cfg.image_channels},H,W] input, got shape {x.shape}"
        )
    batch = x.shape[0]
    t_vec = _per_item_int(t, batch, "t")
    if torch.any(t_vec < 1):
        raise ValueError(f"timesteps must be >= 1, got {t_vec.tolist()}")
    e_vec = _per_item_int(e, batch, "e")
    if torch.any((e_vec < 0) | (e_vec > 2)):
        raise ValueError(f"modality indicator must be 0, 1 or 2, got {e_vec.tolist()}")

    if cfg.use_condition:
        if c is None:
            raise ValueError("this model requires a condition image")
        cond = np.ascontiguousarray(as_array(c), dtype=np.float32)
        if cond.shape != (batch, 1) + x.shape[2:]:
            raise ValueError(
                f"condition shape {cond.shape} does not match images {x.shape}"
            )
        inp = torch.cat([torch.from_numpy(x), torch.from_numpy(cond)], dim=1)
    else:
        if c is not None:
            raise ValueError("this model was built without a condition channel")
        inp = torch.from_numpy(x)

    net = _skeleton(cfg)
    with torch.no_grad():
        out = torch.func.functional_call(net, params.tensors, (inp, t_vec, e_vec))
    return out.numpy()


def save_checkpoint(path, params: DenoiserParams, step: int, seed: int, extra: dict | None = None):
    """Named-array archive: one entry per parameter plus a JSON manifest."""
    manifest = {
        "config": params.cfg.to_dict(),
        "config_hash": config_hash(params.cfg),
        "step": int(step),
        "seed": int(seed),
        "extra": extra or {},
    }
    blob = np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8)
    arrays = {f"param.{name}": value.numpy() for name, value in params.tensors.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __manifest__=blob, **arrays)


def load_checkpoint(path) -> tuple[DenoiserParams, dict]:
    try:
        archive = np.load(path)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with archive:
        if "__manifest__" not in archive:
            raise CheckpointError(f"checkpoint {path} has no manifest")
        manifest = json.loads(bytes(archive["__manifest__"].tobytes()).decode())
        cfg = DenoiserConfig.from_dict(manifest["config"])
        if config_hash(cfg) != manifest["config_hash"]:
            raise CheckpointError(f"checkpoint {path} manifest hash mismatch")
        tensors = OrderedDict()
        for key in archive.files:
            if key.startswith("param."):
                tensors[key[len("param.") :]] = torch.from_numpy(np.array(archive[key]))
    params = DenoiserParams(cfg=cfg, tensors=tensors)
    expected = {name for name, _ in build_module(cfg).state_dict().items()}
    if set(tensors) != expected:
        raise CheckpointError(f"checkpoint {path} parameter names do not match the config")
    return params, manifest
