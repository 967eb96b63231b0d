"""FiLM-conditioned 1D U-Net noise predictor with its training machinery.

The network is built on torch; gradients come from reverse-mode autodiff and
are checked against finite differences in the test suite. The optimizer
(decoupled-weight-decay Adam), EMA and LR schedule are explicit here so their
update rules are pinned by this module rather than by a library version.
"""

from __future__ import annotations

import io
import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn

CHECKPOINT_MAGIC = b"FDPC"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    input_channels: int = 2
    down_dims: tuple[int, ...] = (32, 64, 128)
    kernel_size: int = 5
    groupnorm_groups: int = 8
    step_embed_dim: int = 64
    cond_dim: int = 63

    def __post_init__(self):
        object.__setattr__(self, "down_dims", tuple(int(d) for d in self.down_dims))
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel size must be odd")
        for d in self.down_dims:
            if d % self.groupnorm_groups != 0:
                raise ValueError(f"down dim {d} not divisible by {self.groupnorm_groups} groups")

    @property
    def levels(self) -> int:
        return len(self.down_dims)


def sinusoidal_embedding(k, dim: int) -> np.ndarray:
    """Positional embedding of a diffusion step: [sin(k w_i) | cos(k w_i)],
    w_i = 10000^(-2i/dim)."""
    if dim % 2 != 0:
        raise ValueError("embedding dimension must be even")
    half = dim // 2
    freqs = 10000.0 ** (-2.0 * np.arange(half) / dim)
    angles = float(k) * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


def film(x: np.ndarray, gamma_beta: np.ndarray) -> np.ndarray:
    """Per-channel affine modulation of a (C, T) feature map.

    gamma_beta holds 2C values: scales first, then biases.
    """
    x = np.asarray(x, dtype=float)
    gb = np.asarray(gamma_beta, dtype=float)
    c = x.shape[0]
    if gb.shape != (2 * c,):
        raise ValueError(f"expected {2 * c} modulation values, got {gb.shape}")
    return gb[:c, None] * x + gb[c:, None]


class _StepEncoder(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        half = dim // 2
        freqs = 10000.0 ** (-2.0 * torch.arange(half, dtype=torch.float64) / dim)
        self.register_buffer("freqs", freqs)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.Mish(), nn.Linear(4 * dim, dim))

    def forward(self, k: torch.Tensor) -> torch.Tensor:
        angles = k.to(self.freqs.dtype)[:, None] * self.freqs[None, :]
        emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
        return self.mlp(emb.to(next(self.mlp.parameters()).dtype))


class _CondResBlock(nn.Module):
    """conv -> GN -> Mish -> FiLM -> conv -> GN -> Mish, with a 1x1 skip."""

    def __init__(self, cin: int, cout: int, cond_dim: int, kernel: int, groups: int):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv1d(cin, cout, kernel, padding=pad)
        self.norm1 = nn.GroupNorm(groups, cout)
        self.film_proj = nn.Linear(cond_dim, 2 * cout)
        self.conv2 = nn.Conv1d(cout, cout, kernel, padding=pad)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.act = nn.Mish()
        self.skip = nn.Conv1d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        y = self.act(self.norm1(self.conv1(x)))
        gb = self.film_proj(cond).unsqueeze(-1)
        gamma, beta = gb.chunk(2, dim=1)
        y = gamma * y + beta
        y = self.act(self.norm2(self.conv2(y)))
        return y + self.skip(x)


class NoisePredictor(nn.Module):
    """Conditional 1D U-Net predicting the injected noise of an action sequence."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        dims = config.down_dims
        cond = config.step_embed_dim + config.cond_dim
        k, g = config.kernel_size, config.groupnorm_groups

        self.step_encoder = _StepEncoder(config.step_embed_dim)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        cin = config.input_channels
        for i, d in enumerate(dims):
            self.down_blocks.append(nn.ModuleList([
                _CondResBlock(cin, d, cond, k, g),
                _CondResBlock(d, d, cond, k, g),
            ]))
            if i < len(dims) - 1:
                self.downsamples.append(nn.Conv1d(d, d, 3, stride=2, padding=1))
            cin = d

        self.mid_blocks = nn.ModuleList([
            _CondResBlock(dims[-1], dims[-1], cond, k, g),
            _CondResBlock(dims[-1], dims[-1], cond, k, g),
        ])

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in range(len(dims) - 1, -1, -1):
            dout = dims[i - 1] if i > 0 else dims[0]
            self.up_blocks.append(nn.ModuleList([
                _CondResBlock(2 * dims[i], dout, cond, k, g),
                _CondResBlock(dout, dout, cond, k, g),
            ]))
            if i > 0:
                self.upsamples.append(nn.ConvTranspose1d(dout, dout, 4, stride=2, padding=1))

        self.final_conv = nn.Conv1d(dims[0], config.input_channels, 1)
        self._init_weights()

    def _init_weights(self):
        for mod in self.modules():
            if isinstance(mod, (nn.Conv1d, nn.ConvTranspose1d, nn.Linear)):
                if mod.bias is not None:
                    nn.init.zeros_(mod.bias)
            if isinstance(mod, _CondResBlock):
                # identity-start FiLM: gamma = 1, beta = 0
                nn.init.zeros_(mod.film_proj.weight)
                cout = mod.film_proj.out_features // 2
                with torch.no_grad():
                    mod.film_proj.bias[:cout] = 1.0
                    mod.film_proj.bias[cout:] = 0.0

    def forward(self, noisy: torch.Tensor, k: torch.Tensor, obs: torch.Tensor) -> torch.Tensor:
        """noisy: (B, T, C_in); k: (B,) integer steps; obs: (B, cond_dim)."""
        t_len = noisy.shape[1]
        if t_len % (2 ** (self.config.levels - 1)) != 0:
            raise ValueError(f"sequence length {t_len} not divisible by {2 ** (self.config.levels - 1)}")
        if obs.shape[-1] != self.config.cond_dim:
            raise ValueError(f"obs length {obs.shape[-1]} != cond_dim {self.config.cond_dim}")
        cond = torch.cat([self.step_encoder(k), obs], dim=-1)
        x = noisy.transpose(1, 2)
        skips = []
        for i, (b1, b2) in enumerate(self.down_blocks):
            x = b2(b1(x, cond), cond)
            skips.append(x)
            if i < len(self.downsamples):
                x = self.downsamples[i](x)
        for b in self.mid_blocks:
            x = b(x, cond)
        for i, (b1, b2) in enumerate(self.up_blocks):
            x = torch.cat([x, skips.pop()], dim=1)
            x = b2(b1(x, cond), cond)
            if i < len(self.upsamples):
                x = self.upsamples[i](x)
        return self.final_conv(x).transpose(1, 2)


def build_model(config: NetworkConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> NoisePredictor:
    """Deterministically initialized network."""
    torch.manual_seed(seed)
    model = NoisePredictor(config)
    return model.to(dtype)


def parameter_store(model: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    """Named parameters in declaration (depth-first) order."""
    return OrderedDict(model.named_parameters())


def unet_forward(model: NoisePredictor, noisy: np.ndarray, k: int, obs: np.ndarray) -> np.ndarray:
    """Inference-mode forward pass on numpy arrays; accepts (T, C) or (B, T, C)."""
    dtype = next(model.parameters()).dtype
    arr = np.asarray(noisy, dtype=float)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    obs_arr = np.asarray(obs, dtype=float)
    if obs_arr.ndim == 1:
        obs_arr = np.broadcast_to(obs_arr, (arr.shape[0], obs_arr.shape[0])).copy()
    with torch.no_grad():
        out = model(
            torch.as_tensor(arr, dtype=dtype),
            torch.full((arr.shape[0],), int(k), dtype=torch.long),
            torch.as_tensor(np.ascontiguousarray(obs_arr), dtype=dtype),
        )
    out = out.numpy()
    return out[0] if squeeze else out


def loss_gradients(
    model: NoisePredictor,
    obs: torch.Tensor,
    noisy: torch.Tensor,
    k: torch.Tensor,
    eps_true: torch.Tensor,
) -> tuple[float, "OrderedDict[str, torch.Tensor]"]:
    """MSE loss of the predicted noise and its gradients, aligned with
    parameter_store order. Accepts numpy arrays or tensors."""
    dtype = next(model.parameters()).dtype
    obs = torch.as_tensor(np.asarray(obs), dtype=dtype)
    noisy = torch.as_tensor(np.asarray(noisy), dtype=dtype)
    k = torch.as_tensor(np.asarray(k), dtype=torch.long)
    eps_true = torch.as_tensor(np.asarray(eps_true), dtype=dtype)
    model.zero_grad(set_to_none=True)
    pred = model(noisy, k, obs)
    loss = torch.mean((pred - eps_true) ** 2)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite training loss")
    loss.backward()
    grads = OrderedDict()
    for name, p in model.named_parameters():
        g = p.grad
        grads[name] = torch.zeros_like(p) if g is None else g.detach().clone()
        if not torch.all(torch.isfinite(grads[name])):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    return float(loss.detach()), grads


@dataclass
class OptimizerState:
    exp_avg: "OrderedDict[str, torch.Tensor]"
    exp_avg_sq: "OrderedDict[str, torch.Tensor]"
    step: int = 0
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: "OrderedDict[str, torch.Tensor]", weight_decay: float = 1e-6) -> "OptimizerState":
        return cls(
            exp_avg=OrderedDict((n, torch.zeros_like(p)) for n, p in params.items()),
            exp_avg_sq=OrderedDict((n, torch.zeros_like(p)) for n, p in params.items()),
            weight_decay=weight_decay,
        )


BASE_LR = 1.05e-4


def adamw_step(
    params: "OrderedDict[str, torch.Tensor]",
    grads: "OrderedDict[str, torch.Tensor]",
    opt: OptimizerState,
    lr: float,
) -> None:
    """In-place decoupled-weight-decay Adam update with bias correction."""
    opt.step += 1
    bc1 = 1.0 - opt.beta1**opt.step
    bc2 = 1.0 - opt.beta2**opt.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            p.mul_(1.0 - lr * opt.weight_decay)
            m = opt.exp_avg[name]
            v = opt.exp_avg_sq[name]
            m.mul_(opt.beta1).add_(g, alpha=1.0 - opt.beta1)
            v.mul_(opt.beta2).addcmul_(g, g, value=1.0 - opt.beta2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt() + opt.eps, value=-lr)


def lr_at_step(step: int, total_steps: int, base_lr: float = BASE_LR, warmup: int = 1000) -> float:
    """Linear warmup to base_lr, then cosine annealing to zero."""
    if total_steps <= warmup:
        raise ValueError("total_steps must exceed warmup")
    if step < warmup:
        return base_lr * step / warmup
    frac = (step - warmup) / (total_steps - warmup)
    frac = min(max(frac, 0.0), 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * frac))


@dataclass
class EMAState:
    shadow: "OrderedDict[str, torch.Tensor]"
    updates: int = 0
    power: float = 0.75
    max_decay: float = 0.9999

    @classmethod
    def for_params(cls, params: "OrderedDict[str, torch.Tensor]", power: float = 0.75) -> "EMAState":
        return cls(shadow=OrderedDict((n, p.detach().clone()) for n, p in params.items()), power=power)

    def decay_at(self, t: int) -> float:
        return min(self.max_decay, 1.0 - (1.0 + t) ** (-self.power))


def ema_update(ema: EMAState, params: "OrderedDict[str, torch.Tensor]") -> None:
    """shadow <- d * shadow + (1 - d) * params with d = min(0.9999, 1 - (1+t)^-power)."""
    d = ema.decay_at(ema.updates)
    with torch.no_grad():
        for name, p in params.items():
            ema.shadow[name].mul_(d).add_(p, alpha=1.0 - d)
    ema.updates += 1


def _blob(params: "OrderedDict[str, torch.Tensor]") -> bytes:
    buf = io.BytesIO()
    for t in params.values():
        buf.write(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(
    model: NoisePredictor,
    ema: EMAState,
    normalizer_meta: dict,
    path: str,
    train_step: int = 0,
) -> None:
    params = parameter_store(model)
    meta = {
        "config": {
            "input_channels": model.config.input_channels,
            "down_dims": list(model.config.down_dims),
            "kernel_size": model.config.kernel_size,
            "groupnorm_groups": model.config.groupnorm_groups,
            "step_embed_dim": model.config.step_embed_dim,
            "cond_dim": model.config.cond_dim,
        },
        "normalizer": normalizer_meta,
        "train_step": train_step,
        "ema_updates": ema.updates,
        "ema_power": ema.power,
        "params": [{"name": n, "shape": list(p.shape)} for n, p in params.items()],
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(_blob(params))
        fh.write(_blob(ema.shadow))


def load_checkpoint(path: str) -> tuple[NoisePredictor, EMAState, dict, int]:
    """Returns (model, ema, normalizer_meta, train_step); raises CheckpointError
    on magic/version mismatch or truncation."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<Q", data[8:16])
    try:
        meta = json.loads(data[16 : 16 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from exc
    cfg = NetworkConfig(
        input_channels=meta["config"]["input_channels"],
        down_dims=tuple(meta["config"]["down_dims"]),
        kernel_size=meta["config"]["kernel_size"],
        groupnorm_groups=meta["config"]["groupnorm_groups"],
        step_embed_dim=meta["config"]["step_embed_dim"],
        cond_dim=meta["config"]["cond_dim"],
    )
    model = NoisePredictor(cfg)
    params = parameter_store(model)
    names = [e["name"] for e in meta["params"]]
    if names != list(params.keys()):
        raise CheckpointError("parameter layout mismatch")
    total = sum(int(np.prod(e["shape"])) for e in meta["params"])
    offset = 16 + meta_len
    if len(data) != offset + 2 * 4 * total:
        raise CheckpointError("truncated or oversized parameter blob")

    def read_blob(start: int) -> "OrderedDict[str, torch.Tensor]":
        out = OrderedDict()
        pos = start
        for entry in meta["params"]:
            n = int(np.prod(entry["shape"]))
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(entry["shape"])
            out[entry["name"]] = torch.from_numpy(arr.copy())
            pos += 4 * n
        return out

    with torch.no_grad():
        for (name, p), t in zip(params.items(), read_blob(offset).values()):
            p.copy_(t)
    ema = EMAState(shadow=read_blob(offset + 4 * total), updates=meta["ema_updates"], power=meta["ema_power"])
    return model, ema, meta["normalizer"], meta["train_step"]


def apply_ema(model: NoisePredictor, ema: EMAState) -> None:
    """Copy the EMA shadow into the live parameters."""
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(ema.shadow[name])
