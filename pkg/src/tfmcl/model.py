"""Dual time/frequency encoders, the fusion mapping head and the classifier.

Each encoder is: non-overlapping step convolution along time (or frequency),
a channel convolution collapsing the electrode axis, learned positional
embeddings, a single-head transformer encoder layer, mean pooling and one
fully connected layer.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Callable, Dict, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from tfmcl.errors import InvalidArgumentError, NumericError

CKPT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    n_channels: Optional[int] = None  # channel-kernel height; filled from the data when None
    window_len: Optional[int] = None
    time_kernel: int = 20
    freq_kernel: int = 10
    n_time_filters: int = 16
    n_channel_filters: int = 16
    attn_heads: int = 1
    encoder_layers: int = 1
    ffn_hidden: int = 64
    repr_dim: int = 64
    fusion_dim: int = 64
    fmh_hidden: int = 64
    fmh_mlp_layers: int = 3

    def __post_init__(self):
        sizes = {k: v for k, v in asdict(self).items() if k not in ("n_channels", "window_len")}
        for k, v in sizes.items():
            if not isinstance(v, int) or v < 1:
                raise InvalidArgumentError(f"encoder {k} must be a positive integer, got {v!r}")
        if self.attn_heads != 1:
            raise InvalidArgumentError("only single-head attention is supported")
        if self.n_channels is not None and self.n_channels < 1:
            raise InvalidArgumentError("n_channels must be >= 1")
        if self.window_len is not None:
            if self.window_len < 8 or self.window_len % 2:
                raise InvalidArgumentError("window_len must be even and >= 8")
            if self.time_tokens < 2 or self.freq_tokens < 2:
                raise InvalidArgumentError(
                    f"kernels leave {self.time_tokens} time / {self.freq_tokens} frequency tokens; "
                    "attention needs at least 2"
                )

    @property
    def freq_len(self) -> int:
        return self.window_len // 2

    @property
    def time_tokens(self) -> int:
        return self.window_len // self.time_kernel

    @property
    def freq_tokens(self) -> int:
        return self.freq_len // self.freq_kernel

    def resolved(self, n_channels: int, window_len: int) -> "EncoderConfig":
        """Fill in the data-dependent sizes, rejecting a conflicting explicit value."""
        for k, v in (("n_channels", n_channels), ("window_len", window_len)):
            mine = getattr(self, k)
            if mine is not None and mine != v:
                raise InvalidArgumentError(f"config {k}={mine} but the data has {v}")
        return replace(self, n_channels=n_channels, window_len=window_len)

    @property
    def is_resolved(self) -> bool:
        return self.n_channels is not None and self.window_len is not None


def token_count(length: int, kernel: int) -> int:
    """Tokens produced by a stride-equals-kernel convolution; the remainder is dropped."""
    return length // kernel


class SelfAttention(nn.Module):
    """Single-head scaled dot-product self-attention with an output projection."""

    def __init__(self, dim: int):
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim, bias=False)  # a key bias cannot change the softmax
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self.scale = 1.0 / math.sqrt(dim)

    def forward(self, x):
        scores = torch.matmul(self.q(x), self.k(x).transpose(-2, -1)) * self.scale
        return self.o(torch.matmul(torch.softmax(scores, dim=-1), self.v(x)))


class EncoderLayer(nn.Module):
    """Post-norm transformer block: x = LN(x + SA(x)); x = LN(x + FFN(x))."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.attn = SelfAttention(dim)
        self.norm1 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, hidden)
        self.ff2 = nn.Linear(hidden, dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x):
        x = self.norm1(x + self.attn(x))
        return self.norm2(x + self.ff2(F.relu(self.ff1(x))))


class DomainEncoder(nn.Module):
    """Maps an (N, E, L) batch to (N, repr_dim)."""

    def __init__(self, n_channels: int, length: int, kernel: int, cfg: EncoderConfig):
        super().__init__()
        self.kernel = kernel
        self.n_tokens = token_count(length, kernel)
        if self.n_tokens < 2:
            raise InvalidArgumentError(f"length {length} with kernel {kernel} gives < 2 tokens")
        self.step_conv = nn.Conv2d(1, cfg.n_time_filters, (1, kernel), stride=(1, kernel))
        self.channel_conv = nn.Conv2d(cfg.n_time_filters, cfg.n_channel_filters, (n_channels, 1))
        self.pos = nn.Parameter(torch.empty(self.n_tokens, cfg.n_channel_filters))
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.n_channel_filters, cfg.ffn_hidden) for _ in range(cfg.encoder_layers)
        )
        self.fc = nn.Linear(cfg.n_channel_filters, cfg.repr_dim)

    def tokens(self, x):
        x = x[..., : self.n_tokens * self.kernel]
        h = F.relu(self.step_conv(x.unsqueeze(1)))      # (N, Ft, E, T')
        h = F.relu(self.channel_conv(h))                # (N, Fc, 1, T')
        return h.squeeze(2).transpose(1, 2) + self.pos  # (N, T', Fc)

    def forward(self, x):
        h = self.tokens(x)
        for layer in self.layers:
            h = layer(h)
        return self.fc(h.mean(dim=1))


class FusionHead(nn.Module):
    """Attention over the (rt, rf) token pair, concatenation, then an MLP to fusion_dim."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.repr_dim
        self.attn = SelfAttention(d)
        self.norm = nn.LayerNorm(d)
        widths = [2 * d] + [cfg.fmh_hidden] * (cfg.fmh_mlp_layers - 1) + [cfg.fusion_dim]
        self.mlp = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))

    def mix(self, rt, rf):
        """Attention-mixed (rt, rf) tokens, concatenated to length 2 * repr_dim."""
        if rt.shape != rf.shape:
            raise InvalidArgumentError(f"rt {tuple(rt.shape)} and rf {tuple(rf.shape)} differ")
        pair = torch.stack([rt, rf], dim=-2)
        return self.norm(pair + self.attn(pair)).flatten(-2)

    def forward(self, rt, rf):
        h = self.mix(rt, rf)
        for i, lin in enumerate(self.mlp):
            h = lin(h)
            if i < len(self.mlp) - 1:
                h = F.relu(h)
        return h


@dataclass
class ReprSet:
    rt: torch.Tensor
    rf: torch.Tensor
    rt_aug: torch.Tensor
    rf_aug: torch.Tensor
    y: torch.Tensor
    y_aug: torch.Tensor


class TFMCL(nn.Module):
    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        super().__init__()
        if not cfg.is_resolved:
            raise InvalidArgumentError("EncoderConfig needs n_channels and window_len")
        self.config = cfg
        self.seed = seed
        self.time_encoder = DomainEncoder(cfg.n_channels, cfg.window_len, cfg.time_kernel, cfg)
        self.freq_encoder = DomainEncoder(cfg.n_channels, cfg.freq_len, cfg.freq_kernel, cfg)
        self.fmh = FusionHead(cfg)
        self.head = nn.Linear(cfg.fusion_dim, 2)

    def encode_time(self, t):
        return self.time_encoder(t)

    def encode_freq(self, f):
        return self.freq_encoder(f)

    def fuse(self, rt, rf):
        return self.fmh(rt, rf)

    def classify(self, y):
        return self.head(y)

    def forward(self, t, f):
        """Logits for original (non-augmented) views."""
        return self.classify(self.fuse(self.encode_time(t), self.encode_freq(f)))

    def represent(self, t, t_aug, f, f_aug) -> ReprSet:
        n = t.shape[0]
        rt_all = self.encode_time(torch.cat([t, t_aug]))
        rf_all = self.encode_freq(torch.cat([f, f_aug]))
        y_all = self.fuse(rt_all, rf_all)
        return ReprSet(rt_all[:n], rf_all[:n], rt_all[n:], rf_all[n:], y_all[:n], y_all[n:])


def xavier_bound(shape) -> float:
    """sqrt(6 / (fan_in + fan_out)) with the receptive field folded into both fans."""
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(cfg: EncoderConfig, seed: int = 0, dtype=torch.float32) -> TFMCL:
    """Build a model with seeded scaled-uniform weights, zero biases, unit LayerNorm gains."""
    model = TFMCL(cfg, seed).to(dtype)
    gen = torch.Generator().manual_seed(int(seed))
    norm_gains = {f"{name}.weight" for name, m in model.named_modules() if isinstance(m, nn.LayerNorm)}
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.numel() == 0:
                raise InvalidArgumentError(f"parameter {name} has a zero-sized dimension")
            if name in norm_gains:
                p.fill_(1.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                bound = xavier_bound(tuple(p.shape))
                p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64).mul_(2 * bound).sub_(bound))
    return model


def grad(loss_fn: Callable[[TFMCL], torch.Tensor], model: TFMCL) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradient of a scalar ``loss_fn(model)`` for every named parameter."""
    params = dict(model.named_parameters())
    loss = loss_fn(model)
    if loss.dim() != 0:
        raise InvalidArgumentError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise NumericError(f"loss is non-finite ({loss.item()})")
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    out = {}
    for (name, p), g in zip(params.items(), grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        if not torch.all(torch.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
        out[name] = g
    return out


# -- checkpoint: one JSON header line, then concatenated little-endian f32 blobs


def save_checkpoint(model: TFMCL, path, extra: Optional[dict] = None) -> None:
    tensors, blobs, offset = [], [], 0
    for name, t in model.state_dict().items():
        blob = t.detach().cpu().numpy().astype("<f4").tobytes()
        tensors.append({"name": name, "shape": list(t.shape), "byte_offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": CKPT_FORMAT_VERSION,
        "dtype": "f32le",
        "config": asdict(model.config),
        "seed": model.seed,
        "tensors": tensors,
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for blob in blobs:
            fh.write(blob)


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        return json.loads(fh.readline())


def load_checkpoint(path) -> TFMCL:
    from tfmcl.errors import DatasetError

    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: unreadable checkpoint header") from exc
    if header.get("format_version") != CKPT_FORMAT_VERSION or header.get("dtype") != "f32le":
        raise DatasetError(f"{path}: unsupported checkpoint format")
    model = TFMCL(EncoderConfig(**header["config"]), header["seed"])
    state = model.state_dict()
    loaded = {}
    for entry in header["tensors"]:
        name, shape, off = entry["name"], tuple(entry["shape"]), entry["byte_offset"]
        if name not in state or tuple(state[name].shape) != shape:
            raise DatasetError(f"{path}: tensor {name} does not match the model layout")
        n = int(np.prod(shape)) if shape else 1
        if off + 4 * n > len(payload):
            raise DatasetError(f"{path}: tensor {name} is truncated")
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(shape)
        loaded[name] = torch.from_numpy(arr.astype(np.float32))
    if set(loaded) != set(state):
        raise DatasetError(f"{path}: missing tensors {sorted(set(state) - set(loaded))}")
    model.load_state_dict(loaded)
    return model
