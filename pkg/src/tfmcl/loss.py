"""Cosine-similarity contrastive losses and their weighted combination.

Functions accept torch tensors (gradients flow through) or array-likes, which
are converted to float64 tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from tfmcl.errors import DegenerateInputError, InvalidArgumentError, NumericError

TFDL_VARIANTS = ("dispersion", "verbatim")
TFDL_INPUTS = ("original", "augmented", "both")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.2
    beta: float = 1.0
    tau: float = 0.2
    tfdl_variant: str = "dispersion"
    tfdl_inputs: str = "original"

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise InvalidArgumentError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.beta >= 0:
            raise InvalidArgumentError(f"beta must be >= 0, got {self.beta}")
        if not self.tau > 0:
            raise InvalidArgumentError(f"tau must be > 0, got {self.tau}")
        if self.tfdl_variant not in TFDL_VARIANTS:
            raise InvalidArgumentError(f"tfdl_variant must be one of {TFDL_VARIANTS}")
        if self.tfdl_inputs not in TFDL_INPUTS:
            raise InvalidArgumentError(f"tfdl_inputs must be one of {TFDL_INPUTS}")


@dataclass(frozen=True)
class LossBreakdown:
    l_t: float
    l_f: float
    l_z: float
    l_tf: float
    total: float

    def as_dict(self):
        return {"l_t": self.l_t, "l_f": self.l_f, "l_z": self.l_z, "l_tf": self.l_tf, "total": self.total}


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _unit_rows(x: torch.Tensor) -> torch.Tensor:
    norms = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if torch.any(norms == 0):
        raise DegenerateInputError("zero-norm representation; cosine similarity is undefined")
    return x / norms


def cosine_sim(a, b) -> torch.Tensor:
    """a.b / (|a| |b|) along the last axis; zero vectors raise DegenerateInputError."""
    a, b = _tensor(a), _tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise InvalidArgumentError(f"dimension mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (_unit_rows(a) * _unit_rows(b)).sum(-1)


def _similarity_logits(z: torch.Tensor, tau: float) -> torch.Tensor:
    u = _unit_rows(z)
    s = (u @ u.T) / tau
    eye = torch.eye(z.shape[0], dtype=torch.bool, device=z.device)
    return s.masked_fill(eye, float("-inf"))


def ntxent_pair(i: int, j: int, z, tau: float) -> torch.Tensor:
    """-log softmax over k != i of sim(z_i, z_k)/tau, evaluated at k = j (0-based)."""
    z = _tensor(z)
    if z.dim() != 2 or z.shape[0] < 4:
        raise InvalidArgumentError("Z must be a (2N, dim) matrix with N >= 2")
    if i == j:
        raise InvalidArgumentError("i and j must differ")
    logits = _similarity_logits(z, tau)[i]
    return torch.logsumexp(logits, 0) - logits[j]


def interleave(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Rows a_0, b_0, a_1, b_1, ... so that rows 2k and 2k+1 are positive partners."""
    return torch.stack([a, b], dim=1).reshape(2 * a.shape[0], *a.shape[1:])


def paired_nce(a, b, tau: float) -> torch.Tensor:
    """Mean of both directed NT-Xent terms over the N positive pairs (a_k, b_k)."""
    a, b = _tensor(a), _tensor(b)
    if a.shape != b.shape or a.dim() != 2:
        raise InvalidArgumentError(f"paired inputs must share an (N, dim) shape, got {tuple(a.shape)}, {tuple(b.shape)}")
    if a.shape[0] < 2:
        raise InvalidArgumentError("need N >= 2 pairs for in-batch negatives")
    z = interleave(a, b)
    logits = _similarity_logits(z, tau)
    idx = torch.arange(z.shape[0], device=z.device)
    partner = idx ^ 1
    return (torch.logsumexp(logits, dim=1) - logits[idx, partner]).mean()


def tfdl(rt, rf, variant: str = "dispersion") -> torch.Tensor:
    """Mean exp(cos(rt_i, rf_i)); the verbatim variant returns its reciprocal."""
    if variant not in TFDL_VARIANTS:
        raise InvalidArgumentError(f"unknown tfdl variant {variant!r}")
    rt, rf = _tensor(rt), _tensor(rf)
    if rt.shape != rf.shape:
        raise InvalidArgumentError(f"shape mismatch {tuple(rt.shape)} vs {tuple(rf.shape)}")
    m = torch.exp(cosine_sim(rt, rf)).mean()
    return m if variant == "dispersion" else 1.0 / m


def combine(l_t, l_f, l_z, l_tf, alpha: float, beta: float):
    return alpha * (l_t + l_f) + (1 - alpha) * l_z + beta * l_tf


def mcl(l_t, l_f, l_z, l_tf, weights: LossWeights) -> LossBreakdown:
    parts = [float(v.detach()) if isinstance(v, torch.Tensor) else float(v) for v in (l_t, l_f, l_z, l_tf)]
    if not all(math.isfinite(v) for v in parts):
        raise NumericError(f"non-finite loss component in {parts}")
    return LossBreakdown(*parts, total=combine(*parts, weights.alpha, weights.beta))


def component_losses(reprs, weights: LossWeights):
    """(l_t, l_f, l_z, l_tf) tensors from a ReprSet."""
    tau = weights.tau
    l_t = paired_nce(reprs.rt, reprs.rt_aug, tau)
    l_f = paired_nce(reprs.rf, reprs.rf_aug, tau)
    l_z = paired_nce(reprs.y, reprs.y_aug, tau)
    if weights.tfdl_inputs == "original":
        l_tf = tfdl(reprs.rt, reprs.rf, weights.tfdl_variant)
    elif weights.tfdl_inputs == "augmented":
        l_tf = tfdl(reprs.rt_aug, reprs.rf_aug, weights.tfdl_variant)
    else:
        l_tf = 0.5 * (tfdl(reprs.rt, reprs.rf, weights.tfdl_variant)
                      + tfdl(reprs.rt_aug, reprs.rf_aug, weights.tfdl_variant))
    return l_t, l_f, l_z, l_tf


def total_loss(reprs, weights: LossWeights) -> torch.Tensor:
    return combine(*component_losses(reprs, weights), weights.alpha, weights.beta)
