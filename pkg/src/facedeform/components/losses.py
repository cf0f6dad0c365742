"""Training losses: Chamfer fit, displacement smoothness and progressive consistency."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import InvalidParameterError
from .geometry import NeighborIndex


def _tensor(values) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values.to(torch.float64)
    return torch.as_tensor(np.asarray(values, dtype=np.float64))


def _safe_norm(x: torch.Tensor) -> torch.Tensor:
    """Euclidean norm over the last axis with a zero (not NaN) gradient at the origin."""
    sq = (x * x).sum(dim=-1)
    positive = sq > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, sq, torch.ones_like(sq))), sq)


def chamfer_loss(face, displacement, face_post) -> torch.Tensor:
    """(1/N_F) * (sum_i min_j |f_i + df_i - f'_j|^2 + sum_j min_i |f_i + df_i - f'_j|^2).

    A single 1/N_F prefactor covers both directional sums.

    Args:
        face: (N_F, 3) pre-op face points
        displacement: (N_F, 3) predicted displacement aligned to ``face``
        face_post: (M, 3) post-op face points

    Raises:
        InvalidParameterError: On empty input or a length mismatch
    """
    f = _tensor(face).reshape(-1, 3)
    df = _tensor(displacement).reshape(-1, 3)
    target = _tensor(face_post).reshape(-1, 3)
    if f.shape[0] == 0 or target.shape[0] == 0:
        raise InvalidParameterError("chamfer loss needs non-empty clouds")
    if df.shape != f.shape:
        raise InvalidParameterError(
            f"{df.shape[0]} displacement vectors for {f.shape[0]} face points"
        )
    pred = f + df
    diff = pred[:, None, :] - target[None, :, :]
    d2 = (diff * diff).sum(dim=-1)
    return (d2.min(dim=1).values.sum() + d2.min(dim=0).values.sum()) / f.shape[0]


def smoothness_loss(displacement, nbrs: NeighborIndex, *, squared: bool = False) -> torch.Tensor:
    """(1/N) * sum_i sum_{j in N(i)} |df_i - df_j|, optionally with squared norms."""
    df = _tensor(displacement).reshape(-1, 3)
    if len(nbrs) != df.shape[0]:
        raise InvalidParameterError(
            f"neighbour index covers {len(nbrs)} points, field has {df.shape[0]}"
        )
    idx = torch.as_tensor(nbrs.indices, dtype=torch.long)
    rel = df[:, None, :] - df[idx]
    per_edge = (rel * rel).sum(dim=-1) if squared else _safe_norm(rel)
    return per_edge.sum() / df.shape[0]


def progressive_loss(deltas, displacement) -> torch.Tensor:
    """(1/T) * sum_t mean_points |sum_{k<=t} delta^k - (t/(T-1)) df|^2.

    Args:
        deltas: (T, N, 3) per-step increments
        displacement: (N, 3) the field the trajectory should reach

    Raises:
        InvalidParameterError: If T < 2 or the shapes disagree
    """
    steps = _tensor(deltas)
    df = _tensor(displacement).reshape(-1, 3)
    if steps.ndim != 3 or steps.shape[1:] != df.shape:
        raise InvalidParameterError("deltas must be (T, N, 3) with N matching the field")
    T = steps.shape[0]
    if T < 2:
        raise InvalidParameterError("progressive loss needs T >= 2")
    fractions = torch.arange(T, dtype=torch.float64) / (T - 1)
    pseudo = fractions[:, None, None] * df[None]
    gap = steps.cumsum(dim=0) - pseudo
    return (gap * gap).sum(dim=-1).mean(dim=1).mean()


@dataclass(frozen=True)
class LossWeights:
    """Non-negative weights of the Chamfer, smoothness and progressive terms."""

    chamfer: float = 1.0
    smooth: float = 0.1
    progressive: float = 0.1

    def __post_init__(self) -> None:
        values = (self.chamfer, self.smooth, self.progressive)
        if any(w < 0 for w in values):
            raise InvalidParameterError(f"loss weights must be non-negative, got {values}")
        if all(w == 0 for w in values):
            raise InvalidParameterError("at least one loss weight must be non-zero")

    @classmethod
    def from_config(cls, config) -> LossWeights:
        return cls(config.lambda_cd, config.lambda_smooth, config.lambda_prog)


@dataclass(frozen=True)
class LossComponents:
    """The three loss terms of one evaluation (tensors or plain floats)."""

    chamfer: torch.Tensor | float
    smooth: torch.Tensor | float
    progressive: torch.Tensor | float

    def detached(self) -> LossComponents:
        return LossComponents(*(float(v) for v in (self.chamfer, self.smooth, self.progressive)))


def total_loss(components: LossComponents, weights: LossWeights):
    """lambda_CD * L_CD + lambda_s * L_smooth + lambda_p * L_prog."""
    return (
        weights.chamfer * components.chamfer
        + weights.smooth * components.smooth
        + weights.progressive * components.progressive
    )
