"""Learnable forward model: manifold encoder, skeletal-facial attention, LSTM decoder.

For one sub-cloud the model maps (B, B', F) to a displacement field over F:

    manifold encoding -> per-point perceptron -> graph convolution -> global context
    -> attention (face queries, bone keys/values) -> T incremental LSTM steps -> sum

Everything runs in float64 so that finite-difference gradient checks are meaningful.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial.distance import cdist
from torch import nn

from ..errors import InvalidParameterError
from ..utils.config import RunConfig
from .cases import SurgicalCase
from .geometry import LabeledCloud, SourceLabel
from .manifold import (
    EnhancedManifold,
    SubCloudPartition,
    build_enhanced_manifold,
    partition_subclouds,
    positional_width,
    sinusoidal_code,
)

logger = logging.getLogger(__name__)

TIME_CODE_WIDTH = 8
DISTANCE_BUCKETS = 16
# Upper edges of buckets 0..14; bucket 15 holds everything >= 200 mm
BUCKET_EDGES = np.geomspace(0.5, 200.0, DISTANCE_BUCKETS - 1)


def _mlp(inp: int, hidden: int, out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(inp, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, out)
    )


class EdgeFunction(nn.Module):
    """phi: a two-layer perceptron on (p_j, p_i - p_j), positions scaled to ~unit range."""

    def __init__(self, out_width: int, coord_scale: float) -> None:
        super().__init__()
        self.coord_scale = coord_scale
        self.mlp = _mlp(6, out_width, out_width)

    def forward(self, edges: torch.Tensor) -> torch.Tensor:
        return self.mlp(edges / self.coord_scale)


class NetworkParams(nn.Module):
    """All learnable tensors of the model.

    Submodules: edge function phi, per-point encoder, graph convolution, global-context
    fusion, bone displacement encoder, attention projections W_Q/W_K/W_V/W_O, the
    relative-position bias table E (heads x distance buckets), the stacked LSTM cells
    and the displacement read-out.
    """

    def __init__(self, config: RunConfig) -> None:
        super().__init__()
        d = config.width
        if d % config.heads:
            raise InvalidParameterError(f"heads ({config.heads}) must divide width ({d})")
        self.width = d
        self.heads = config.heads
        self.head_width = d // config.heads
        self.positional_width = config.positional_width
        self.graph_weighting = config.graph_weighting
        self.k = config.k

        in_width = config.graph_feature_width + len(SourceLabel) + positional_width(
            config.positional_width
        )
        self.edge_fn = EdgeFunction(config.graph_feature_width, config.coord_scale)
        self.point_mlp = _mlp(in_width, d, d)
        self.graph_conv = _mlp(2 * d, d, d)
        self.fuse = _mlp(2 * d, d, d)
        self.bone_encoder = _mlp(d + 3, d, d)

        self.w_q = nn.Linear(d, d, bias=False)
        self.w_k = nn.Linear(d, d, bias=False)
        self.w_v = nn.Linear(d, d, bias=False)
        self.w_o = nn.Linear(d, d)
        self.rel_bias = nn.Parameter(torch.zeros(config.heads, DISTANCE_BUCKETS))

        cell_inputs = [TIME_CODE_WIDTH + d + 3] + [d] * (config.lstm_depth - 1)
        self.lstm = nn.ModuleList(nn.LSTMCell(n_in, d) for n_in in cell_inputs)
        self.readout = nn.Linear(d, 3)
        with torch.no_grad():
            self.readout.weight.mul_(0.1)
            self.readout.bias.zero_()
        self.double()

    @classmethod
    def initialize(cls, config: RunConfig, seed: int | None = None) -> NetworkParams:
        """Deterministically initialised parameters."""
        generator_state = torch.random.get_rng_state()
        torch.manual_seed(config.seed if seed is None else seed)
        try:
            return cls(config)
        finally:
            torch.random.set_rng_state(generator_state)

    def zero_(self) -> NetworkParams:
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self

    @property
    def depth(self) -> int:
        return len(self.lstm)


@dataclass(frozen=True)
class EncodedFeatures:
    """Encoder outputs split by source.

    Attributes:
        face: (n_f, d) facial surface features (attention queries)
        correspondence: (n_b, d) skeletal-facial relational features (keys)
        bone_displacement: (n_b, d) skeletal displacement features (values)
        points: (N, d) per-point features before the split
        pooled: (d,) global max-pooled context
    """

    face: torch.Tensor
    correspondence: torch.Tensor
    bone_displacement: torch.Tensor
    points: torch.Tensor
    pooled: torch.Tensor


def encode(
    enhanced: EnhancedManifold, params: NetworkParams, bone_displacement: torch.Tensor
) -> EncodedFeatures:
    """Hierarchical point + graph encoding of an enhanced manifold.

    Args:
        enhanced: Output of build_enhanced_manifold
        params: Network parameters
        bone_displacement: (n_b, 3) raw b'_i - b_i in mm

    Raises:
        InvalidParameterError: If a source is missing from the manifold
    """
    if min(enhanced.counts) == 0:
        raise InvalidParameterError("every source (bone pre, bone post, face) must be present")
    n_pre, n_post, _ = enhanced.counts
    if n_pre != n_post or bone_displacement.shape != (n_pre, 3):
        raise InvalidParameterError("bone displacement must match the bone clouds pointwise")

    h = params.point_mlp(enhanced.features())
    idx = torch.as_tensor(enhanced.neighbors.indices, dtype=torch.long)
    hj = h[idx]
    hi = h[:, None, :].expand_as(hj)
    local = params.graph_conv(torch.cat((hi, hj - hi), dim=-1)).max(dim=1).values
    pooled = local.max(dim=0).values
    z = params.fuse(torch.cat((local, pooled.expand_as(local)), dim=1))

    pre, post, face = enhanced.slices()
    bone_disp = params.bone_encoder(torch.cat((z[post], bone_displacement), dim=1))
    return EncodedFeatures(
        face=z[face],
        correspondence=z[pre],
        bone_displacement=bone_disp,
        points=z,
        pooled=pooled,
    )


def distance_buckets(distances: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Bucket index (0..15) of each face-bone distance in mm."""
    d = np.asarray(distances.detach() if isinstance(distances, torch.Tensor) else distances)
    return torch.as_tensor(np.searchsorted(BUCKET_EDGES, d, side="right"), dtype=torch.long)


@dataclass(frozen=True)
class AttentionOutput:
    """Attention result: projected output, per-head A_h and the softmax maps."""

    output: torch.Tensor
    heads: torch.Tensor
    weights: torch.Tensor


def multihead_attention(
    face_feats: torch.Tensor,
    correspondence_feats: torch.Tensor,
    bone_disp_feats: torch.Tensor,
    pairwise_distances: np.ndarray | torch.Tensor,
    params: NetworkParams,
) -> AttentionOutput:
    """A_h = softmax(Q_h K_h^T / sqrt(d_h) + E_h) V_h for every head.

    Args:
        face_feats: (n_f, d) query source
        correspondence_feats: (n_b, d) key source
        bone_disp_feats: (n_b, d) value source
        pairwise_distances: (n_f, n_b) face-to-bone distances in mm, used to look up E_h
        params: Network parameters

    Returns:
        AttentionOutput with output (n_f, d), heads (H, n_f, d_h), weights (H, n_f, n_b)
    """
    H, dh = params.heads, params.head_width
    if H * dh != face_feats.shape[1]:
        raise InvalidParameterError(f"{H} heads do not divide width {face_feats.shape[1]}")
    n_f, n_b = face_feats.shape[0], correspondence_feats.shape[0]
    if tuple(pairwise_distances.shape) != (n_f, n_b):
        raise InvalidParameterError("pairwise distance matrix does not match the features")

    q = params.w_q(face_feats).reshape(n_f, H, dh).transpose(0, 1)
    k = params.w_k(correspondence_feats).reshape(n_b, H, dh).transpose(0, 1)
    v = params.w_v(bone_disp_feats).reshape(n_b, H, dh).transpose(0, 1)

    bias = params.rel_bias[:, distance_buckets(pairwise_distances)]
    scores = q @ k.transpose(1, 2) / math.sqrt(dh) + bias
    weights = torch.softmax(scores, dim=-1)
    heads = weights @ v
    concat = heads.transpose(0, 1).reshape(n_f, H * dh)
    return AttentionOutput(output=params.w_o(concat), heads=heads, weights=weights)


@dataclass(frozen=True)
class LstmState:
    """Decoder state after ``t`` completed steps.

    Attributes:
        h, c: Per-layer hidden and cell tensors, each (n, d)
        x: Feature state x^t fed to the next step
        delta: Last increment delta^t (mm)
        t: Number of completed steps
    """

    h: tuple[torch.Tensor, ...]
    c: tuple[torch.Tensor, ...]
    x: torch.Tensor
    delta: torch.Tensor
    t: int

    @classmethod
    def initial(cls, x0: torch.Tensor, depth: int) -> LstmState:
        n, d = x0.shape
        zeros = tuple(torch.zeros(n, d, dtype=x0.dtype) for _ in range(depth))
        return cls(h=zeros, c=zeros, x=x0, delta=torch.zeros(n, 3, dtype=x0.dtype), t=0)


def lstm_step(
    t: int, state: LstmState, params: NetworkParams, T: int
) -> tuple[LstmState, torch.Tensor]:
    """One decoder step: [x^t; delta^t] = LSTM[t; x^{t-1}; delta^{t-1}].

    Raises:
        InvalidParameterError: If t is outside [0, T)
    """
    if not 0 <= t < T:
        raise InvalidParameterError(f"step index {t} outside [0, {T})")
    n = state.x.shape[0]
    time_code = sinusoidal_code(torch.tensor([float(t)]), TIME_CODE_WIDTH).expand(n, -1)
    inp = torch.cat((time_code, state.x, state.delta), dim=1)
    hs, cs = [], []
    for cell, h, c in zip(params.lstm, state.h, state.c, strict=True):
        h, c = cell(inp, (h, c))
        hs.append(h)
        cs.append(c)
        inp = h
    delta = params.readout(inp)
    return LstmState(h=tuple(hs), c=tuple(cs), x=inp, delta=delta, t=state.t + 1), delta


def decode_displacement(
    attended: torch.Tensor, params: NetworkParams, T: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Run T decoder steps from x^0 = attended features and delta = 0.

    Returns:
        (total displacement (n, 3), per-step increments (T, n, 3))
    """
    if T < 2:
        raise InvalidParameterError("the decoder needs at least two steps")
    state = LstmState.initial(attended, params.depth)
    deltas = []
    for t in range(T):
        state, delta = lstm_step(t, state, params, T)
        deltas.append(delta)
    stacked = torch.stack(deltas)
    return stacked.sum(dim=0), stacked


@dataclass(frozen=True)
class SubCloudPrediction:
    """Prediction for one sub-cloud.

    Attributes:
        face_indices: Face indices of the sub-cloud in the full case
        displacement: (m, 3) total displacement
        deltas: (T, m, 3) per-step increments
        attention: Attention maps (H, m, n_b)
        predicted: (m, 3) F + displacement
    """

    face_indices: np.ndarray
    displacement: torch.Tensor
    deltas: torch.Tensor
    attention: torch.Tensor
    predicted: torch.Tensor


def forward_subcloud(
    bone_pre: LabeledCloud,
    bone_post: LabeledCloud,
    face: LabeledCloud,
    params: NetworkParams,
    config: RunConfig,
    face_indices: np.ndarray | None = None,
) -> SubCloudPrediction:
    """Predict F' = F + delta_f for one sub-cloud (gradients flow through ``params``)."""
    manifold = build_enhanced_manifold(
        bone_pre,
        bone_post,
        face,
        config.k,
        config.positional_width,
        params.edge_fn,
        params.graph_weighting,
    )
    bone_disp = torch.as_tensor(bone_post.points - bone_pre.points)
    feats = encode(manifold, params, bone_disp)
    distances = cdist(face.points, bone_pre.points)
    attention = multihead_attention(
        feats.face, feats.correspondence, feats.bone_displacement, distances, params
    )
    displacement, deltas = decode_displacement(attention.output, params, config.lstm_steps)
    face_t = torch.as_tensor(face.points)
    if face_indices is None:
        face_indices = np.arange(len(face))
    return SubCloudPrediction(
        face_indices=np.asarray(face_indices, dtype=np.int64),
        displacement=displacement,
        deltas=deltas,
        attention=attention.weights,
        predicted=face_t + displacement,
    )


def subcloud_inputs(
    case: SurgicalCase, partition: SubCloudPartition, s: int
) -> tuple[LabeledCloud, LabeledCloud, LabeledCloud]:
    """The (bone-pre, bone-post, face) clouds of sub-cloud ``s``."""
    bone_idx = partition.bone[s]
    return (
        case.bone_pre.subset(bone_idx),
        case.bone_post.subset(bone_idx),
        case.face_pre.subset(partition.face[s]),
    )


def forward_predict(
    case: SurgicalCase,
    params: NetworkParams,
    config: RunConfig,
    partition: SubCloudPartition | None = None,
    pool=None,
) -> list[SubCloudPrediction]:
    """Inference over every sub-cloud of a case.

    Args:
        case: Registered case (B, B', F)
        params: Trained parameters (read-only here)
        config: Run configuration
        partition: Precomputed partition; built from ``config.seed`` when omitted
        pool: Optional WorkerPool; sub-clouds are then predicted concurrently

    Returns:
        One prediction per sub-cloud, in partition order
    """
    if partition is None:
        partition = partition_subclouds(
            case, config.subclouds, config.points_per_subcloud, config.seed
        )

    def predict(s: int) -> SubCloudPrediction:
        with torch.no_grad():
            return forward_subcloud(
                *subcloud_inputs(case, partition, s), params, config, partition.face[s]
            )

    indices: Sequence[int] = range(len(partition))
    if pool is None:
        return [predict(s) for s in indices]
    return pool.map_ordered(predict, indices)
