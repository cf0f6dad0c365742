"""Optimisation: functional Adam, finite-difference gradient check, k-fold training loop."""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from ..errors import InvalidParameterError, TrainingAbortError
from ..utils.checkpoint import save_checkpoint
from ..utils.config import RunConfig
from ..utils.reports import write_loss_log
from .cases import SurgicalCase
from .geometry import knn_query
from .losses import (
    LossComponents,
    LossWeights,
    chamfer_loss,
    progressive_loss,
    smoothness_loss,
    total_loss,
)
from .manifold import SubCloudPartition, partition_subclouds
from .network import NetworkParams, forward_subcloud, subcloud_inputs

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """Adam moment accumulators keyed by parameter name."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
            "m": dict(self.m),
            "v": dict(self.v),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> OptimizerState:
        return cls(**{**data, "m": dict(data["m"]), "v": dict(data["v"])})


def adam_update(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor | None],
    state: OptimizerState,
) -> tuple[dict[str, torch.Tensor], OptimizerState]:
    """One bias-corrected Adam step.

    Args:
        params: Named parameter tensors (not modified)
        grads: Gradient per name; ``None`` counts as zero
        state: Moments from the previous step

    Returns:
        (updated parameter tensors, new optimizer state)

    Raises:
        TrainingAbortError: If a gradient holds NaN or Inf
        InvalidParameterError: If a gradient shape differs from its parameter
    """
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params: dict[str, torch.Tensor] = {}
    new_m: dict[str, torch.Tensor] = {}
    new_v: dict[str, torch.Tensor] = {}
    for name, p in params.items():
        g = grads.get(name)
        g = torch.zeros_like(p) if g is None else g.detach()
        if g.shape != p.shape:
            raise InvalidParameterError(f"gradient of {name} has shape {tuple(g.shape)}")
        if not torch.isfinite(g).all():
            raise TrainingAbortError(f"non-finite gradient in {name}")
        m = b1 * state.m.get(name, torch.zeros_like(p)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, torch.zeros_like(p)) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**step)
        v_hat = v / (1.0 - b2**step)
        new_params[name] = p.detach() - state.learning_rate * m_hat / (v_hat.sqrt() + state.eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, replace(state, step=step, m=new_m, v=new_v)


def apply_update(module: torch.nn.Module, values: Mapping[str, torch.Tensor]) -> None:
    """Copy updated tensors into a module's parameters in place."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            p.copy_(values[name])


def finite_difference_gradcheck(
    loss_fn: Callable[[], torch.Tensor],
    params: torch.nn.Module | Iterable[torch.Tensor],
    samples: int = 20,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Compare autograd against central differences on randomly chosen coordinates.

    Args:
        loss_fn: Zero-argument closure returning a scalar loss that depends on ``params``
        params: Module or tensors requiring grad
        samples: Number of scalar coordinates to check
        h: Finite-difference step
        seed: Chooses the coordinates

    Returns:
        max |a - n| / max(|a|, |n|, 1e-8) over the checked coordinates
    """
    tensors = list(params.parameters()) if isinstance(params, torch.nn.Module) else list(params)
    if not tensors:
        raise InvalidParameterError("no parameters to check")
    analytic = torch.autograd.grad(loss_fn(), tensors, allow_unused=True)
    sizes = np.array([t.numel() for t in tensors])
    rng = np.random.default_rng(seed)
    flat_choice = rng.choice(sizes.sum(), size=min(samples, int(sizes.sum())), replace=False)
    offsets = np.concatenate(([0], np.cumsum(sizes)))

    worst = 0.0
    with torch.no_grad():
        for flat in flat_choice:
            which = int(np.searchsorted(offsets, flat, side="right") - 1)
            pos = int(flat - offsets[which])
            view = tensors[which].view(-1)
            original = view[pos].item()
            view[pos] = original + h
            plus = loss_fn().item()
            view[pos] = original - h
            minus = loss_fn().item()
            view[pos] = original
            numeric = (plus - minus) / (2.0 * h)
            grad = analytic[which]
            a = 0.0 if grad is None else grad.reshape(-1)[pos].item()
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return worst


def kfold_split(case_ids: Sequence[str], K: int = 5, seed: int = 0) -> list[list[str]]:
    """Shuffle ids with ``seed`` and deal them into K folds whose sizes differ by at most one."""
    if K < 1:
        raise InvalidParameterError(f"K must be positive, got {K}")
    if len(case_ids) < K:
        raise InvalidParameterError(f"{len(case_ids)} cases cannot fill {K} folds")
    order = np.random.default_rng(seed).permutation(len(case_ids))
    return [[case_ids[i] for i in part] for part in np.array_split(order, K)]


def case_partition(case: SurgicalCase, config: RunConfig) -> SubCloudPartition:
    return partition_subclouds(case, config.subclouds, config.points_per_subcloud, config.seed)


def case_loss(
    case: SurgicalCase,
    params: NetworkParams,
    config: RunConfig,
    partition: SubCloudPartition | None = None,
) -> LossComponents:
    """Loss components of one case averaged over its sub-clouds.

    Each sub-cloud is scored against the true post-op positions of its own face points.
    """
    if case.face_post is None:
        raise InvalidParameterError(f"case {case.case_id} has no post-op face to train on")
    if partition is None:
        partition = case_partition(case, config)
    parts = []
    for s in range(len(partition)):
        face_idx = partition.face[s]
        pred = forward_subcloud(*subcloud_inputs(case, partition, s), params, config, face_idx)
        face = case.face_pre.points[face_idx]
        k = min(config.k, len(face_idx) - 1)
        smooth = (
            smoothness_loss(pred.displacement, knn_query(face, k), squared=config.smooth_squared)
            if k >= 1
            else torch.zeros((), dtype=torch.float64)
        )
        parts.append(
            (
                chamfer_loss(face, pred.displacement, case.face_post.points[face_idx]),
                smooth,
                progressive_loss(pred.deltas, pred.displacement),
            )
        )
    n = len(parts)
    return LossComponents(*(sum(p[i] for p in parts) / n for i in range(3)))


def batch_loss(
    cases: Sequence[SurgicalCase],
    params: NetworkParams,
    config: RunConfig,
    partitions: Mapping[str, SubCloudPartition] | None = None,
) -> tuple[torch.Tensor, LossComponents]:
    """Mean weighted loss of a batch, summed in case order."""
    weights = LossWeights.from_config(config)
    comps = [
        case_loss(c, params, config, None if partitions is None else partitions[c.case_id])
        for c in cases
    ]
    n = len(comps)
    mean = LossComponents(
        sum(c.chamfer for c in comps) / n,
        sum(c.smooth for c in comps) / n,
        sum(c.progressive for c in comps) / n,
    )
    return total_loss(mean, weights), mean


@dataclass(frozen=True)
class EpochLoss:
    """One loss-log line; epoch 0 is the initialisation."""

    epoch: int
    total: float
    chamfer: float
    smooth: float
    progressive: float


def evaluate_loss(
    dataset: Sequence[SurgicalCase],
    params: NetworkParams,
    config: RunConfig,
    partitions: Mapping[str, SubCloudPartition] | None = None,
    epoch: int = 0,
) -> EpochLoss:
    """Mean loss components over a dataset without building a graph."""
    if not dataset:
        raise InvalidParameterError("cannot evaluate the loss of an empty dataset")
    with torch.no_grad():
        total, comps = batch_loss(dataset, params, config, partitions)
    c = comps.detached()
    return EpochLoss(epoch, float(total), c.chamfer, c.smooth, c.progressive)


@dataclass
class TrainingResult:
    params: NetworkParams
    log: list[EpochLoss]
    optimizer: OptimizerState


def train(
    dataset: Sequence[SurgicalCase],
    config: RunConfig,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    params: NetworkParams | None = None,
) -> TrainingResult:
    """Fit the network with mini-batch Adam.

    Batches are drawn from a permutation seeded by ``config.seed`` and re-shuffled every
    epoch. Sub-cloud partitions are fixed per case. After every epoch the mean loss
    over the training set is logged; identical seeds give identical logs.

    Args:
        dataset: Training cases with post-op faces
        config: Run configuration
        log_path: Loss CSV destination, if any
        checkpoint_dir: Directory for ``epoch_XXXX.pt`` files every
            ``config.checkpoint_every`` epochs and ``final.pt``
        params: Starting parameters; freshly initialised from the seed when omitted

    Returns:
        Trained parameters, the loss log and the optimizer state
    """
    if not dataset:
        raise InvalidParameterError("cannot train on an empty dataset")
    if params is None:
        params = NetworkParams.initialize(config)
    partitions = {c.case_id: case_partition(c, config) for c in dataset}
    state = OptimizerState(learning_rate=config.learning_rate)
    rng = np.random.default_rng(config.seed)

    log = [evaluate_loss(dataset, params, config, partitions, epoch=0)]
    logger.info("epoch 0 (init): L_total %.6g", log[0].total)
    names = [name for name, _ in params.named_parameters()]

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[start : start + config.batch_size]]
            loss, _ = batch_loss(batch, params, config, partitions)
            grads = torch.autograd.grad(loss, list(params.parameters()), allow_unused=True)
            current = dict(params.named_parameters())
            updated, state = adam_update(current, dict(zip(names, grads, strict=True)), state)
            apply_update(params, updated)

        row = evaluate_loss(dataset, params, config, partitions, epoch=epoch)
        log.append(row)
        logger.info(
            "epoch %d: L_total %.6g (CD %.6g, smooth %.6g, prog %.6g)",
            epoch, row.total, row.chamfer, row.smooth, row.progressive,
        )
        if checkpoint_dir is not None and epoch % config.checkpoint_every == 0:
            save_checkpoint(
                Path(checkpoint_dir) / f"epoch_{epoch:04d}.pt",
                params.state_dict(), config, state.to_dict(), epoch=epoch,
            )

    if checkpoint_dir is not None:
        save_checkpoint(
            Path(checkpoint_dir) / "final.pt",
            params.state_dict(), config, state.to_dict(), epoch=config.epochs,
        )
    if log_path is not None:
        write_loss_log(log, log_path)
    return TrainingResult(params=params, log=log, optimizer=state)


@dataclass(frozen=True)
class FoldResult:
    """Held-out Chamfer loss of one fold for the trained model and for F' = F."""

    fold: int
    test_ids: tuple[str, ...]
    model_chamfer: float
    identity_chamfer: float
    final_train_loss: float


def identity_chamfer(
    case: SurgicalCase, config: RunConfig, partition: SubCloudPartition | None = None
) -> float:
    """Chamfer loss of the zero-displacement prediction over the same sub-clouds."""
    if partition is None:
        partition = case_partition(case, config)
    values = []
    for face_idx in partition.face:
        face = case.face_pre.points[face_idx]
        truth = case.face_post.points[face_idx]
        values.append(float(chamfer_loss(face, np.zeros_like(face), truth)))
    return float(np.mean(values))


def cross_validate(
    dataset: Sequence[SurgicalCase],
    config: RunConfig,
    out_dir: str | Path | None = None,
) -> list[FoldResult]:
    """Train one model per fold and score its held-out cases against the identity baseline."""
    by_id = {c.case_id: c for c in dataset}
    folds = kfold_split(sorted(by_id), config.folds, config.seed)
    results = []
    for f, test_ids in enumerate(folds):
        train_cases = [by_id[i] for i in sorted(by_id) if i not in set(test_ids)]
        fold_dir = None if out_dir is None else Path(out_dir) / f"fold_{f}"
        result = train(
            train_cases,
            config,
            log_path=None if fold_dir is None else fold_dir / "loss.csv",
            checkpoint_dir=None if fold_dir is None else fold_dir / "checkpoints",
        )
        test_cases = [by_id[i] for i in test_ids]
        held_out = evaluate_loss(test_cases, result.params, config)
        baseline = float(np.mean([identity_chamfer(c, config) for c in test_cases]))
        results.append(
            FoldResult(
                fold=f,
                test_ids=tuple(test_ids),
                model_chamfer=held_out.chamfer,
                identity_chamfer=baseline,
                final_train_loss=result.log[-1].total,
            )
        )
        logger.info(
            "fold %d: test Chamfer %.6g vs identity %.6g", f, held_out.chamfer, baseline
        )
    return results


@dataclass(frozen=True)
class GradcheckReport:
    """Worst relative error per parameter sample."""

    errors: tuple[float, ...]

    @property
    def max_error(self) -> float:
        return max(self.errors)


def network_gradcheck(case: SurgicalCase, config: RunConfig, seed: int = 0) -> GradcheckReport:
    """Finite-difference check of the full weighted loss on one case.

    Runs ``config.gradcheck_trials`` independent parameter initialisations and checks
    ``config.gradcheck_samples`` coordinates of each with step ``config.gradcheck_step``.
    """
    partition = case_partition(case, config)
    errors = []
    for trial in range(config.gradcheck_trials):
        params = NetworkParams.initialize(config, seed=seed + trial)

        def loss_fn(params: NetworkParams = params) -> torch.Tensor:
            return batch_loss([case], params, config, {case.case_id: partition})[0]

        err = finite_difference_gradcheck(
            loss_fn, params, config.gradcheck_samples, config.gradcheck_step, seed=seed + trial
        )
        logger.info("gradcheck trial %d: max relative error %.3g", trial, err)
        errors.append(err)
    return GradcheckReport(tuple(errors))
