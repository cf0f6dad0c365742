"""Tests for Adam, the gradient check, k-fold splitting and the training loop."""

from __future__ import annotations

import math

import pytest
import torch

from facedeform.components.network import NetworkParams
from facedeform.components.synthetic import make_case
from facedeform.components.training import (
    OptimizerState,
    adam_update,
    apply_update,
    cross_validate,
    finite_difference_gradcheck,
    identity_chamfer,
    kfold_split,
    network_gradcheck,
    train,
)
from facedeform.errors import InvalidParameterError, TrainingAbortError
from facedeform.utils.checkpoint import load_checkpoint
from facedeform.utils.reports import LOSS_COLUMNS, read_loss_log


def scalar(value: float) -> dict[str, torch.Tensor]:
    return {"theta": torch.tensor([value], dtype=torch.float64)}


class TestAdam:
    def test_first_step(self):
        params, state = adam_update(scalar(0.0), scalar(1.0), OptimizerState(learning_rate=0.1))
        assert params["theta"].item() == pytest.approx(-0.1, abs=1e-8)
        assert state.step == 1

    def test_zero_gradient(self):
        params, _ = adam_update(scalar(2.5), scalar(0.0), OptimizerState(learning_rate=0.1))
        assert params["theta"].item() == 2.5

    def test_missing_gradient_counts_as_zero(self):
        params, _ = adam_update(scalar(2.5), {"theta": None}, OptimizerState())
        assert params["theta"].item() == 2.5

    def test_second_step_follows_moment_recursion(self):
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        state = OptimizerState(learning_rate=lr)
        p1, state = adam_update(scalar(0.0), scalar(1.0), state)
        p2, state = adam_update(p1, scalar(2.0), state)

        m = b1 * (1 - b1) * 1.0 + (1 - b1) * 2.0
        v = b2 * (1 - b2) * 1.0 + (1 - b2) * 4.0
        step2 = lr * (m / (1 - b1**2)) / (math.sqrt(v / (1 - b2**2)) + eps)
        assert (p1["theta"] - p2["theta"]).item() == pytest.approx(step2, rel=1e-12)
        assert step2 != pytest.approx(0.1, rel=1e-3)

    def test_non_finite_gradient_aborts(self):
        with pytest.raises(TrainingAbortError, match="theta"):
            adam_update(scalar(0.0), scalar(float("nan")), OptimizerState())

    def test_shape_mismatch(self):
        with pytest.raises(InvalidParameterError):
            adam_update(scalar(0.0), {"theta": torch.zeros(2, dtype=torch.float64)},
                        OptimizerState())

    def test_apply_update(self, tiny_config):
        params = NetworkParams.initialize(tiny_config)
        zeros = {name: torch.zeros_like(p) for name, p in params.named_parameters()}
        apply_update(params, zeros)
        assert all(torch.all(p == 0) for p in params.parameters())


class TestGradcheck:
    def test_quadratic(self):
        theta = torch.tensor([3.0], dtype=torch.float64, requires_grad=True)
        err = finite_difference_gradcheck(lambda: (theta**2).sum(), [theta], samples=1, h=1e-5)
        assert err < 1e-9

    def test_zero_gradient_uses_floor(self):
        theta = torch.tensor([0.0, 0.0], dtype=torch.float64, requires_grad=True)
        err = finite_difference_gradcheck(lambda: (theta**2).sum(), [theta], samples=2)
        assert err == 0.0

    def test_restores_parameters(self):
        theta = torch.tensor([1.0, -2.0], dtype=torch.float64, requires_grad=True)
        finite_difference_gradcheck(lambda: (theta**3).sum(), [theta], samples=2)
        assert theta.tolist() == [1.0, -2.0]

    def test_no_parameters(self):
        with pytest.raises(InvalidParameterError):
            finite_difference_gradcheck(lambda: torch.zeros(()), [])

    def test_network_loss(self, tiny_config, tiny_case):
        report = network_gradcheck(tiny_case, tiny_config, seed=1)
        assert len(report.errors) == tiny_config.gradcheck_trials
        assert report.max_error < 1e-4


class TestKFold:
    def test_sizes(self):
        folds = kfold_split([f"c{i}" for i in range(10)], 5, seed=0)
        assert [len(f) for f in folds] == [2] * 5
        assert sorted(sum(folds, [])) == sorted(f"c{i}" for i in range(10))

    def test_uneven_sizes_differ_by_one(self):
        sizes = sorted(len(f) for f in kfold_split([str(i) for i in range(12)], 5, seed=3))
        assert sizes == [2, 2, 2, 3, 3]

    def test_deterministic(self):
        ids = [f"c{i}" for i in range(10)]
        assert kfold_split(ids, 5, seed=7) == kfold_split(ids, 5, seed=7)

    def test_too_few_cases(self):
        with pytest.raises(InvalidParameterError):
            kfold_split(["a", "b", "c"], 5)


class TestTrain:
    def test_identical_seeds_give_identical_logs(self, tiny_config, tiny_cases):
        a = train(tiny_cases[:2], tiny_config)
        b = train(tiny_cases[:2], tiny_config)
        assert a.log == b.log
        assert [row.epoch for row in a.log] == [0, 1]
        assert a.optimizer.step == 2

    def test_writes_log_and_checkpoints(self, tiny_config, tiny_cases, tmp_path):
        config = tiny_config.with_overrides(checkpoint_every=1)
        result = train(tiny_cases[:2], config, tmp_path / "loss.csv", tmp_path / "ckpt")

        rows = read_loss_log(tmp_path / "loss.csv")
        assert tuple(rows[0]) == LOSS_COLUMNS
        assert rows[1]["L_total"] == pytest.approx(result.log[1].total, rel=1e-8)
        assert (tmp_path / "ckpt" / "epoch_0001.pt").exists()

        tensors, loaded_config, optimizer = load_checkpoint(tmp_path / "ckpt" / "final.pt")
        assert loaded_config == config
        assert optimizer["step"] == result.optimizer.step
        for name, value in result.params.state_dict().items():
            assert torch.equal(tensors[name], value)

    def test_one_epoch_lowers_loss_for_most_seeds(self, tiny_config):
        lowered = 0
        for seed in range(5):
            config = tiny_config.with_overrides(seed=seed)
            cases = [make_case(i, config, seed=seed).to_surgical_case() for i in range(1, 5)]
            log = train(cases, config).log
            assert [row.epoch for row in log] == [0, 1]
            lowered += log[1].total < log[0].total
        assert lowered >= 4

    def test_empty_dataset(self, tiny_config):
        with pytest.raises(InvalidParameterError):
            train([], tiny_config)

    def test_case_without_post_face(self, tiny_config, tiny_case):
        bare = type(tiny_case)(
            "bare", tiny_case.bone_pre, tiny_case.bone_post, tiny_case.face_pre
        )
        with pytest.raises(InvalidParameterError):
            train([bare], tiny_config)


class TestCrossValidate:
    def test_identity_baseline_zero_for_unmoved_face(self, tiny_config):
        case = make_case(0, tiny_config, seed=0).to_surgical_case()
        assert identity_chamfer(case, tiny_config) == 0.0

    def test_every_case_held_out_once(self, tiny_config, tiny_cases, tmp_path):
        results = cross_validate(tiny_cases, tiny_config, tmp_path)
        assert len(results) == tiny_config.folds
        held_out = sorted(i for r in results for i in r.test_ids)
        assert held_out == sorted(c.case_id for c in tiny_cases)
        assert (tmp_path / "fold_0" / "loss.csv").exists()
        assert all(r.identity_chamfer >= 0.0 for r in results)
