"""Losses, the Nesterov optimizer, and the training loop."""

import math

import numpy as np
import pytest
import torch

from conftest import small_synth_config, tiny_train_config
from xrayrec.augment import AugmentPipelineConfig
from xrayrec.errors import ConfigError, TrainingDiverged
from xrayrec.model import AttentionConfig, HeadConfig, build_classifier, load_checkpoint, rescore
from xrayrec.synth import synth_dataset
from xrayrec.training import (
    EpochRecord,
    NesterovSGD,
    TrainConfig,
    TrainLog,
    bce_multilabel_loss,
    head_loss,
    mixup_loss,
    read_train_log,
    rescoring_loss,
    train,
    write_train_log,
)


class TestTrainConfig:
    @pytest.mark.parametrize(
        "overrides",
        [
            dict(learning_rate=0.0),
            dict(momentum=1.0),
            dict(momentum=-0.1),
            dict(batch_size=0),
            dict(epochs=-1),
            dict(crop_scale=64),
            dict(weight_decay=-1.0),
            dict(eval_every=-1),
        ],
    )
    def test_invalid(self, overrides):
        with pytest.raises(ConfigError):
            tiny_train_config(**overrides).validate()

    def test_effective_augment_geometry(self):
        cfg = tiny_train_config(input_scale=96, crop_scale=80)
        pipeline = cfg.effective_augment()
        assert pipeline.resize_to == 96 and pipeline.crop_to == 80
        assert pipeline.flip_prob == cfg.augment.flip_prob


class TestTrainLog:
    def test_round_trip(self, tmp_path):
        log = TrainLog(
            rng_seed=5,
            config_hash="deadbeef",
            epochs=[
                EpochRecord(0, 0.7, 1.5, eval_map=None),
                EpochRecord(1, 0.5, 1.4, eval_map=0.62),
            ],
        )
        path = tmp_path / "train_log.jsonl"
        write_train_log(path, log)
        back = read_train_log(path)
        assert back == log

    def test_contiguity_enforced(self):
        log = TrainLog(rng_seed=0, epochs=[EpochRecord(1, 0.5, 1.0)])
        with pytest.raises(ConfigError, match="contiguous"):
            log.validate()

    def test_missing_and_malformed(self, tmp_path):
        with pytest.raises(ConfigError):
            read_train_log(tmp_path / "absent.jsonl")
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"schema": "other"}\n')
        with pytest.raises(ConfigError, match="schema"):
            read_train_log(bad)


class TestBceLoss:
    def test_perfect_prediction_is_clamp_residual(self):
        t = torch.tensor([[1.0, 0.0, 1.0, 0.0, 0.0]], dtype=torch.float64)
        assert bce_multilabel_loss(t.clone(), t).item() < 1e-6

    def test_half_probabilities_give_ln2(self):
        p = torch.full((4, 5), 0.5, dtype=torch.float64)
        t = torch.randint(0, 2, (4, 5)).to(torch.float64)
        assert bce_multilabel_loss(p, t).item() == pytest.approx(math.log(2.0), abs=1e-9)

    def test_single_term_closed_form(self):
        p = torch.tensor([[0.9]], dtype=torch.float64)
        t = torch.tensor([[1.0]], dtype=torch.float64)
        assert bce_multilabel_loss(p, t).item() == pytest.approx(-math.log(0.9), abs=1e-9)

    def test_mean_reduction(self):
        p = torch.tensor([[0.9, 0.9]], dtype=torch.float64)
        t = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        expected = (-math.log(0.9) - math.log(0.1)) / 2
        assert bce_multilabel_loss(p, t).item() == pytest.approx(expected, abs=1e-9)

    def test_finite_at_probability_extremes(self):
        p = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        t = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        assert torch.isfinite(bce_multilabel_loss(p, t))

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            bce_multilabel_loss(torch.zeros(2, 5), torch.zeros(2, 4))


class TestMixupLoss:
    def test_endpoints_exact(self):
        a, b = torch.tensor(0.8), torch.tensor(0.3)
        assert mixup_loss(a, b, 1.0) == a
        assert mixup_loss(a, b, 0.0) == b

    def test_interpolation(self):
        a = torch.tensor(1.0, dtype=torch.float64)
        b = torch.tensor(0.0, dtype=torch.float64)
        assert mixup_loss(a, b, 0.3).item() == pytest.approx(0.3, abs=1e-12)

    def test_bad_lambda(self):
        with pytest.raises(ConfigError):
            mixup_loss(torch.tensor(1.0), torch.tensor(0.0), 1.5)


class TestRescoringLoss:
    def logits(self, n=8, seed=0):
        g = torch.Generator().manual_seed(seed)
        return torch.randn(n, 6, generator=g, dtype=torch.float64)

    def test_all_negative_reduces_to_objectness(self):
        logits = self.logits()
        targets = torch.zeros(8, 5, dtype=torch.float64)
        total = rescoring_loss(logits, targets, "masked")
        obj_only = bce_multilabel_loss(torch.sigmoid(logits[:, 5:6]), torch.zeros(8, 1, dtype=torch.float64))
        assert total == obj_only

    def test_perfect_prediction(self):
        targets = torch.tensor([[1.0, 0, 0, 0, 0], [0, 0, 0, 0, 0]], dtype=torch.float64)
        logits = torch.full((2, 6), -30.0, dtype=torch.float64)
        logits[0, 0] = 30.0
        logits[0, 5] = 30.0
        assert rescoring_loss(logits, targets, "masked").item() < 1e-6

    def test_equal_weight_terms(self):
        """Changing only the conditional logits moves the total by the conditional delta."""
        base = self.logits()
        targets = (torch.rand(8, 5, generator=torch.Generator().manual_seed(1)) < 0.5).to(torch.float64)
        targets[0, 0] = 1.0  # ensure at least one positive sample
        bumped = base.clone()
        bumped[:, :5] += 0.7

        def conditional(logits):
            positive = targets.amax(dim=1) > 0.5
            return bce_multilabel_loss(torch.sigmoid(logits[positive, :5]), targets[positive])

        total_delta = rescoring_loss(bumped, targets) - rescoring_loss(base, targets)
        cond_delta = conditional(bumped) - conditional(base)
        assert total_delta.item() == pytest.approx(cond_delta.item(), abs=1e-12)

    def test_masked_negatives_never_touch_conditionals(self):
        logits = self.logits().requires_grad_(True)
        targets = torch.zeros(8, 5, dtype=torch.float64)
        targets[0, 2] = 1.0  # one positive row, the rest negative
        rescoring_loss(logits, targets, "masked").backward()
        negative_rows = torch.arange(1, 8)
        assert torch.all(logits.grad[negative_rows, :5] == 0)
        assert torch.all(logits.grad[negative_rows, 5] != 0)
        assert torch.any(logits.grad[0, :5] != 0)

    def test_product_mode(self):
        logits = self.logits()
        targets = (torch.rand(8, 5, generator=torch.Generator().manual_seed(2)) < 0.4).to(torch.float64)
        total = rescoring_loss(logits, targets, "product")
        obj_target = targets.amax(dim=1, keepdim=True)
        expected = bce_multilabel_loss(torch.sigmoid(logits[:, 5:6]), obj_target) + bce_multilabel_loss(
            rescore(logits), targets
        )
        assert total.item() == pytest.approx(expected.item(), abs=1e-12)

    def test_validation(self):
        with pytest.raises(ConfigError):
            rescoring_loss(torch.zeros(2, 5), torch.zeros(2, 5))
        with pytest.raises(ConfigError):
            rescoring_loss(torch.zeros(2, 6), torch.zeros(3, 5))
        with pytest.raises(ConfigError):
            rescoring_loss(torch.zeros(2, 6), torch.zeros(2, 5), "hinge")

    def test_head_loss_dispatch(self):
        logits5 = torch.randn(4, 5, dtype=torch.float64)
        logits6 = torch.randn(4, 6, dtype=torch.float64)
        targets = (torch.rand(4, 5) < 0.5).to(torch.float64)
        assert head_loss(logits5, targets, HeadConfig("plain5")) == bce_multilabel_loss(
            torch.sigmoid(logits5), targets
        )
        assert head_loss(logits6, targets, HeadConfig("rescoring6")) == rescoring_loss(
            logits6, targets, "masked"
        )


class TestNesterovSGD:
    def test_validation(self):
        p = torch.zeros(2, requires_grad=True)
        with pytest.raises(ConfigError):
            NesterovSGD([p], lr=-0.1)
        with pytest.raises(ConfigError):
            NesterovSGD([p], lr=0.1, momentum=1.0)
        with pytest.raises(ConfigError):
            NesterovSGD([torch.zeros(2)], lr=0.1)

    def test_lookahead_recurrence_against_hand_computation(self):
        """v <- mu*v - lr*grad(theta + mu*v); theta <- theta + v, on f = 0.5*theta^2."""
        theta = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
        opt = NesterovSGD([theta], lr=0.1, momentum=0.9)

        def closure():
            loss = 0.5 * theta**2
            loss.sum().backward()
            return loss.sum()

        hand_theta, hand_v = 1.0, 0.0
        for _ in range(5):
            opt.step(closure)
            grad = hand_theta + 0.9 * hand_v
            hand_v = 0.9 * hand_v - 0.1 * grad
            hand_theta = hand_theta + hand_v
            assert theta.item() == pytest.approx(hand_theta, abs=1e-12)

    def test_zero_lr_step_is_bit_identical(self):
        model = build_classifier()
        before = {k: v.clone() for k, v in model.named_parameters()}

        def closure():
            loss = head_loss(model(torch.randn(2, 3, 48, 48)), torch.zeros(2, 5), HeadConfig())
            loss.backward()
            return loss

        NesterovSGD(model.parameters(), lr=0.0, momentum=0.9).step(closure)
        after = dict(model.named_parameters())
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_weight_decay_at_base_point(self):
        theta = torch.tensor([2.0], dtype=torch.float64, requires_grad=True)
        opt = NesterovSGD([theta], lr=0.1, momentum=0.0, weight_decay=0.5)

        def closure():
            loss = (theta * 0.0).sum()
            loss.backward()
            return loss

        opt.step(closure)
        assert theta.item() == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, abs=1e-12)

    def test_gradient_evaluated_at_lookahead(self):
        theta = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
        opt = NesterovSGD([theta], lr=0.1, momentum=0.9)
        seen = []

        def closure():
            seen.append(theta.detach().clone())
            loss = (0.5 * theta**2).sum()
            loss.backward()
            return loss

        opt.step(closure)
        base = theta.detach().clone()
        v_prev = opt.velocity[0].clone()
        opt.step(closure)
        assert seen[1].item() == pytest.approx((base + 0.9 * v_prev).item(), abs=1e-12)

    def test_state_dict(self):
        theta = torch.zeros(3, requires_grad=True)
        opt = NesterovSGD([theta], lr=0.2, momentum=0.5, weight_decay=0.1)
        state = opt.state_dict()
        assert state["lr"] == 0.2 and state["momentum"] == 0.5
        assert torch.equal(state["velocity"][0], torch.zeros(3))


class TestTrainLoop:
    def test_zero_epochs_returns_initialization(self, train_eval_manifests, tmp_path):
        train_m, _ = train_eval_manifests
        cfg = tiny_train_config(epochs=0)
        result = train(cfg, train_m, out_dir=tmp_path)
        assert result.log.epochs == []
        torch.manual_seed(cfg.rng_seed)
        reference = build_classifier(cfg.backbone, cfg.attention, cfg.head)
        got = result.model.state_dict()
        assert all(torch.equal(got[k], v) for k, v in reference.state_dict().items())
        assert result.final_checkpoint.is_file()
        assert read_train_log(tmp_path / "train_log.jsonl").epochs == []

    def test_one_epoch_run_with_eval(self, train_eval_manifests, tmp_path):
        train_m, eval_m = train_eval_manifests
        cfg = tiny_train_config(epochs=2)
        result = train(cfg, train_m, eval_m, out_dir=tmp_path, config_hash="cafe01", raw_config={"k": 1})
        assert len(result.log.epochs) == 2
        record = result.log.epochs[0]
        assert record.epoch == 0 and record.wall_time > 0
        assert np.isfinite(record.mean_loss) and record.mean_loss > 0
        assert record.eval_map is not None and 0.0 <= record.eval_map <= 1.0
        assert result.best_map == max(r.eval_map for r in result.log.epochs)
        assert result.best_checkpoint.is_file() and result.final_checkpoint.is_file()
        loaded, meta = load_checkpoint(result.final_checkpoint)
        assert meta["config_hash"] == "cafe01"
        assert meta["config"] == {"k": 1}
        probe = torch.randn(2, 3, cfg.crop_scale, cfg.crop_scale, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            assert torch.equal(loaded(probe), result.model(probe))
        assert read_train_log(tmp_path / "train_log.jsonl") == result.log

    def test_deterministic_given_seed(self, train_eval_manifests):
        train_m, _ = train_eval_manifests
        cfg = tiny_train_config(epochs=1, augment=AugmentPipelineConfig(synthesis="mixup"))
        a = train(cfg, train_m)
        b = train(cfg, train_m)
        assert a.log.epochs[0].mean_loss == b.log.epochs[0].mean_loss
        sa, sb = a.model.state_dict(), b.model.state_dict()
        assert all(torch.equal(sa[k], sb[k]) for k in sa)

    def test_eval_disabled(self, train_eval_manifests):
        train_m, eval_m = train_eval_manifests
        result = train(tiny_train_config(epochs=1, eval_every=0), train_m, eval_m)
        assert result.log.epochs[0].eval_map is None
        assert result.best_checkpoint is None

    def test_empty_manifest_rejected(self, train_eval_manifests):
        train_m, _ = train_eval_manifests
        empty = type(train_m)(name="x", split="train", entries=[])
        with pytest.raises(ConfigError):
            train(tiny_train_config(), empty)

    def test_divergence_reported_with_diagnostics(self, tmp_path):
        manifest = synth_dataset(small_synth_config(n_images=16, rng_seed=22), tmp_path / "d")
        cfg = tiny_train_config(epochs=4, learning_rate=1e8, weight_decay=1.0)
        with pytest.raises(TrainingDiverged) as excinfo:
            train(cfg, manifest)
        err = excinfo.value
        assert err.learning_rate == 1e8
        assert len(err.batch_ids) > 0
        assert all(isinstance(i, str) for i in err.batch_ids)

    def test_overfit_smoke(self, tmp_path):
        """The full model memorizes 8 images within 500 steps."""
        manifest = synth_dataset(
            small_synth_config(n_images=8, image_size=32, positive_rate=0.5,
                               object_scale_ranges=(12, 18), clutter_range=(0, 0), rng_seed=21),
            tmp_path / "d8",
        )
        cfg = tiny_train_config(
            learning_rate=0.05,
            batch_size=8,
            epochs=500,
            input_scale=32,
            crop_scale=32,
            augment=AugmentPipelineConfig(flip_prob=0.0, rotate_range=(0.0, 0.0), synthesis="none"),
            attention=AttentionConfig(enabled=True),
            head=HeadConfig(mode="rescoring6"),
            rng_seed=1,
            eval_every=0,
        )
        result = train(cfg, manifest)
        assert result.log.epochs[-1].mean_loss < 0.01
