import json

import numpy as np
import pytest
import torch

from protoflow.bank import ChecksumMismatch, VersionMismatch
from protoflow.core import SeededRng, ShapeMismatch
from protoflow.flowmatch import (FlowConfig, FlowModel, NonFiniteLoss, SampleConfig,
                                 TrainConfig, TrainItem, euler_sample, flow_loss,
                                 interpolate, learning_rate, load_checkpoint,
                                 run_stage, run_two_stage, save_checkpoint,
                                 target_velocity)
from protoflow.msc import CompositeCondition, ConditionEncoder, MscConfig


def tiny_encoder(seed=0) -> ConditionEncoder:
    return ConditionEncoder(MscConfig(d_c=16, n_q=4, d_p=3, backbone_layers=1,
                                      backbone_heads=2, seed=seed))


def tiny_model(seed=0, d_model=16) -> FlowModel:
    return FlowModel(FlowConfig(d_latent=2, n_tokens=1, d_model=d_model, layers=2,
                                heads=2, d_c=16, seed=seed))


def tiny_items(encoder: ConditionEncoder, n=8, seed=0) -> list:
    rng = SeededRng(seed)
    items = []
    for _ in range(n):
        items.append(TrainItem(
            z0=torch.from_numpy(rng.normal(size=(1, 2))).double(),
            e_prompt=torch.from_numpy(rng.normal(size=(4, 16))).double(),
            proto=torch.from_numpy(rng.normal(size=(3, 3))).double()))
    return items


class TestPathOps:
    def test_interpolate_endpoints(self):
        z0 = torch.tensor([[1.0, 2.0]])
        z1 = torch.tensor([[-3.0, 4.0]])
        torch.testing.assert_close(interpolate(z0, z1, 0.0), z1.double())
        torch.testing.assert_close(interpolate(z0, z1, 1.0), z0.double())

    def test_interpolate_midpoint(self):
        assert float(interpolate(torch.tensor([2.0]), torch.tensor([0.0]), 0.5)) == 1.0

    def test_velocity_examples(self):
        assert float(target_velocity(torch.tensor([1.0]), torch.tensor([1.0]))) == 0.0
        torch.testing.assert_close(
            target_velocity(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])),
            torch.tensor([1.0, -1.0]).double())

    def test_conservation_identity(self):
        # interpolate(z0, z1, t) + (1 - t) * velocity == z0, elementwise.
        rng = SeededRng(0)
        for _ in range(200):
            shape = (int(rng.integers(3)) + 1, int(rng.integers(4)) + 1)
            z0 = torch.from_numpy(rng.normal(size=shape)).double()
            z1 = torch.from_numpy(rng.normal(size=shape)).double()
            t = float(rng.uniform())
            lhs = interpolate(z0, z1, t) + (1.0 - t) * target_velocity(z0, z1)
            assert float((lhs - z0).abs().max()) <= 1e-12

    def test_velocity_is_path_slope(self):
        rng = SeededRng(1)
        z0 = torch.from_numpy(rng.normal(size=(2, 3))).double()
        z1 = torch.from_numpy(rng.normal(size=(2, 3))).double()
        t1, t2 = 0.2, 0.7
        slope = (interpolate(z0, z1, t2) - interpolate(z0, z1, t1)) / (t2 - t1)
        torch.testing.assert_close(slope, target_velocity(z0, z1))

    def test_flow_loss(self):
        z = torch.from_numpy(SeededRng(2).normal(size=(3, 4))).double()
        assert float(flow_loss(z, z)) == 0.0
        assert float(flow_loss(z + 1.0, z)) == pytest.approx(1.0, abs=1e-12)

    def test_flow_loss_permutation_invariant(self):
        rng = SeededRng(3)
        a = torch.from_numpy(rng.normal(size=(6, 2))).double()
        b = torch.from_numpy(rng.normal(size=(6, 2))).double()
        perm = torch.randperm(6, generator=torch.Generator().manual_seed(0))
        assert float(flow_loss(a, b)) == pytest.approx(
            float(flow_loss(a[perm], b[perm])), abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            interpolate(torch.zeros(2), torch.zeros(3), 0.5)
        with pytest.raises(ShapeMismatch):
            flow_loss(torch.zeros(2), torch.zeros(3))


class TestSchedule:
    def test_stage1_paper_defaults(self):
        cfg = TrainConfig(stage=1, steps=1000)
        warmup = round(0.02 * 1000)
        assert learning_rate(cfg, warmup) == 1e-4
        assert abs(learning_rate(cfg, 1000) - 1e-5) <= 1e-9

    def test_warmup_is_linear(self):
        cfg = TrainConfig(stage=1, steps=500, peak_lr=2e-3)
        warmup = round(0.02 * 500)
        for step in range(1, warmup + 1):
            assert learning_rate(cfg, step) == pytest.approx(2e-3 * step / warmup)

    def test_cosine_monotone_decay(self):
        cfg = TrainConfig(stage=1, steps=300)
        warmup = round(0.02 * 300)
        values = [learning_rate(cfg, s) for s in range(warmup, 301)]
        assert all(b <= a + 1e-15 for a, b in zip(values, values[1:]))

    def test_stage2_constant(self):
        cfg = TrainConfig(stage=2, steps=77, fixed_lr=2e-5)
        assert {learning_rate(cfg, s) for s in range(1, 78)} == {2e-5}

    def test_step_bounds(self):
        cfg = TrainConfig(stage=1, steps=10)
        with pytest.raises(ValueError):
            learning_rate(cfg, 0)
        with pytest.raises(ValueError):
            learning_rate(cfg, 11)


class _ConstantFieldModel:
    """Oracle: returns z0* - z_start regardless of input, so the Euler path
    is exactly straight and any step count lands on z0*."""

    def __init__(self, target: torch.Tensor, start: torch.Tensor):
        self.velocity = (target - start).double()
        self.cfg = FlowConfig(d_latent=target.shape[-1], n_tokens=target.shape[-2])

    def __call__(self, z, t, cond):
        return self.velocity.expand(z.shape[0], -1, -1)


def _dummy_cond(d_c=16) -> CompositeCondition:
    return CompositeCondition(tokens=torch.zeros((3, d_c), dtype=torch.float64),
                              lengths=(1, 1, 1))


class TestEulerSampler:
    @pytest.mark.parametrize("steps", [1, 5, 30])
    def test_constant_field_exact(self, steps):
        rng = SeededRng(4)
        target = torch.from_numpy(rng.normal(size=(1, 2))).double()
        start = torch.from_numpy(rng.normal(size=(1, 2))).double()
        model = _ConstantFieldModel(target, start)
        out = euler_sample(model, _dummy_cond(), SampleConfig(steps=steps, seed=0),
                           z_init=start.unsqueeze(0))
        assert float((out[0] - target).abs().max()) < 1e-9

    def test_unit_guidance_equals_conditional_only(self):
        encoder = tiny_encoder()
        model = tiny_model()
        cond = encoder.encode(torch.zeros((2, 16), dtype=torch.float64),
                              torch.zeros((1, 3), dtype=torch.float64))
        a = euler_sample(model, cond, SampleConfig(steps=5, guidance_scale=1.0, seed=3),
                         count=2, null_cond=encoder.null_condition())
        b = euler_sample(model, cond, SampleConfig(steps=5, guidance_scale=1.0, seed=3),
                         count=2, null_cond=None)
        torch.testing.assert_close(a, b, rtol=0, atol=0)

    def test_guidance_changes_output(self):
        # With condition dropout disabled the null tokens stay untrained,
        # so guided extrapolation must differ from conditional sampling.
        encoder = tiny_encoder(seed=6)
        model = tiny_model(seed=6)
        items = tiny_items(encoder, n=6, seed=6)
        cfg = TrainConfig(stage=1, steps=15, batch=3, peak_lr=1e-2, min_lr=1e-3,
                          uncond_drop_prob=0.0, seed=6)
        run_stage(encoder, model, items, cfg)
        cond = encoder.encode(items[0].e_prompt, items[0].proto)
        out_s1 = euler_sample(model, cond, SampleConfig(steps=10, guidance_scale=1.0,
                                                        seed=9), count=4,
                              null_cond=encoder.null_condition())
        out_s3 = euler_sample(model, cond, SampleConfig(steps=10, guidance_scale=3.0,
                                                        seed=9), count=4,
                              null_cond=encoder.null_condition())
        assert not torch.equal(out_s1, out_s3)

    def test_defaults(self):
        cfg = SampleConfig()
        assert cfg.steps == 30 and cfg.guidance_scale == 3.0

    def test_seeded_init_deterministic(self):
        model = tiny_model()
        cond = _dummy_cond()
        a = euler_sample(model, cond, SampleConfig(steps=2, guidance_scale=1.0, seed=5),
                         count=3)
        b = euler_sample(model, cond, SampleConfig(steps=2, guidance_scale=1.0, seed=5),
                         count=3)
        torch.testing.assert_close(a, b, rtol=0, atol=0)


class TestModel:
    def test_output_shape_matches_input(self):
        model = tiny_model()
        z = torch.zeros((5, 1, 2), dtype=torch.float64)
        out = model(z, 0.3, _dummy_cond().tokens)
        assert out.shape == z.shape

    def test_shape_validation(self):
        model = tiny_model()
        with pytest.raises(ShapeMismatch):
            model(torch.zeros((2, 3, 2), dtype=torch.float64), 0.1,
                  _dummy_cond().tokens)

    def test_batched_condition(self):
        model = tiny_model()
        z = torch.zeros((2, 1, 2), dtype=torch.float64)
        shared = model(z, 0.5, _dummy_cond().tokens)
        batched = model(z, 0.5, _dummy_cond().tokens.unsqueeze(0).expand(2, -1, -1))
        torch.testing.assert_close(shared, batched)

    def test_timestep_changes_output(self):
        model = tiny_model()
        z = torch.ones((1, 1, 2), dtype=torch.float64)
        a = model(z, 0.1, _dummy_cond().tokens)
        b = model(z, 0.9, _dummy_cond().tokens)
        assert not torch.equal(a, b)


class TestTraining:
    def test_deterministic_losses(self):
        histories = []
        for _ in range(2):
            encoder = tiny_encoder(seed=8)
            model = tiny_model(seed=8)
            items = tiny_items(encoder, seed=8)
            cfg = TrainConfig(stage=1, steps=10, batch=4, peak_lr=1e-3, min_lr=1e-4,
                              seed=8)
            histories.append(run_stage(encoder, model, items, cfg))
        assert histories[0] == histories[1]

    def test_non_finite_loss_aborts(self):
        encoder = tiny_encoder()
        model = tiny_model()
        items = tiny_items(encoder)
        items[0].z0[0, 0] = float("inf")
        cfg = TrainConfig(stage=1, steps=2, batch=8, seed=0)
        with pytest.raises(NonFiniteLoss, match="stage 1"):
            run_stage(encoder, model, items, cfg)

    def test_two_stage_validates_stages(self):
        encoder = tiny_encoder()
        model = tiny_model()
        items = tiny_items(encoder)
        with pytest.raises(ValueError):
            run_two_stage(encoder, model, items, items,
                          TrainConfig(stage=2, steps=1), TrainConfig(stage=2, steps=1))
        with pytest.raises(ValueError):
            run_stage(encoder, model, [], TrainConfig(stage=1, steps=1))

    def test_loss_decreases_on_toy_objective(self):
        encoder = tiny_encoder(seed=10)
        model = tiny_model(seed=10)
        items = tiny_items(encoder, n=12, seed=10)
        cfg = TrainConfig(stage=1, steps=60, batch=6, peak_lr=5e-3, min_lr=5e-4,
                          seed=10)
        history = run_stage(encoder, model, items, cfg)
        assert np.mean(history[-10:]) < np.mean(history[:10])

    def test_paper_default_hyperparameters(self):
        cfg = TrainConfig()
        assert (cfg.peak_lr, cfg.min_lr, cfg.warmup_fraction) == (1e-4, 1e-5, 0.02)
        assert cfg.fixed_lr == 2e-5
        assert cfg.weight_decay == 0.01
        assert (cfg.beta1, cfg.beta2, cfg.eps) == (0.9, 0.999, 1e-8)
        assert cfg.uncond_drop_prob == 0.1


class TestCheckpoint:
    def test_round_trip_bitwise_sampling(self, tmp_path):
        encoder = tiny_encoder(seed=12)
        model = tiny_model(seed=12)
        items = tiny_items(encoder, seed=12)
        run_stage(encoder, model, items, TrainConfig(stage=1, steps=5, batch=4, seed=12))
        save_checkpoint(tmp_path / "ckpt", encoder, model, extra={"note": 1})
        enc2, model2, extra = load_checkpoint(tmp_path / "ckpt")
        assert extra == {"note": 1}
        cond = encoder.encode(items[0].e_prompt, items[0].proto)
        cond2 = enc2.encode(items[0].e_prompt, items[0].proto)
        torch.testing.assert_close(cond.tokens, cond2.tokens, rtol=0, atol=0)
        a = euler_sample(model, cond, SampleConfig(steps=4, guidance_scale=1.0, seed=1),
                         count=2)
        b = euler_sample(model2, cond2, SampleConfig(steps=4, guidance_scale=1.0, seed=1),
                         count=2)
        torch.testing.assert_close(a, b, rtol=0, atol=0)

    def test_all_parameters_restored(self, tmp_path):
        encoder = tiny_encoder(seed=13)
        model = tiny_model(seed=13)
        save_checkpoint(tmp_path / "ckpt", encoder, model)
        enc2, model2, _ = load_checkpoint(tmp_path / "ckpt")
        for (name, a), (_, b) in zip(sorted(encoder.state_dict().items()),
                                     sorted(enc2.state_dict().items())):
            assert torch.equal(a, b), name
        for (name, a), (_, b) in zip(sorted(model.state_dict().items()),
                                     sorted(model2.state_dict().items())):
            assert torch.equal(a, b), name

    def test_corruption_detected(self, tmp_path):
        encoder, model = tiny_encoder(), tiny_model()
        save_checkpoint(tmp_path / "ckpt", encoder, model)
        params = sorted((tmp_path / "ckpt" / "params").iterdir())
        blob = bytearray(params[0].read_bytes())
        blob[-1] ^= 0x01
        params[0].write_bytes(bytes(blob))
        with pytest.raises(ChecksumMismatch):
            load_checkpoint(tmp_path / "ckpt")

    def test_version_mismatch(self, tmp_path):
        encoder, model = tiny_encoder(), tiny_model()
        save_checkpoint(tmp_path / "ckpt", encoder, model)
        manifest_path = tmp_path / "ckpt" / "checkpoint.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["format_version"] = 1
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(VersionMismatch):
            load_checkpoint(tmp_path / "ckpt")
