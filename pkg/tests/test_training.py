import csv
import math

import numpy as np
import pytest
import torch

from condvc.codec import build_model
from condvc.config import ConfigError, DataConfig, TrainConfig, toy_model_config
from condvc.data import synth_clips
from condvc.training import (
    Checkpoint,
    ClipSampler,
    FreezeViolation,
    Objective,
    TrainPhaseSpec,
    compute_loss,
    epa_rollout,
    frozen_hash,
    make_checkpoint,
    rollout_losses,
    run_schedule,
    run_step,
    schedule,
    set_trainable,
    trainable_groups,
    validation_clips,
    validation_loss,
)

TINY_DATA = DataConfig(num_train_clips=4, num_val_clips=2, clip_frames=5)


def tiny_cfg(mode="cc", C=4, **kw):
    base = dict(model=toy_model_config(mode, C), batch_size=1, iters_per_epoch=1, warmup_iters=2,
                learning_rate=1e-3, epa_learning_rate=1e-4, data=TINY_DATA)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def clips():
    return synth_clips(2, 5, 64, 96, 2.0, 0.02, seed=3)


class TestSchedule:
    def test_rows(self):
        rows = schedule("mcr")
        assert [r.step for r in rows] == list(range(1, 8))
        assert [r.epochs for r in rows] == [2, 4, 4, 3, 3, 2, 2]
        assert [r.num_frames for r in rows] == [3, 3, 5, 3, 5, 5, 5]
        assert [r.epa for r in rows] == [False] * 5 + [True] * 2
        assert rows[0].objective is Objective.MOTION_COMP
        assert all(r.objective is Objective.FULL_RD for r in rows[1:])

    def test_trainable_sets(self):
        rows = schedule("mcr")
        assert rows[0].trainable_modules == {"fe_and_proj"}
        assert rows[3].trainable_modules == {"inter_codec", "motion_codec", "fe_and_proj", "mask_gen"}
        assert "menet" in rows[6].trainable_modules
        assert all("menet" not in r.trainable_modules for r in rows[:6])

    @pytest.mark.parametrize("mode", ["cc", "cr"])
    def test_mask_gen_mcr_only(self, mode):
        assert all("mask_gen" not in r.trainable_modules for r in schedule(mode))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            TrainPhaseSpec(8, frozenset(), Objective.FULL_RD, 5, 1, True)
        with pytest.raises(ValueError):
            TrainPhaseSpec(3, frozenset(), Objective.FULL_RD, 4, 1, False)
        with pytest.raises(ValueError):
            TrainPhaseSpec(3, frozenset(), Objective.FULL_RD, 5, 1, True)


class TestLoss:
    def _outputs(self, bpp, mse, shape=(1, 3, 8, 8)):
        n, _, h, w = shape
        x_t = torch.zeros(shape)
        return {"total_bits": torch.tensor(bpp * n * h * w), "x_hat": torch.full(shape, math.sqrt(mse))}, x_t

    def test_arithmetic_example(self):
        out, x = self._outputs(0.10, 0.001)
        assert compute_loss("full_rd", out, x, 256)["loss"].item() == pytest.approx(0.356, abs=1e-6)

    def test_perfect_reconstruction(self):
        out, x = self._outputs(0.2, 0.0)
        assert compute_loss(Objective.FULL_RD, out, x, 1024)["loss"].item() == pytest.approx(0.2)

    def test_lambda_linearity(self):
        out, x = self._outputs(0.3, 0.004)
        a = compute_loss("full_rd", out, x, 2048)
        b = compute_loss("full_rd", out, x, 256)
        assert (a["loss"] - b["loss"]).item() == pytest.approx(1792 * a["D"].item(), rel=1e-6)

    def test_motion_comp(self):
        x = torch.zeros(1, 3, 4, 4)
        out = {"motion_bits": torch.tensor(16.0), "x_pix": torch.full((1, 3, 4, 4), 0.1)}
        res = compute_loss("motion_comp", out, x, 100)
        assert res["R"].item() == pytest.approx(1.0) and res["loss"].item() == pytest.approx(2.0)
        with pytest.raises(ConfigError):
            compute_loss("motion_comp", {"motion_bits": torch.tensor(1.0), "x_pix": None}, x, 100)


class TestRollout:
    def test_two_frames_is_single_frame(self, clips):
        model = build_model(toy_model_config("cr", 8), seed=0)
        x = torch.from_numpy(clips)
        single = compute_loss("full_rd", model(x[:, 1], x[:, 0], phase="eval"), x[:, 1], 512)["loss"]
        assert epa_rollout(model, clips, 2, 512, phase="eval").item() == pytest.approx(single.item(), rel=1e-6)

    def test_too_short(self, clips):
        model = build_model(toy_model_config("cc", 8), seed=0)
        with pytest.raises(ValueError):
            epa_rollout(model, clips[:, :3], 5)
        with pytest.raises(ValueError):
            epa_rollout(model, clips, 1)

    def test_error_accumulates(self):
        # copy-the-reference CR codec: zero flow, identity features, zero generator
        model = build_model(toy_model_config("cr", 4), seed=0)
        with torch.no_grad():
            for p in model.motion_codec.decoder[-1].parameters():
                p.zero_()
            fe = model.feature_extractor
            fe.head.weight.zero_(); fe.head.bias.zero_()
            for c in range(3):
                fe.head.weight[c, c, 1, 1] = 1.0
            fe.block.conv2.weight.zero_(); fe.block.conv2.bias.zero_()
            model.projection.conv.weight.zero_(); model.projection.conv.bias.zero_()
            for c in range(3):
                model.projection.conv.weight[c, c, 1, 1] = 1.0
            for p in model.frame_gen.net[-1].parameters():
                p.zero_()
        clip = synth_clips(2, 5, 64, 96, 2.5, 0.02, seed=11)
        with torch.no_grad():
            losses = [l["D"].item() for l in rollout_losses(model, clip, 5, 512, phase="eval")]
        assert all(b >= a for a, b in zip(losses, losses[1:]))
        assert losses[-1] > losses[0]

    def test_gradient_reaches_first_frame(self, clips):
        model = build_model(toy_model_config("cr", 8), seed=0)
        x = torch.from_numpy(clips).clone().requires_grad_(True)
        last = rollout_losses(model, x, 5, 512, detach=False)[-1]["loss"]
        (g,) = torch.autograd.grad(last, x)
        # frame 0 only reaches the last loss through the reconstructions of frames 1..3
        assert g[:, 0].norm() > 0
        x2 = torch.from_numpy(clips).clone().requires_grad_(True)
        last = rollout_losses(model, x2, 5, 512, detach=True)[-1]["loss"]
        (g2,) = torch.autograd.grad(last, x2, allow_unused=True)
        assert g2[:, 0].norm() == 0


class TestFreezing:
    def test_set_trainable(self):
        model = build_model(toy_model_config("mcr", 4), seed=0)
        params = set_trainable(model, {"mask_gen", "menet"})
        assert trainable_groups(model) == {"mask_gen", "menet"}
        assert len(params) == len(model.group_parameters("mask_gen")) + len(model.group_parameters("menet"))

    def test_audit_all_steps(self):
        cfg = tiny_cfg("mcr", 4)
        model = build_model(cfg.model, seed=0)
        sampler = ClipSampler(synth_clips(2, 5, 64, 96, 2.0, 0.01, 0), 1, 0)
        for spec in schedule("mcr"):
            before = {g: [p.detach().clone() for p in model.group_parameters(g)] for g in model.available_groups()}
            run_step(model, spec, sampler, cfg)
            assert trainable_groups(model) == spec.trainable_modules
            for g, old in before.items():
                same = all(torch.equal(a, b) for a, b in zip(old, model.group_parameters(g)))
                assert same == (g not in spec.trainable_modules), (spec.step, g)

    def test_violation_detected(self, monkeypatch):
        cfg = tiny_cfg("cc", 4)
        model = build_model(cfg.model, seed=0)
        sampler = ClipSampler(synth_clips(2, 5, 64, 96, 2.0, 0.01, 0), 1, 0)
        spec = schedule("cc")[1]
        orig = torch.optim.Adam.step

        def leaky_step(self, *a, **k):
            with torch.no_grad():
                model.flow_net.levels[0].net[0].bias.add_(1.0)
            return orig(self, *a, **k)

        monkeypatch.setattr(torch.optim.Adam, "step", leaky_step)
        with pytest.raises(FreezeViolation):
            run_step(model, spec, sampler, cfg)

    def test_frozen_hash_ignores_trainable(self):
        model = build_model(toy_model_config("cc", 4), seed=0)
        set_trainable(model, {"inter_codec"})
        h = frozen_hash(model)
        with torch.no_grad():
            model.g_enc.s1.bias.add_(1)
        assert frozen_hash(model) == h


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_descent_small_lr(seed, clips):
    model = build_model(toy_model_config("cr", 8), seed=seed)
    set_trainable(model, {"inter_codec", "fe_and_proj"})
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=1e-5)

    def loss():
        torch.manual_seed(100 + seed)
        return torch.stack([l["loss"] for l in rollout_losses(model, clips, 2, 512)]).mean()

    before = loss()
    opt.zero_grad()
    before.backward()
    opt.step()
    with torch.no_grad():
        assert loss().item() < before.item()


class TestRunSchedule:
    def test_cc_determinism_and_outputs(self, tmp_path):
        cfg = tiny_cfg()
        a = run_schedule(cfg, out_dir=tmp_path)
        b = run_schedule(cfg)
        assert [c.step for c in a] == [2, 3, 4, 5, 6, 7]
        val = validation_clips(cfg)
        la = validation_loss(a[-1].build(), val, cfg.lmbda)["loss"]
        lb = validation_loss(b[-1].build(), val, cfg.lmbda)["loss"]
        assert la == pytest.approx(lb, rel=1e-4)
        assert (tmp_path / "step7.pt").exists()
        with open(tmp_path / "training_curve.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["step", "iteration", "loss", "R", "D"]
        assert {r["step"] for r in rows} == {"0", "2", "3", "4", "5", "6", "7"}

    def test_init_policy(self):
        with pytest.raises(ConfigError):
            run_schedule(tiny_cfg("cr"))
        cc = run_schedule(tiny_cfg("cc"), steps=[2])[-1]
        with pytest.raises(ConfigError):
            run_schedule(tiny_cfg("mcr"), init=cc)
        with pytest.raises(ConfigError):
            run_schedule(tiny_cfg("cr", 8), init=cc)
        cr = run_schedule(tiny_cfg("cr"), init=cc, steps=[1, 2])
        assert [c.step for c in cr] == [1, 2]
        mcr = run_schedule(tiny_cfg("mcr"), init=cr[-1], steps=[1])
        m = mcr[-1].build()
        # weights shared with the CR parent survive the step-1 pass untouched outside FE/projection
        assert torch.equal(m.g_enc.s1.weight, cr[-1].build().g_enc.s1.weight)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = tiny_cfg()
        model = build_model(cfg.model, seed=0)
        ck = make_checkpoint(cfg, model, 3)
        ck.save(tmp_path / "c.pt")
        back = Checkpoint.load(tmp_path / "c.pt")
        assert back.step == 3 and back.train_config == cfg
        assert back.build().digest() == model.digest()

    def test_digest_and_version(self, tmp_path):
        cfg = tiny_cfg()
        ck = make_checkpoint(cfg, build_model(cfg.model, seed=0), 2)
        ck.config_digest = b"\0" * 8
        ck.save(tmp_path / "bad.pt")
        with pytest.raises(ConfigError, match="digest"):
            Checkpoint.load(tmp_path / "bad.pt")
        ck = make_checkpoint(cfg, build_model(cfg.model, seed=0), 2)
        ck.version = 99
        ck.save(tmp_path / "v.pt")
        with pytest.raises(ConfigError, match="version"):
            Checkpoint.load(tmp_path / "v.pt")


def test_sampler_deterministic():
    bank = synth_clips(3, 5, 64, 96, 1.0, 0.0, 0)
    a, b = ClipSampler(bank, 2, 7), ClipSampler(bank, 2, 7)
    for n in (3, 5, 3):
        assert torch.equal(a.sample(n), b.sample(n))
