"""The seven-step training schedule, its two objectives, freezing and EPA finetuning."""

from __future__ import annotations

import csv
import enum
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .codec import InterFrameCodec, build_model
from .config import CodingMode, ConfigError, TrainConfig, digest_of
from .data import FrameSequence, synth_clips
from .motion import warp

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class Objective(enum.Enum):
    MOTION_COMP = "motion_comp"
    FULL_RD = "full_rd"


@dataclass(frozen=True)
class TrainPhaseSpec:
    step: int
    trainable_modules: frozenset
    objective: Objective
    num_frames: int
    epochs: int
    epa: bool

    def __post_init__(self):
        if not 1 <= self.step <= 7:
            raise ValueError(f"step {self.step} outside 1..7")
        if self.num_frames not in (3, 5):
            raise ValueError("num_frames must be 3 or 5")
        if self.epa != (self.step >= 6):
            raise ValueError("EPA is reserved for steps 6 and 7")


_CODEC = frozenset({"inter_codec", "fe_and_proj", "mask_gen"})
_TABLE = (
    (1, frozenset({"fe_and_proj"}), Objective.MOTION_COMP, 3, 2),
    (2, _CODEC, Objective.FULL_RD, 3, 4),
    (3, _CODEC, Objective.FULL_RD, 5, 4),
    (4, _CODEC | {"motion_codec"}, Objective.FULL_RD, 3, 3),
    (5, _CODEC | {"motion_codec"}, Objective.FULL_RD, 5, 3),
    (6, _CODEC | {"motion_codec"}, Objective.FULL_RD, 5, 2),
    (7, _CODEC | {"motion_codec", "menet"}, Objective.FULL_RD, 5, 2),
)


def schedule(mode: CodingMode | str = CodingMode.MCR) -> list[TrainPhaseSpec]:
    """Schedule rows for ``mode``; the mask generator only exists (and trains) in MCR."""
    mode = CodingMode.parse(mode)
    rows = []
    for step, mods, obj, frames, epochs in _TABLE:
        if mode is not CodingMode.MCR:
            mods = mods - {"mask_gen"}
        rows.append(TrainPhaseSpec(step, frozenset(mods), obj, frames, epochs, step >= 6))
    return rows


# --------------------------------------------------------------------------- objectives

def bits_to_bpp(bits: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    n, _, h, w = x.shape
    return bits / (n * h * w)


def compute_loss(objective: Objective | str, outputs: dict, x_t: torch.Tensor, lmbda: float) -> dict:
    """Rate in bpp plus lambda times MSE on [0, 1] pixels.

    MOTION_COMP uses the motion rate and D(x_t, x_pix); FULL_RD the total rate
    and D(x_t, x_hat). Returns a dict with ``loss``, ``R`` and ``D`` tensors.
    """
    objective = Objective(objective)
    if objective is Objective.MOTION_COMP:
        if outputs.get("x_pix") is None:
            raise ConfigError("motion-compensation objective needs a pixel predictor (CR/MCR only)")
        rate = bits_to_bpp(outputs["motion_bits"], x_t)
        dist = F.mse_loss(outputs["x_pix"], x_t)
    else:
        rate = bits_to_bpp(outputs["total_bits"], x_t)
        dist = F.mse_loss(outputs["x_hat"], x_t)
    return {"loss": rate + lmbda * dist, "R": rate, "D": dist}


def _as_clip_tensor(sequence) -> torch.Tensor:
    """Accept a FrameSequence, (T, 3, H, W) or (N, T, 3, H, W) array/tensor -> (N, T, 3, H, W)."""
    if isinstance(sequence, FrameSequence):
        sequence = sequence.stack()
    x = torch.as_tensor(np.asarray(sequence, dtype=np.float32)) if not torch.is_tensor(sequence) else sequence
    if x.dim() == 4:
        x = x[None]
    if x.dim() != 5:
        raise ValueError(f"expected clips of shape (N, T, 3, H, W), got {tuple(x.shape)}")
    return x


def rollout_losses(model: InterFrameCodec, clips, num_frames: int, lmbda: float, *,
                   objective: Objective = Objective.FULL_RD, detach: bool = False,
                   phase: str = "train") -> list[dict]:
    """Code frames 1..num_frames-1 in order; frame 0 is the given reference.

    FULL_RD uses the previous reconstruction as reference (detached when
    ``detach``). MOTION_COMP has no reconstruction, so the previous source
    frame is the reference.
    """
    x = _as_clip_tensor(clips)
    if num_frames < 2 or num_frames > x.shape[1]:
        raise ValueError(f"need 2 <= num_frames <= {x.shape[1]}, got {num_frames}")
    ref = x[:, 0]
    out = []
    for k in range(1, num_frames):
        x_t = x[:, k]
        if objective is Objective.MOTION_COMP:
            res = model(x_t, x[:, k - 1], phase=phase, stage="motion_comp")
        else:
            res = model(x_t, ref, phase=phase)
            ref = res["x_hat"].detach() if detach else res["x_hat"]
        out.append(compute_loss(objective, res, x_t, lmbda))
    return out


def epa_rollout(model: InterFrameCodec, sequence, num_frames: int, lmbda: float = 512,
                phase: str = "train") -> torch.Tensor:
    """Mean per-frame FULL_RD loss over a cascade with no detaching between frames."""
    losses = rollout_losses(model, sequence, num_frames, lmbda, detach=False, phase=phase)
    return torch.stack([l["loss"] for l in losses]).mean()


# --------------------------------------------------------------------------- freezing

def set_trainable(model: InterFrameCodec, groups) -> list[torch.nn.Parameter]:
    """Freeze everything, then unfreeze the parameters of ``groups``; returns the trainable list."""
    for p in model.parameters():
        p.requires_grad_(False)
    params = []
    for g in sorted(groups):
        for p in model.group_parameters(g):
            p.requires_grad_(True)
            params.append(p)
    return params


def trainable_groups(model: InterFrameCodec) -> set[str]:
    """Groups whose parameters are all trainable."""
    return {g for g in model.available_groups() if all(p.requires_grad for p in model.group_parameters(g))}


def frozen_hash(model: InterFrameCodec) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        if not p.requires_grad:
            h.update(name.encode())
            h.update(p.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


class FreezeViolation(RuntimeError):
    pass


# --------------------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    config: dict
    step: int
    state: dict
    config_digest: bytes
    optimizer_state: dict | None = None
    history: list = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def build(self) -> InterFrameCodec:
        model = InterFrameCodec(self.train_config.model)
        model.load_state_dict(self.state)
        model.eval()
        return model

    def save(self, path: str | Path):
        torch.save({
            "version": self.version, "config": self.config, "step": self.step,
            "state": self.state, "config_digest": self.config_digest,
            "optimizer_state": self.optimizer_state, "history": self.history,
        }, path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        d = torch.load(path, map_location="cpu", weights_only=False)
        if d.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: checkpoint version {d.get('version')} unsupported")
        ck = cls(d["config"], d["step"], d["state"], d["config_digest"], d.get("optimizer_state"),
                 d.get("history", []), d["version"])
        if digest_of(ck.config) != ck.config_digest:
            raise ConfigError(f"{path}: config digest mismatch")
        return ck


def make_checkpoint(cfg: TrainConfig, model: InterFrameCodec, step: int, optimizer=None,
                    history=None) -> Checkpoint:
    cfg_dict = cfg.to_dict()
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(cfg_dict, step, state, digest_of(cfg_dict),
                      optimizer.state_dict() if optimizer is not None else None, list(history or []))


# --------------------------------------------------------------------------- data

class ClipSampler:
    """Fixed seed-to-sample mapping over a synthetic clip bank."""

    def __init__(self, clips: np.ndarray, batch_size: int, seed: int):
        self.clips = torch.from_numpy(np.ascontiguousarray(clips))
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)

    def sample(self, num_frames: int) -> torch.Tensor:
        n, t = self.clips.shape[:2]
        idx = self.rng.integers(0, n, size=self.batch_size)
        start = self.rng.integers(0, t - num_frames + 1, size=self.batch_size)
        return torch.stack([self.clips[i, s:s + num_frames] for i, s in zip(idx, start)])


def training_clips(cfg: TrainConfig) -> np.ndarray:
    d = cfg.data
    return synth_clips(d.num_train_clips, d.clip_frames, d.frame_size, d.source_size,
                       d.max_motion, d.noise_sigma, d.seed)


def validation_clips(cfg: TrainConfig) -> np.ndarray:
    d = cfg.data
    return synth_clips(d.num_val_clips, d.clip_frames, d.frame_size, d.source_size,
                       d.max_motion, d.noise_sigma, d.seed + 1_000_003)


@torch.no_grad()
def validation_loss(model: InterFrameCodec, clips: np.ndarray, lmbda: float, num_frames: int | None = None) -> dict:
    """Mean FULL_RD loss with hard quantization over a sequential rollout of each clip."""
    was_training = model.training
    model.eval()
    x = _as_clip_tensor(clips)
    num_frames = num_frames or x.shape[1]
    losses = rollout_losses(model, x, num_frames, lmbda, phase="eval")
    model.train(was_training)
    return {k: float(torch.stack([l[k] for l in losses]).mean()) for k in ("loss", "R", "D")}


# --------------------------------------------------------------------------- warm-up

def warmup_motion(model: InterFrameCodec, clips: np.ndarray, cfg: TrainConfig, iters: int | None = None) -> list[float]:
    """Pretrain MENet and the motion codec before step 1.

    Targets are references warped by a random constant flow, so the true flow
    is known: MENet gets an L1 flow loss plus a photometric term, the motion
    codec gets R_motion + lambda * photometric MSE of the decoded flow.
    """
    iters = cfg.warmup_iters if iters is None else iters
    params = set_trainable(model, {"menet", "motion_codec"})
    opt = torch.optim.Adam(params, lr=cfg.warmup_learning_rate)
    sampler = ClipSampler(clips, cfg.batch_size, cfg.seed + 17)
    gen = torch.Generator().manual_seed(cfg.seed + 23)
    m = cfg.data.max_motion
    losses = []
    for _ in range(iters):
        x_ref = sampler.sample(1)[:, 0]
        n, _, h, w = x_ref.shape
        true_flow = ((torch.rand(n, 2, 1, 1, generator=gen) * 2 - 1) * m).expand(n, 2, h, w).contiguous()
        x_t = warp(x_ref, true_flow)
        flow = model.flow_net(x_t, x_ref)
        flow_hat, bits = model.motion_codec(flow.detach())
        loss = (F.l1_loss(flow, true_flow) + F.mse_loss(warp(x_ref, flow), x_t) * 10.0
                + bits_to_bpp(bits, x_t) + cfg.lmbda * F.mse_loss(warp(x_ref, flow_hat), x_t))
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses


# --------------------------------------------------------------------------- schedule

def run_step(model: InterFrameCodec, spec: TrainPhaseSpec, sampler: ClipSampler, cfg: TrainConfig,
             audit: bool = True, curve: list | None = None) -> torch.optim.Optimizer:
    """Train one schedule row; raises FreezeViolation if a frozen weight moves."""
    groups = spec.trainable_modules & model.available_groups()
    params = set_trainable(model, groups)
    before = frozen_hash(model) if audit else None
    lr = cfg.epa_learning_rate if spec.epa else cfg.learning_rate
    opt = torch.optim.Adam(params, lr=lr)
    model.train()
    for it in range(spec.epochs * cfg.iters_per_epoch):
        clips = sampler.sample(spec.num_frames)
        if spec.epa:
            losses = rollout_losses(model, clips, spec.num_frames, cfg.lmbda, detach=False)
        else:
            losses = rollout_losses(model, clips, spec.num_frames, cfg.lmbda,
                                    objective=spec.objective, detach=True)
        loss = torch.stack([l["loss"] for l in losses]).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        if curve is not None:
            curve.append({
                "step": spec.step, "iteration": it, "loss": loss.item(),
                "R": float(torch.stack([l["R"].detach() for l in losses]).mean()),
                "D": float(torch.stack([l["D"].detach() for l in losses]).mean()),
            })
    if audit and frozen_hash(model) != before:
        raise FreezeViolation(f"step {spec.step}: frozen weights changed")
    return opt


def _init_model(cfg: TrainConfig, init: Checkpoint | None) -> tuple[InterFrameCodec, bool]:
    """Returns (model, needs_warmup)."""
    mode = cfg.model.mode
    model = build_model(cfg.model, seed=cfg.seed)
    if mode is CodingMode.CC:
        if init is not None:
            model.load_state_dict(init.state)
            return model, False
        return model, True
    want = CodingMode.CC if mode is CodingMode.CR else CodingMode.CR
    if init is None:
        raise ConfigError(f"{mode.name} training needs a {want.name} checkpoint with C={cfg.model.channels}")
    src = init.train_config.model
    if src.mode is not want or src.channels != cfg.model.channels:
        raise ConfigError(f"{mode.name} must start from {want.name} at C={cfg.model.channels}, "
                          f"got {src.mode.name} at C={src.channels}")
    missing, unexpected = model.load_state_dict(init.state, strict=False)
    if unexpected:
        raise ConfigError(f"init checkpoint has unexpected weights: {unexpected[:3]}")
    return model, False


def run_schedule(cfg: TrainConfig, init: Checkpoint | None = None, out_dir: str | Path | None = None,
                 steps=None, clips: np.ndarray | None = None) -> list[Checkpoint]:
    """Run the schedule and return one checkpoint per executed step.

    CC starts from scratch: a motion warm-up, then steps 2..7 (there is no
    pixel predictor to train in step 1). CR starts from a CC checkpoint and
    MCR from a CR checkpoint, both at step 1.
    """
    torch.manual_seed(cfg.seed)
    model, warm = _init_model(cfg, init)
    clips = training_clips(cfg) if clips is None else clips
    curve: list[dict] = []
    t0 = time.time()
    if warm:
        for i, l in enumerate(warmup_motion(model, clips, cfg)):
            curve.append({"step": 0, "iteration": i, "loss": l, "R": float("nan"), "D": float("nan")})
    rows = schedule(cfg.model.mode)
    if cfg.model.mode is CodingMode.CC:
        rows = [r for r in rows if r.step != 1]
    if steps is not None:
        rows = [r for r in rows if r.step in set(steps)]
    sampler = ClipSampler(clips, cfg.batch_size, cfg.seed)
    out = []
    for spec in rows:
        opt = run_step(model, spec, sampler, cfg, curve=curve)
        out.append(make_checkpoint(cfg, model, spec.step, opt, curve))
        log.info("step %d done after %.1fs, last loss %.4f", spec.step, time.time() - t0, curve[-1]["loss"])
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for ck in out:
            ck.save(out_dir / f"step{ck.step}.pt")
        write_curve(out_dir / "training_curve.csv", curve)
    return out


def write_curve(path: str | Path, curve: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "iteration", "loss", "R", "D"])
        w.writeheader()
        w.writerows(curve)
