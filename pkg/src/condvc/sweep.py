"""The mode x C x lambda sweep behind the BD-rate, complexity and trade-off reports."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .complexity import complexity_report, write_complexity
from .config import STANDARD_LAMBDAS, CodingMode, DataConfig
from .evaluation import (
    RDCurve,
    RDPoint,
    bd_report_json,
    bd_table,
    curves_from_rows,
    plot_rd_curves,
    plot_tradeoff,
    render_bd_table,
    write_rd_csv,
)

log = logging.getLogger(__name__)

# training order: CR starts from CC and MCR from CR at the same C and lambda
_ORDER = (CodingMode.CC, CodingMode.CR, CodingMode.MCR)


def checkpoint_name(mode: CodingMode, channels: int, lmbda: float) -> str:
    return f"{mode.name.lower()}_C{channels}_lambda{lmbda:g}.pt"


def sweep_grid(sweep_cfg: dict, base_channels: int) -> tuple[list, list, list]:
    modes = [CodingMode.parse(m) for m in sweep_cfg.get("modes", ["cc", "cr", "mcr"])]
    chans = sorted({int(c) for c in sweep_cfg.get("channels", [base_channels])}, reverse=True)
    lambdas = [float(l) for l in sweep_cfg.get("lambdas", STANDARD_LAMBDAS)]
    return modes, chans, lambdas


def generate_data(out: Path, data: DataConfig, frames: int, sequences: int, seed: int) -> Path:
    from .data import PATTERNS, SynthSpec, synth_sequence, write_yuv420

    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(sequences):
        pattern = PATTERNS[i % len(PATTERNS)]
        motion = tuple(float(np.round(v, 1)) for v in rng.uniform(-data.max_motion, data.max_motion, 2))
        spec = SynthSpec(pattern, motion, data.noise_sigma, frames, data.frame_size, data.frame_size,
                         int(rng.integers(0, 2 ** 31)))
        write_yuv420(out / f"{i:02d}_{pattern}.yuv", synth_sequence(spec))
    return out


def ensure_checkpoints(cfg: dict, ckpt_dir: Path, modes, chans, lambdas) -> dict:
    """Load or train every (mode, C, lambda) cell; returns {(mode, C, lambda): Checkpoint}."""
    from .training import Checkpoint, run_schedule

    ckpt_dir.mkdir(parents=True, exist_ok=True)
    base = cfg["train"]
    needed = set(modes)
    if CodingMode.MCR in needed:
        needed.add(CodingMode.CR)
    if CodingMode.CR in needed:
        needed.add(CodingMode.CC)
    out = {}
    for c in chans:
        for lam in lambdas:
            prev = None
            for mode in _ORDER:
                if mode not in needed:
                    continue
                path = ckpt_dir / checkpoint_name(mode, c, lam)
                if path.exists():
                    ck = Checkpoint.load(path)
                else:
                    log.info("training %s", path.name)
                    tcfg = base.with_(model=base.model.with_(mode=mode, channels=c), lmbda=lam)
                    ck = run_schedule(tcfg, prev)[-1]
                    ck.save(path)
                out[(mode, c, lam)] = ck
                prev = ck
    return out


def run_sweep(cfg: dict, out: Path, checkpoints: Path | None = None, data: Path | None = None,
              anchor: str | None = None) -> dict:
    from .cli import _descriptors, evaluate_checkpoint, model_label

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    sw = cfg["sweep"]
    modes, chans, lambdas = sweep_grid(sw, cfg["train"].model.channels)
    frames, gop = cfg["eval"]["frames"], cfg["eval"]["gop"]
    if data is None:
        data = generate_data(out / "data", cfg["train"].data, frames, int(sw.get("sequences", 2)),
                             cfg["train"].seed + 7)
    descs = _descriptors(data)
    cks = ensure_checkpoints(cfg, checkpoints or out / "checkpoints", modes, chans, lambdas)

    rows = []
    for c in chans:
        for mode in modes:
            for lam in lambdas:
                rows += evaluate_checkpoint(cks[(mode, c, lam)], descs, frames, gop)
    paths = {"rd_csv": out / "rd.csv"}
    write_rd_csv(paths["rd_csv"], rows)

    labels = [model_label(m, c) for c in chans for m in modes]
    anchor = anchor or model_label(CodingMode.CC, chans[0])
    curves = curves_from_rows(rows, strict=False)
    if anchor not in curves:
        curves[anchor] = {}
    reports = bd_table(curves, anchor, strict=False)
    reports = {lab: reports[lab] for lab in labels if lab in reports}
    paths["bd_json"] = out / "bdrate.json"
    paths["bd_json"].write_text(bd_report_json(reports, anchor))
    paths["bd_txt"] = out / "bdrate.txt"
    paths["bd_txt"].write_text(render_bd_table(reports, anchor) + "\n")

    model_cfgs = [cfg["train"].model.with_(mode=m, channels=c) for c in chans for m in modes]
    comp = complexity_report(model_cfgs, anchor=labels.index(anchor))
    bd_avg = {lab: r.dataset_average for lab, r in reports.items()}
    cpaths = write_complexity(comp, out, bd_avg)
    paths.update(complexity_csv=cpaths["csv"], complexity_json=cpaths["json"], complexity_txt=cpaths["txt"])

    points = [{"label": r.label, "bd_rate": bd_avg[r.label], "dec_kmacs_per_pixel": r.dec_kmacs_per_pixel,
               "enc_kmacs_per_pixel": r.enc_kmacs_per_pixel} for r in comp]
    paths["scatter"] = out / "bdrate_vs_complexity.png"
    plot_tradeoff(points, paths["scatter"])

    mean_curves = {}
    for lab in labels:
        pts = []
        for lam in lambdas:
            sel = [r for r in rows if r["label"] == lab and r["lambda"] == lam]
            pts.append(RDPoint(float(np.mean([r["bpp"] for r in sel])), float(np.mean([r["psnr"] for r in sel]))))
        mean_curves[lab] = RDCurve(pts, lab)
    paths["rd_plot"] = out / "rd_curves.png"
    plot_rd_curves(mean_curves, paths["rd_plot"], "sequence-averaged RD")
    return paths


def bottleneck_trend(base, seeds=(0, 1, 2), channels=(16, 4), lmbda: float = 512,
                     cache_dir: Path | None = None) -> dict:
    """Validation-loss degradation from the widest to the narrowest C for CC and CR.

    ``base`` is a TrainConfig; CR at each (seed, C) starts from the CC model of
    the same cell. Results and checkpoints are cached per cell under ``cache_dir``,
    tagged with a digest of the config, so an interrupted run resumes and a
    changed config never reuses stale models. Returns per-seed losses,
    degradations and whether CC degraded more than CR.
    """
    import hashlib
    import json

    from .training import Checkpoint, run_schedule, validation_clips, validation_loss

    wide, narrow = max(channels), min(channels)
    tag_src = dict(base.with_(seed=0, model=base.model.with_(channels=wide)).to_dict(), lmbda=lmbda)
    tag = hashlib.sha256(json.dumps(tag_src, sort_keys=True, default=str).encode()).hexdigest()[:10]
    out = {"lambda": lmbda, "channels": [wide, narrow], "tag": tag, "seeds": {}}
    for seed in seeds:
        losses = {}
        for c in (wide, narrow):
            cfg = base.with_(seed=seed, lmbda=lmbda, model=base.model.with_(mode=CodingMode.CC, channels=c))
            val = validation_clips(cfg)
            prev = None
            for mode in (CodingMode.CC, CodingMode.CR):
                key = f"{mode.name.lower()}_C{c}_seed{seed}"
                res_path = cache_dir / f"{key}_{tag}.json" if cache_dir else None
                ck_path = cache_dir / f"{key}_{tag}.pt" if cache_dir else None
                if res_path is not None and res_path.exists() and ck_path.exists():
                    losses[key] = json.loads(res_path.read_text())["loss"]
                    prev = Checkpoint.load(ck_path)
                    continue
                log.info("training %s", key)
                ck = run_schedule(cfg.with_(model=cfg.model.with_(mode=mode)), prev)[-1]
                losses[key] = validation_loss(ck.build(), val, lmbda)["loss"]
                if cache_dir is not None:
                    cache_dir.mkdir(parents=True, exist_ok=True)
                    ck.save(ck_path)
                    res_path.write_text(json.dumps({"loss": losses[key]}))
                prev = ck
        deg = {m: losses[f"{m}_C{narrow}_seed{seed}"] - losses[f"{m}_C{wide}_seed{seed}"] for m in ("cc", "cr")}
        out["seeds"][seed] = {"losses": losses, "degradation": deg, "cc_more_sensitive": deg["cc"] > deg["cr"]}
    out["wins"] = sum(s["cc_more_sensitive"] for s in out["seeds"].values())
    return out
