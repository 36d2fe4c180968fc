"""Command-line entry point: data preparation, training, coding, evaluation and reports.

Exit codes: 0 on success, 1 when a pipeline stage fails, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import STANDARD_LAMBDAS, CodingMode, ConfigError, DataConfig, ModelConfig, TrainConfig, toy_model_config

log = logging.getLogger("condvc")

EXIT_OK, EXIT_PIPELINE, EXIT_USAGE = 0, 1, 2


# --------------------------------------------------------------------------- manifest

def _git_stamp() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        return rev.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


@dataclass
class RunManifest:
    command: str
    argv: list
    config_path: str | None
    output_dir: str
    seed: int
    version: str = field(default_factory=lambda: f"{__version__}+{_git_stamp()}")
    started: float = field(default_factory=time.time)
    finished: float | None = None
    artifacts: list = field(default_factory=list)

    def write(self):
        out = Path(self.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(asdict(self), indent=2, default=str))


# --------------------------------------------------------------------------- configuration

def resolve_config(args) -> dict:
    """Config file values overridden by flags."""
    raw = {}
    if getattr(args, "config", None):
        from .config import load_config_file

        raw = load_config_file(args.config)
    preset = raw.get("preset", "toy")
    if preset not in ("toy", "full"):
        raise ConfigError(f"preset must be 'toy' or 'full', got {preset!r}")
    model = dict(raw.get("model", {}))
    if getattr(args, "mode", None):
        model["mode"] = args.mode
    if getattr(args, "channels", None):
        model["channels"] = args.channels
    model.setdefault("mode", "cc")
    model.setdefault("channels", 16 if preset == "toy" else 64)
    if preset == "toy":
        mode, ch = model.pop("mode"), model.pop("channels")
        model_cfg = toy_model_config(mode, ch, **model)
    else:
        model_cfg = ModelConfig.from_dict(model)
    train = {k: v for k, v in raw.get("train", {}).items()}
    if getattr(args, "lmbda", None) is not None:
        train["lmbda"] = args.lmbda
    if getattr(args, "seed", None) is not None:
        train["seed"] = args.seed
    data = DataConfig(**raw.get("data", {}))
    tcfg = TrainConfig(model=model_cfg, data=data, **{k: v for k, v in train.items() if k not in ("model", "data")})
    if not tcfg.standard_lambda:
        log.warning("lambda=%g is outside the standard set %s", tcfg.lmbda, STANDARD_LAMBDAS)
    ev = dict(raw.get("eval", {}))
    if getattr(args, "frames", None):
        ev["frames"] = args.frames
    if getattr(args, "gop", None):
        ev["gop"] = args.gop
    ev.setdefault("frames", 96)
    ev.setdefault("gop", 32)
    return {"preset": preset, "train": tcfg, "eval": ev, "sweep": raw.get("sweep", {}), "raw": raw}


# --------------------------------------------------------------------------- helpers

def _load_checkpoint(path):
    from .training import Checkpoint

    return Checkpoint.load(path)


def _descriptors(path: Path) -> list:
    from .data import read_descriptor

    path = Path(path)
    files = [path] if path.is_file() else sorted(path.glob("*.json"))
    descs = []
    for f in files:
        if f.name == "manifest.json":
            continue
        descs.append(read_descriptor(f))
    if not descs:
        raise ConfigError(f"no sequence descriptors under {path}")
    return descs


def model_label(mode: CodingMode, channels: int) -> str:
    return f"{mode.label} (C={channels})"


def evaluate_checkpoint(ck, descs, frames: int, gop: int) -> list:
    """Encode every sequence with ``ck``; returns RD rows (bpp from container bytes)."""
    from .evaluation import psnr_rgb
    from .data import load_sequence
    from .pipeline import encode_sequence, sequence_bpp

    import torch

    torch.set_num_threads(1)
    model = ck.build()
    cfg = ck.train_config
    rows = []
    for d in descs:
        seq = load_sequence(d, frames)
        res = encode_sequence(seq, model, gop)
        src = seq.stack()
        psnr = float(np.mean([psnr_rgb(a, b) for a, b in zip(src, res.reconstructions)]))
        rows.append({"label": model_label(cfg.model.mode, cfg.model.channels), "sequence_id": seq.source_id,
                     "lambda": cfg.lmbda, "bpp": sequence_bpp(res.bitstream, len(src)), "psnr": psnr})
    return rows


# --------------------------------------------------------------------------- commands

def cmd_prepare_data(args, cfg, manifest):
    from .data import PATTERNS, SynthSpec, synth_sequence, write_yuv420

    d: DataConfig = cfg["train"].data
    rng = np.random.default_rng(cfg["train"].seed)
    out = Path(args.out)
    frames = cfg["eval"]["frames"]
    for i in range(args.sequences):
        pattern = PATTERNS[i % len(PATTERNS)]
        motion = tuple(float(np.round(v, 1)) for v in rng.uniform(-d.max_motion, d.max_motion, 2))
        spec = SynthSpec(pattern, motion, d.noise_sigma, frames, d.frame_size, d.frame_size,
                         int(rng.integers(0, 2 ** 31)))
        path = out / f"{i:02d}_{pattern}.yuv"
        write_yuv420(path, synth_sequence(spec))
        manifest.artifacts.append(str(path))
    print(f"wrote {args.sequences} sequences of {frames} frames to {out}")


def cmd_train(args, cfg, manifest):
    from .training import run_schedule

    init = _load_checkpoint(args.init) if args.init else None
    cks = run_schedule(cfg["train"], init, args.out)
    final = Path(args.out) / "final.pt"
    cks[-1].save(final)
    manifest.artifacts += [str(final), str(Path(args.out) / "training_curve.csv")]
    print(f"trained {len(cks)} steps; final checkpoint {final}")


def cmd_encode(args, cfg, manifest):
    from .data import load_sequence
    from .pipeline import encode_sequence, sequence_bpp

    import torch

    torch.set_num_threads(1)
    ck = _load_checkpoint(args.checkpoint)
    desc = _descriptors(Path(args.input))[0]
    seq = load_sequence(desc, cfg["eval"]["frames"])
    res = encode_sequence(seq, ck.build(), cfg["eval"]["gop"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "stream.bin").write_bytes(res.to_bytes())
    np.save(out / "encoder_recon.npy", np.stack(res.reconstructions))
    manifest.artifacts += [str(out / "stream.bin"), str(out / "encoder_recon.npy")]
    print(f"{len(seq)} frames, {len(res.bitstream)} bytes, {sequence_bpp(res.bitstream, len(seq)):.4f} bpp")


def cmd_decode(args, cfg, manifest):
    from .pipeline import decode_stream

    import torch

    torch.set_num_threads(1)
    ck = _load_checkpoint(args.checkpoint)
    frames = decode_stream(Path(args.input).read_bytes(), ck.build())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "decoded.npy", np.stack(frames))
    manifest.artifacts.append(str(out / "decoded.npy"))
    print(f"decoded {len(frames)} frames")


def cmd_eval(args, cfg, manifest):
    from .evaluation import write_rd_csv

    rows = []
    for path in args.checkpoint:
        rows += evaluate_checkpoint(_load_checkpoint(path), _descriptors(Path(args.input)),
                                    cfg["eval"]["frames"], cfg["eval"]["gop"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rd_csv(out / "rd.csv", rows)
    manifest.artifacts.append(str(out / "rd.csv"))
    for r in rows:
        print(f"{r['label']:<28} {r['sequence_id']:<20} lambda={r['lambda']:<6g} {r['bpp']:.4f} bpp  {r['psnr']:.2f} dB")


def cmd_bdrate(args, cfg, manifest):
    from .evaluation import bd_report_json, bd_table, curves_from_rows, read_rd_csv, render_bd_table

    rows = [r for p in args.input for r in read_rd_csv(p)]
    curves = curves_from_rows(rows)
    anchor = args.anchor or sorted(curves)[0]
    reports = bd_table(curves, anchor)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bdrate.json").write_text(bd_report_json(reports, anchor))
    text = render_bd_table(reports, anchor)
    (out / "bdrate.txt").write_text(text + "\n")
    manifest.artifacts += [str(out / "bdrate.json"), str(out / "bdrate.txt")]
    print(text)


def _parse_channels(values, default):
    return [int(c) for c in values] if values else list(default)


def cmd_complexity(args, cfg, manifest):
    from .complexity import complexity_report, render_complexity_table, write_complexity

    base = cfg["train"].model
    chans = _parse_channels(args.channel_set, [base.channels])
    modes = [CodingMode.parse(m) for m in (args.modes or ["cc", "cr", "mcr"])]
    configs = [base.with_(mode=m, channels=c) for c in sorted(chans, reverse=True) for m in modes]
    labels = [model_label(c.mode, c.channels) for c in configs]
    anchor = args.anchor or labels[0]
    if anchor not in labels:
        raise ConfigError(f"anchor {anchor!r} not among {labels}")
    reports = complexity_report(configs, anchor=labels.index(anchor))
    write_complexity(reports, args.out)
    manifest.artifacts.append(str(Path(args.out) / "complexity.txt"))
    print(render_complexity_table(reports, anchor_label=anchor))


def cmd_entropy_check(args, cfg, manifest):
    from .evaluation import empirical_entropy_check

    if args.joint:
        joint = np.load(args.joint)
        cases = {Path(args.joint).stem: joint}
    else:
        n = 4
        uniform = np.full((n, n), 1.0 / n ** 2)
        noisy = np.zeros((n, n + 2))
        for x in range(n):
            for e, p in ((-1, 0.25), (0, 0.5), (1, 0.25)):
                noisy[x, x + e + 1] += p / n
        cases = {"independent_uniform": uniform, "perfect_predictor": np.eye(n) / n, "unit_noise": noisy}
    result = {}
    for name, joint in cases.items():
        xc = np.arange(joint.shape[1]) - (1 if name == "unit_noise" else 0)
        t = empirical_entropy_check(joint, xc_values=xc)
        result[name] = asdict(t)
        print(f"{name:<22} H(x_t)={t.h_x:.4f}  H(x_t-x_c)={t.h_residual:.4f}  H(x_t|x_c)={t.h_conditional:.4f}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "entropy.json").write_text(json.dumps(result, indent=2))
    manifest.artifacts.append(str(out / "entropy.json"))


def cmd_visualize(args, cfg, manifest):
    from PIL import Image

    from .data import load_sequence, to_8bit
    from .pipeline import encode_sequence

    import torch

    torch.set_num_threads(1)
    ck = _load_checkpoint(args.checkpoint)
    desc = _descriptors(Path(args.input))[0]
    seq = load_sequence(desc, cfg["eval"]["frames"])
    res = encode_sequence(seq, ck.build(), cfg["eval"]["gop"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h, w = seq.height, seq.width

    def save(name, arr, signed=False):
        a = np.asarray(arr, dtype=np.float32)[..., :h, :w]
        if signed:
            a = a + 0.5
        if a.shape[0] == 1:
            a = np.repeat(a, 3, axis=0)
        Image.fromarray(to_8bit(np.clip(a, 0, 1)).transpose(1, 2, 0)).save(out / name)
        manifest.artifacts.append(str(out / name))

    for i, (frame, coded) in enumerate(zip(seq.stack(), res.coded)):
        save(f"{i:03d}_x_t.png", frame)
        save(f"{i:03d}_x_hat.png", res.reconstructions[i])
        if coded is None:
            continue
        if coded.x_pix is not None:
            save(f"{i:03d}_x_pix.png", coded.x_pix[0].numpy())
        save(f"{i:03d}_codec_input.png", coded.signal[0].numpy(), signed=coded.x_pix is not None)
        if coded.mask is not None:
            save(f"{i:03d}_mask.png", coded.mask[0].numpy())
            residue = torch.from_numpy(frame)[None] - coded.x_pix[..., :h, :w]
            save(f"{i:03d}_masked_residue.png", (coded.mask[..., :h, :w] * residue)[0].numpy(), signed=True)
    print(f"wrote {len(manifest.artifacts)} images to {out}")


def cmd_sweep(args, cfg, manifest):
    from .sweep import run_sweep

    paths = run_sweep(cfg, Path(args.out), checkpoints=Path(args.checkpoints) if args.checkpoints else None,
                      data=Path(args.input) if args.input else None, anchor=args.anchor)
    manifest.artifacts += [str(p) for p in paths.values()]
    print(Path(paths["bd_txt"]).read_text())
    print(Path(paths["complexity_txt"]).read_text())


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train": cmd_train,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "bdrate": cmd_bdrate,
    "complexity": cmd_complexity,
    "sweep": cmd_sweep,
    "entropy-check": cmd_entropy_check,
    "visualize": cmd_visualize,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--mode", choices=["cc", "cr", "mcr"])
    common.add_argument("--channels", type=int, help="condition channel size C")
    common.add_argument("--lambda", dest="lmbda", type=float)
    common.add_argument("--seed", type=int)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--frames", type=int)
    common.add_argument("--gop", type=int)
    common.add_argument("--anchor", help="anchor label for BD-rate / complexity deltas")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="condvc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("prepare-data", parents=[common], help="write synthetic YUV420 test sequences")
    s.add_argument("--sequences", type=int, default=4)
    s = sub.add_parser("train", parents=[common], help="run the training schedule")
    s.add_argument("--init", help="checkpoint to start from (required for cr/mcr)")
    for name in ("encode", "visualize"):
        s = sub.add_parser(name, parents=[common], help=f"{name} one sequence")
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--input", required=True, help="sequence descriptor (.json) or a directory of them")
    s = sub.add_parser("decode", parents=[common], help="decode a bitstream")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="bitstream file")
    s = sub.add_parser("eval", parents=[common], help="RD points for checkpoints over a data directory")
    s.add_argument("--checkpoint", required=True, nargs="+")
    s.add_argument("--input", required=True)
    s = sub.add_parser("bdrate", parents=[common], help="BD-rate table from RD CSV files")
    s.add_argument("--input", required=True, nargs="+")
    s = sub.add_parser("complexity", parents=[common], help="kMACs/pixel and parameter table")
    s.add_argument("--modes", nargs="+", choices=["cc", "cr", "mcr"])
    s.add_argument("--channel-set", nargs="+", type=int)
    s = sub.add_parser("sweep", parents=[common], help="mode x C x lambda sweep with all reports")
    s.add_argument("--checkpoints", help="directory with pre-trained checkpoints to reuse")
    s.add_argument("--input", help="data directory (generated when omitted)")
    s = sub.add_parser("entropy-check", parents=[common], help="exact entropies of discrete joints")
    s.add_argument("--joint", help=".npy joint table P[x_t, x_c]")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError, ValueError, TypeError) as exc:
        print(f"condvc: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    manifest = RunManifest(args.command, argv, args.config, args.out, cfg["train"].seed)
    manifest.write()
    try:
        with warnings.catch_warnings():
            if not args.verbose:
                warnings.simplefilter("ignore")
            COMMANDS[args.command](args, cfg, manifest)
    except Exception as exc:  # every stage failure maps to exit 1
        tag = getattr(exc, "stage", None) or type(exc).__name__
        print(f"condvc: error [{tag}]: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_PIPELINE
    finally:
        manifest.finished = time.time()
        manifest.write()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
