"""Analytic MACs/pixel and parameter counts over declarative layer graphs.

Conventions: a conv costs H_out * W_out * c_out * kh * kw * c_in MACs, a
transposed conv the same with the *input* spatial size, elementwise ops and
resampling cost nothing, and a bilinear warp costs 4 MACs per output element.
Entropy coding is bit arithmetic and not counted.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import CodingMode, ModelConfig
from .motion import PYRAMID_LEVELS


class GraphError(ValueError):
    pass


class LayerKind(enum.Enum):
    CONV = "conv"
    TRANSPOSED_CONV = "transposed_conv"
    ELEMENTWISE = "elementwise"
    RESAMPLE = "resample"
    WARP = "warp"


class Side(enum.Enum):
    ENCODER_ONLY = "encoder_only"
    DECODER_ONLY = "decoder_only"
    BOTH = "both"


@dataclass(frozen=True)
class LayerSpec:
    """One layer applied at ``scale`` (input resolution = frame resolution / scale).

    ``src`` names the layer whose output feeds this one; the stride chain is
    checked along these links. ``extra_params`` covers learned per-channel
    tables (factorized priors) that are not convolutions.
    """

    name: str
    kind: LayerKind
    c_in: int
    c_out: int
    kernel: tuple = (1, 1)
    stride: int = 1
    padding: int = 0
    side: Side = Side.BOTH
    scale: int = 1
    output_padding: int = 0
    bias: bool = True
    src: str | None = None
    extra_params: int = 0

    def __post_init__(self):
        if self.c_in <= 0 or self.c_out <= 0 or self.stride <= 0 or self.scale <= 0:
            raise GraphError(f"layer {self.name!r}: dimensions must be positive")
        if min(self.kernel) <= 0 or self.padding < 0:
            raise GraphError(f"layer {self.name!r}: bad kernel/padding")

    @property
    def out_scale(self) -> int:
        """Frame-size divisor of the output."""
        if self.kind is LayerKind.CONV:
            return self.scale * self.stride
        if self.kind is LayerKind.TRANSPOSED_CONV:
            if self.scale % self.stride:
                raise GraphError(f"layer {self.name!r}: cannot upsample beyond frame resolution")
            return self.scale // self.stride
        return self.scale


def conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def deconv_out(n: int, k: int, s: int, p: int, op: int) -> int:
    return (n - 1) * s - 2 * p + k + op


@dataclass
class ComputeGraphSummary:
    layers: list
    input_dims: tuple

    def __post_init__(self):
        self.validate()

    def by_name(self) -> dict:
        return {l.name: l for l in self.layers}

    def in_dims(self, layer: LayerSpec) -> tuple[int, int]:
        h, w = self.input_dims
        if h % layer.scale or w % layer.scale:
            raise GraphError(f"layer {layer.name!r}: frame {h}x{w} is not divisible by scale {layer.scale}")
        return h // layer.scale, w // layer.scale

    def out_dims(self, layer: LayerSpec) -> tuple[int, int]:
        h, w = self.in_dims(layer)
        (kh, kw), s, p = layer.kernel, layer.stride, layer.padding
        if layer.kind is LayerKind.CONV:
            return conv_out(h, kh, s, p), conv_out(w, kw, s, p)
        if layer.kind is LayerKind.TRANSPOSED_CONV:
            return deconv_out(h, kh, s, p, layer.output_padding), deconv_out(w, kw, s, p, layer.output_padding)
        return h, w

    def validate(self):
        names = set()
        seen = {}
        fh, fw = self.input_dims
        for layer in self.layers:
            if layer.name in names:
                raise GraphError(f"duplicate layer name {layer.name!r}")
            names.add(layer.name)
            oh, ow = self.out_dims(layer)
            s_out = layer.out_scale
            if oh * s_out != fh or ow * s_out != fw:
                raise GraphError(
                    f"layer {layer.name!r}: output {oh}x{ow} does not match frame/{s_out} "
                    f"= {fh / s_out:g}x{fw / s_out:g} (stride chain broken)")
            if layer.src is not None:
                if layer.src not in seen:
                    raise GraphError(f"layer {layer.name!r}: unknown source {layer.src!r}")
                if seen[layer.src].out_scale != layer.scale:
                    raise GraphError(
                        f"layer {layer.name!r}: source {layer.src!r} emits scale {seen[layer.src].out_scale}, "
                        f"layer expects {layer.scale}")
            seen[layer.name] = layer

    def __add__(self, other: "ComputeGraphSummary") -> "ComputeGraphSummary":
        if tuple(other.input_dims) != tuple(self.input_dims):
            raise GraphError("cannot concatenate graphs with different input dims")
        return ComputeGraphSummary(list(self.layers) + list(other.layers), self.input_dims)


def layer_macs(graph: ComputeGraphSummary, layer: LayerSpec) -> int:
    kh, kw = layer.kernel
    if layer.kind is LayerKind.CONV:
        oh, ow = graph.out_dims(layer)
        return oh * ow * layer.c_out * kh * kw * layer.c_in
    if layer.kind is LayerKind.TRANSPOSED_CONV:
        ih, iw = graph.in_dims(layer)
        return ih * iw * layer.c_in * kh * kw * layer.c_out
    if layer.kind is LayerKind.WARP:
        oh, ow = graph.out_dims(layer)
        return 4 * layer.c_out * oh * ow
    return 0


def count_macs(graph: ComputeGraphSummary) -> tuple[float, float]:
    """(encoder, decoder) MACs per input pixel."""
    h, w = graph.input_dims
    enc = dec = 0
    for layer in graph.layers:
        m = layer_macs(graph, layer)
        if layer.side is not Side.DECODER_ONLY:
            enc += m
        if layer.side is not Side.ENCODER_ONLY:
            dec += m
    return enc / (h * w), dec / (h * w)


def layer_params(layer: LayerSpec) -> int:
    if layer.kind in (LayerKind.CONV, LayerKind.TRANSPOSED_CONV):
        kh, kw = layer.kernel
        return kh * kw * layer.c_in * layer.c_out + (layer.c_out if layer.bias else 0)
    return layer.extra_params


def count_params(graph: ComputeGraphSummary) -> int:
    return sum(layer_params(l) for l in graph.layers)


# --------------------------------------------------------------------------- model graph

class _Builder:
    def __init__(self):
        self.layers: list[LayerSpec] = []

    def conv(self, name, c_in, c_out, scale, side, stride=1, k=3, src=None):
        self.layers.append(LayerSpec(name, LayerKind.CONV, c_in, c_out, (k, k), stride, k // 2, side, scale, src=src))
        return name

    def deconv(self, name, c_in, c_out, scale, side, src=None):
        self.layers.append(LayerSpec(name, LayerKind.TRANSPOSED_CONV, c_in, c_out, (3, 3), 2, 1, side, scale,
                                     output_padding=1, src=src))
        return name

    def resblock(self, name, c, scale, side, src=None):
        a = self.conv(f"{name}.conv1", c, c, scale, side, src=src)
        return self.conv(f"{name}.conv2", c, c, scale, side, src=a)

    def other(self, name, kind, c, scale, side, extra=0, src=None):
        self.layers.append(LayerSpec(name, kind, c, c, (1, 1), 1, 0, side, scale, bias=False, src=src,
                                     extra_params=extra))
        return name


def model_graph(cfg: ModelConfig, height: int = 64, width: int = 64) -> ComputeGraphSummary:
    """Every layer of an InterFrameCodec built from ``cfg``, tagged by coding side.

    Encoder-only: MENet, the motion encoder, G^enc and the hyper encoder. All
    other layers lie on the path from bits to the reconstruction, which the
    encoder also runs.
    """
    E, B = Side.ENCODER_ONLY, Side.BOTH
    C, N, L, Hc = cfg.channels, cfg.base_width, cfg.latent_channels, cfg.hyper_channels
    fw, mw, ml = cfg.flow_width, cfg.motion_width, cfg.motion_latent_channels
    b = _Builder()

    # MENet: coarse-to-fine pyramid
    prev = None
    for i in range(PYRAMID_LEVELS):
        s = 2 ** (PYRAMID_LEVELS - 1 - i)
        if s > 1:
            b.other(f"flow_net.pool{i}", LayerKind.RESAMPLE, 3, s // 2, E)
        if prev is not None:
            b.other(f"flow_net.up{i}", LayerKind.RESAMPLE, 2, s, E)
        b.other(f"flow_net.warp{i}", LayerKind.WARP, 3, s, E)
        x = b.conv(f"flow_net.levels.{i}.net.0", 8, fw, s, E)
        x = b.conv(f"flow_net.levels.{i}.net.2", fw, fw, s, E, src=x)
        x = b.conv(f"flow_net.levels.{i}.net.4", fw, fw, s, E, src=x)
        prev = b.conv(f"flow_net.levels.{i}.net.6", fw, 2, s, E, src=x)

    # motion codec
    x = b.conv("motion_codec.encoder.0", 2, mw, 1, E, stride=2)
    x = b.conv("motion_codec.encoder.2", mw, mw, 2, E, stride=2, src=x)
    x = b.conv("motion_codec.encoder.4", mw, mw, 4, E, stride=2, src=x)
    x = b.conv("motion_codec.encoder.6", mw, ml, 8, E, stride=2, src=x)
    b.other("motion_codec.prior", LayerKind.ELEMENTWISE, ml, 16, B, extra=2 * ml)
    x = b.deconv("motion_codec.decoder.0", ml, mw, 16, B)
    x = b.deconv("motion_codec.decoder.2", mw, mw, 8, B, src=x)
    x = b.deconv("motion_codec.decoder.4", mw, mw, 4, B, src=x)
    b.deconv("motion_codec.decoder.6", mw, 2, 2, B, src=x)

    # condition signals
    x = b.conv("feature_extractor.head", 3, C, 1, B)
    b.resblock("feature_extractor.block", C, 1, B, src=x)
    b.other("warp.features", LayerKind.WARP, C, 1, B)
    if cfg.mode is not CodingMode.CC:
        b.conv("projection.conv", C, 3, 1, B)
    x = b.resblock("refine.blocks.0", C, 1, B)
    b.resblock("refine.blocks.1", C, 1, B, src=x)
    if cfg.mode is CodingMode.MCR:
        mk = cfg.mask_width
        x = b.conv("mask_generator.head", 5, mk, 1, B)
        x = b.resblock("mask_generator.body.0", mk, 1, B, src=x)
        x = b.resblock("mask_generator.body.1", mk, 1, B, src=x)
        b.conv("mask_generator.tail", mk, 1, 1, B, src=x)
        b.other("mask.blend", LayerKind.ELEMENTWISE, 3, 1, B)
    elif cfg.mode is CodingMode.CR:
        b.other("residual.blend", LayerKind.ELEMENTWISE, 3, 1, B)
    ms = cfg.multiscale_condition
    if ms:
        x = b.conv("cond_down.0", C, N, 1, B, stride=2)
        b.conv("cond_down.2", N, N, 2, B, stride=2, src=x)

    # inter codec
    x = b.conv("g_enc.s1", 3 + C, N, 1, E, stride=2)
    x = b.conv("g_enc.s2", N, N, 2, E, stride=2, src=x)
    x = b.conv("g_enc.s3", N * (2 if ms else 1), N, 4, E, stride=2, src=x)
    b.conv("g_enc.s4", N, L, 8, E, stride=2, src=x)
    x = b.conv("hyper_enc.0", L, Hc, 16, E, stride=2)
    b.conv("hyper_enc.2", Hc, Hc, 32, E, stride=2, src=x)
    b.other("z_prior", LayerKind.ELEMENTWISE, Hc, 64, B, extra=2 * Hc)
    x = b.deconv("hyper_dec.0", Hc, Hc, 64, B)
    b.deconv("hyper_dec.2", Hc, Hc, 32, B, src=x)
    t = 0
    if cfg.temporal_prior:
        t = N
        x = b.conv("temporal_prior.0", C, N, 1, B, stride=2)
        x = b.conv("temporal_prior.2", N, N, 2, B, stride=2, src=x)
        x = b.conv("temporal_prior.4", N, N, 4, B, stride=2, src=x)
        b.conv("temporal_prior.6", N, N, 8, B, stride=2, src=x)
    x = b.conv("prior_fusion.fuse.0", Hc + t, 2 * L, 16, B, k=1)
    b.conv("prior_fusion.fuse.2", 2 * L, 2 * L, 16, B, k=1, src=x)
    x = b.deconv("g_dec.d1", L, N, 16, B)
    x = b.deconv("g_dec.d2", N, N, 8, B, src=x)
    x = b.deconv("g_dec.d3", N * (2 if ms else 1), N, 4, B, src=x)
    b.deconv("g_dec.d4", N, cfg.dec_channels, 2, B, src=x)
    x = b.conv("frame_gen.net.0", cfg.dec_channels + C, N, 1, B)
    x = b.resblock("frame_gen.net.2", N, 1, B, src=x)
    x = b.resblock("frame_gen.net.3", N, 1, B, src=x)
    b.conv("frame_gen.net.4", N, 3, 1, B, src=x)
    return ComputeGraphSummary(b.layers, (height, width))


# --------------------------------------------------------------------------- instrumented counting

class MacCounter:
    """Counts MACs of every Conv2d / ConvTranspose2d call by re-executing it as a matmul.

    A conv is run as im2col followed by a (c_out x c_in*k*k) @ (c_in*k*k x L)
    product; a transposed conv as a (c_out*k*k x c_in) @ (c_in x L_in) product
    followed by col2im. Each matmul's m*n*k is added to the count and its result
    is checked against the module's own output.
    """

    def __init__(self, check: bool = True, atol: float = 1e-4):
        self.total = 0
        self.per_module: dict[str, int] = {}
        self.check = check
        self.atol = atol
        self._handles = []

    def _hook(self, name):
        def hook(mod, inputs, output):
            x = inputs[0]
            if isinstance(mod, nn.ConvTranspose2d):
                macs, ref = self._deconv(mod, x, output.shape[-2:])
            else:
                macs, ref = self._conv(mod, x)
            if self.check and not torch.allclose(ref, output, atol=self.atol, rtol=1e-4):
                raise AssertionError(f"matmul re-execution of {name} disagrees with the module output")
            self.total += macs
            self.per_module[name] = self.per_module.get(name, 0) + macs
        return hook

    @staticmethod
    def _conv(mod: nn.Conv2d, x: torch.Tensor):
        if mod.groups != 1 or mod.dilation != (1, 1):
            raise NotImplementedError("grouped/dilated conv")
        n = x.shape[0]
        cols = F.unfold(x, mod.kernel_size, padding=mod.padding, stride=mod.stride)  # (N, cin*k*k, L)
        w = mod.weight.reshape(mod.out_channels, -1)
        out = w @ cols
        macs = n * w.shape[0] * w.shape[1] * cols.shape[-1]
        if mod.bias is not None:
            out = out + mod.bias.view(1, -1, 1)
        oh = (x.shape[-2] + 2 * mod.padding[0] - mod.kernel_size[0]) // mod.stride[0] + 1
        ow = (x.shape[-1] + 2 * mod.padding[1] - mod.kernel_size[1]) // mod.stride[1] + 1
        return macs, out.reshape(n, mod.out_channels, oh, ow)

    @staticmethod
    def _deconv(mod: nn.ConvTranspose2d, x: torch.Tensor, out_hw):
        if mod.groups != 1 or mod.dilation != (1, 1):
            raise NotImplementedError("grouped/dilated transposed conv")
        n, c_in, h, w = x.shape
        kh, kw = mod.kernel_size
        wt = mod.weight.reshape(c_in, -1).t()  # (cout*k*k, cin)
        cols = wt @ x.reshape(n, c_in, h * w)
        macs = n * wt.shape[0] * wt.shape[1] * h * w
        ph, pw = mod.padding
        full = F.fold(cols, (out_hw[0] + 2 * ph, out_hw[1] + 2 * pw), (kh, kw), stride=mod.stride)
        out = full[..., ph:ph + out_hw[0], pw:pw + out_hw[1]]
        if mod.bias is not None:
            out = out + mod.bias.view(1, -1, 1, 1)
        return macs, out

    def attach(self, model: nn.Module) -> "MacCounter":
        for name, mod in model.named_modules():
            if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d)):
                self._handles.append(mod.register_forward_hook(self._hook(name)))
        return self

    def detach(self):
        for h in self._handles:
            h.remove()
        self._handles.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.detach()


def conv_only(graph: ComputeGraphSummary) -> ComputeGraphSummary:
    keep = [l for l in graph.layers if l.kind in (LayerKind.CONV, LayerKind.TRANSPOSED_CONV)]
    return ComputeGraphSummary([LayerSpec(**{**asdict(l), "src": None}) for l in keep], graph.input_dims)


def sequential_from_graph(graph: ComputeGraphSummary) -> nn.Sequential:
    """Materialise a chain-shaped graph of conv/transposed-conv layers as torch modules."""
    mods = []
    for l in graph.layers:
        if l.kind is LayerKind.CONV:
            mods.append(nn.Conv2d(l.c_in, l.c_out, l.kernel, l.stride, l.padding, bias=l.bias))
        elif l.kind is LayerKind.TRANSPOSED_CONV:
            mods.append(nn.ConvTranspose2d(l.c_in, l.c_out, l.kernel, l.stride, l.padding,
                                           output_padding=l.output_padding, bias=l.bias))
        else:
            raise GraphError(f"layer {l.name!r}: only conv layers can be materialised")
    return nn.Sequential(*mods)


@torch.no_grad()
def instrumented_coding_macs(model, height: int = 64, width: int = 64, seed: int = 0) -> tuple[int, int]:
    """Total conv MACs executed by ``model.compress`` and ``model.decompress`` on one frame."""
    g = torch.Generator().manual_seed(seed)
    x_ref = torch.rand(1, 3, height, width, generator=g)
    x_t = torch.rand(1, 3, height, width, generator=g)
    model.eval()
    with MacCounter().attach(model) as enc:
        coded = model.compress(x_t, x_ref)
    with MacCounter().attach(model) as dec:
        model.decompress(coded.motion_payload, coded.inter_payload, x_ref)
    return enc.total, dec.total


# --------------------------------------------------------------------------- reports

@dataclass
class ComplexityReport:
    label: str
    mode: CodingMode
    condition_channel_size: int
    enc_kmacs_per_pixel: float
    dec_kmacs_per_pixel: float
    model_size_params: int
    deltas: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.label
        return d


def report_for(cfg: ModelConfig, label: str | None = None, height: int = 64, width: int = 64) -> ComplexityReport:
    g = model_graph(cfg, height, width)
    enc, dec = count_macs(g)
    return ComplexityReport(label or f"{cfg.mode.label} (C={cfg.channels})", cfg.mode, cfg.channels,
                            enc / 1000.0, dec / 1000.0, count_params(g))


def _pct(v, ref):
    return 0.0 if ref == 0 else (v - ref) / ref * 100.0


def complexity_report(configs: list, anchor: int | str = 0, height: int = 64, width: int = 64) -> list:
    """One report per ModelConfig with percentage deltas against the anchor (index or label)."""
    reports = [report_for(c, None, height, width) if isinstance(c, ModelConfig) else report_for(*c)
               for c in configs]
    ref = reports[anchor] if isinstance(anchor, int) else next((r for r in reports if r.label == anchor), None)
    if ref is None:
        raise ValueError(f"anchor {anchor!r} not among {[r.label for r in reports]}")
    for r in reports:
        r.deltas = {"enc": _pct(r.enc_kmacs_per_pixel, ref.enc_kmacs_per_pixel),
                    "dec": _pct(r.dec_kmacs_per_pixel, ref.dec_kmacs_per_pixel),
                    "params": _pct(r.model_size_params, ref.model_size_params)}
    return reports


def _cell(value: str, delta: float, is_anchor: bool) -> str:
    return value if is_anchor else f"{value} ({delta:+.2f}%)"


def render_complexity_table(reports: list, bd_rates: dict | None = None, anchor_label: str | None = None) -> str:
    """Table with parenthesized percentage changes relative to the anchor row."""
    anchor_label = anchor_label or next((r.label for r in reports if not any(r.deltas.values())), None)
    cols = ["BD-rate (%)"] if bd_rates is not None else []
    cols += ["Encoding (kMACs/pixel)", "Decoding (kMACs/pixel)", "Model Size (M)", "Channel Size"]
    rows = []
    for r in reports:
        a = r.label == anchor_label
        cells = [f"{bd_rates[r.label]:.2f}" if bd_rates and r.label in bd_rates else "-"] if bd_rates is not None else []
        cells += [
            _cell(f"{r.enc_kmacs_per_pixel:.1f}", r.deltas.get("enc", 0.0), a),
            _cell(f"{r.dec_kmacs_per_pixel:.1f}", r.deltas.get("dec", 0.0), a),
            _cell(f"{r.model_size_params / 1e6:.4f}", r.deltas.get("params", 0.0), a),
            str(r.condition_channel_size),
        ]
        rows.append([r.label] + cells)
    head = [""] + cols
    widths = [max(len(str(x[i])) for x in rows + [head]) for i in range(len(head))]
    fmt = lambda row: " | ".join(str(c).ljust(w) for c, w in zip(row, widths))
    lines = [fmt(head), "-+-".join("-" * w for w in widths)] + [fmt(r) for r in rows]
    return "\n".join(lines)


def write_complexity(reports: list, out_dir: str | Path, bd_rates: dict | None = None) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / "complexity.csv", "json": out_dir / "complexity.json", "txt": out_dir / "complexity.txt"}
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "mode", "channels", "enc_kmacs_per_pixel", "dec_kmacs_per_pixel", "params",
                    "enc_delta_pct", "dec_delta_pct", "params_delta_pct"])
        for r in reports:
            w.writerow([r.label, r.mode.label, r.condition_channel_size, f"{r.enc_kmacs_per_pixel:.6f}",
                        f"{r.dec_kmacs_per_pixel:.6f}", r.model_size_params, f"{r.deltas.get('enc', 0):.4f}",
                        f"{r.deltas.get('dec', 0):.4f}", f"{r.deltas.get('params', 0):.4f}"])
    paths["json"].write_text(json.dumps([r.to_dict() for r in reports], indent=2))
    paths["txt"].write_text(render_complexity_table(reports, bd_rates) + "\n")
    return paths
