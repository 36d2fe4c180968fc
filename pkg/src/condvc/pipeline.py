"""Sequence-level coding: padding, GOP dispatch, intra/inter frames and the container."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .codec import CodedFrame, InterFrameCodec
from .condition import CodecState
from .config import PAD_MULTIPLE, CodingMode, ConfigError
from .data import FrameRole, FrameSequence, make_gop_schedule
from .entropy.bitstream import Bitstream, BitstreamError, FrameRecord, FrameType, Header
from .errors import StageError, stage
from .intra import IntraMethod, LearnedIntraCodec, code_intra, decode_intra

_INTRA_TYPES = {IntraMethod.PASSTHROUGH: FrameType.INTRA_PASSTHROUGH, IntraMethod.LEARNED_AE: FrameType.INTRA_LEARNED}


def pad_frame(x: torch.Tensor, multiple: int = PAD_MULTIPLE) -> torch.Tensor:
    """Reflect-pad (N, C, H, W) on the bottom/right to a multiple; replicate when reflect cannot reach."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return x
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode)


def crop_frame(x: torch.Tensor, height: int, width: int) -> torch.Tensor:
    return x[..., :height, :width]


@dataclass
class ReconstructionRecord:
    x_hat: np.ndarray
    total_bits: float
    motion_bits: float
    inter_bits: float
    mode: CodingMode
    frame_type: FrameType
    mask_mean: float | None = None
    estimated_bits: float | None = None

    def __post_init__(self):
        self.total_bits = self.motion_bits + self.inter_bits


@dataclass
class EncodeResult:
    bitstream: Bitstream
    reconstructions: list[np.ndarray]
    records: list[ReconstructionRecord]
    coded: list[CodedFrame | None] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        return self.bitstream.to_bytes()


def code_frame(x_t: np.ndarray, state: CodecState, model: InterFrameCodec) -> tuple[ReconstructionRecord, FrameRecord, CodedFrame]:
    """Code one inter frame against ``state.reference`` and advance the state."""
    if state.reference is None:
        raise ValueError("inter frame without a reference")
    _, h, w = x_t.shape
    with stage("pad"):
        xt = pad_frame(torch.from_numpy(np.ascontiguousarray(x_t))[None])
        ref = pad_frame(state.reference[None] if state.reference.dim() == 3 else state.reference)
    coded = model.compress(xt, ref)
    x_hat = crop_frame(coded.x_hat, h, w)[0]
    rec = ReconstructionRecord(
        x_hat=x_hat.numpy().copy(),
        total_bits=0.0,
        motion_bits=8.0 * len(coded.motion_payload),
        inter_bits=8.0 * len(coded.inter_payload),
        mode=model.mode,
        frame_type=FrameType.INTER,
        mask_mean=float(coded.mask.mean()) if coded.mask is not None else None,
        estimated_bits=coded.motion_bits_est + coded.inter_bits_est,
    )
    state.set_reference(x_hat)
    state.frame_index += 1
    return rec, FrameRecord(FrameType.INTER, coded.motion_payload, coded.inter_payload), coded


def encode_sequence(seq: FrameSequence | np.ndarray, model: InterFrameCodec, gop_size: int = 32,
                    max_frames: int | None = None, intra: IntraMethod | str = IntraMethod.PASSTHROUGH,
                    intra_model: LearnedIntraCodec | None = None) -> EncodeResult:
    frames = seq.stack() if isinstance(seq, FrameSequence) else np.asarray(seq, dtype=np.float32)
    if max_frames is not None:
        frames = frames[:max_frames]
    intra = IntraMethod(intra)
    model.eval()
    n, _, h, w = frames.shape
    header = Header(int(model.mode), model.cfg.channels, model.digest(), w, h)
    stream = Bitstream(header)
    recons, records, coded_frames = [], [], []
    state = CodecState()
    for i, role in enumerate(make_gop_schedule(n, gop_size).roles):
        if role is FrameRole.INTRA:
            with stage("intra"):
                res = code_intra(frames[i], intra, intra_model)
            rec = ReconstructionRecord(res.x_hat, 0.0, 0.0, res.bits, model.mode, _INTRA_TYPES[intra])
            fr = FrameRecord(_INTRA_TYPES[intra], b"", res.payload)
            state.set_reference(torch.from_numpy(res.x_hat))
            state.frame_index = i + 1
            coded = None
        else:
            rec, fr, coded = code_frame(frames[i], state, model)
        stream.records.append(fr)
        recons.append(rec.x_hat)
        records.append(rec)
        coded_frames.append(coded)
    return EncodeResult(stream, recons, records, coded_frames)


def check_header(header: Header, model: InterFrameCodec):
    if header.mode != int(model.mode):
        raise BitstreamError(f"stream was coded in {CodingMode(header.mode).name} mode, decoder is {model.mode.name}")
    if header.channels != model.cfg.channels:
        raise BitstreamError(f"stream has C={header.channels}, decoder model has C={model.cfg.channels}")
    if header.digest != model.digest():
        raise BitstreamError("config digest mismatch: stream was produced by a different model")


def decode_stream(data: bytes | Bitstream, model: InterFrameCodec,
                  intra_model: LearnedIntraCodec | None = None) -> list[np.ndarray]:
    with stage("container"):
        stream = data if isinstance(data, Bitstream) else Bitstream.from_bytes(data)
        check_header(stream.header, model)
    model.eval()
    h, w = stream.header.height, stream.header.width
    reference = None
    out = []
    for i, rec in enumerate(stream.records):
        if rec.frame_type is FrameType.INTER:
            if reference is None:
                raise StageError("inter_decode", BitstreamError(f"frame {i} is inter but no reference exists"))
            ref = pad_frame(reference[None])
            coded = model.decompress(rec.motion, rec.inter, ref)
            x_hat = crop_frame(coded.x_hat, h, w)[0]
        else:
            method = IntraMethod.PASSTHROUGH if rec.frame_type is FrameType.INTRA_PASSTHROUGH else IntraMethod.LEARNED_AE
            with stage("intra_decode"):
                x_hat = torch.from_numpy(decode_intra(rec.inter, method, h, w, intra_model))
        reference = x_hat
        out.append(x_hat.numpy().copy())
    return out


def sequence_bpp(stream: Bitstream | bytes, num_frames: int | None = None) -> float:
    """Container bytes * 8 / (frames * W * H), header amortised over the sequence."""
    if isinstance(stream, (bytes, bytearray)):
        stream = Bitstream.from_bytes(stream)
    n = num_frames if num_frames is not None else len(stream.records)
    return 8.0 * len(stream) / (n * stream.header.width * stream.header.height)
