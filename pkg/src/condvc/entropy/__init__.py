from .bitstream import Bitstream, BitstreamError, FrameRecord, FrameType, Header
from .models import (
    EntropyParams,
    EntropySource,
    FactorizedGaussian,
    PriorFusion,
    estimate_rate,
    gaussian_cdf_table,
    gaussian_likelihood,
    quantize,
)
from .rangecoder import CdfTable, CodingError, DecodeError, range_decode, range_encode

__all__ = [
    "Bitstream", "BitstreamError", "FrameRecord", "FrameType", "Header",
    "EntropyParams", "EntropySource", "FactorizedGaussian", "PriorFusion",
    "estimate_rate", "gaussian_cdf_table", "gaussian_likelihood", "quantize",
    "CdfTable", "CodingError", "DecodeError", "range_decode", "range_encode",
]
