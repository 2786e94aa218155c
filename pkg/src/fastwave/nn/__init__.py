from . import functional
from .functional import (conv1d, dwconv1d, gelu, grn, irfft_time, pwconv1d, rfft_time,
                         sigma_embedding)
from .layers import (GELU, GRN, Conv1d, DepthwiseSeparableConv1d, DWConv1d, Linear, Module,
                     Parameter, PWConv1d, SigmaEmbedding, count_flops, count_params, fft_flops)

__all__ = [
    "functional", "conv1d", "dwconv1d", "pwconv1d", "grn", "gelu", "rfft_time", "irfft_time",
    "sigma_embedding", "Module", "Parameter", "Conv1d", "DWConv1d", "PWConv1d",
    "DepthwiseSeparableConv1d", "GRN", "GELU", "Linear", "SigmaEmbedding", "count_params",
    "count_flops", "fft_flops",
]
