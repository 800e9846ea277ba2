"""Band-split residual vector quantization codec toolkit."""

from .dsp import AudioBuffer, BandPlan, BandRange, band_project, make_band_plan
from .quantizer import QuantizerStack, TokenStream, mbs_rvq_encode, subset_decode, vanilla_rvq_encode

__version__ = "0.1.0"
