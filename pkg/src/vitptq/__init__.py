"""Post-training quantization of a toy Vision Transformer with block-wise reconstruction."""

__version__ = "0.1.0"

from .data import Dataset, load_dataset, sample_calibration, save_dataset, toy_datasets
from .model import ModelConfig, ViTModel, model_forward, quantize_model
from .quant import QuantParams, calibrate, dequantize, fake_quant, quantize
from .reconstruct import LossBreakdown, ReconstructionConfig, reconstruct_block, run_mgrq
from .tensor import Tape, Tensor, backward

__all__ = [
    "Dataset", "load_dataset", "sample_calibration", "save_dataset", "toy_datasets",
    "ModelConfig", "ViTModel", "model_forward", "quantize_model",
    "QuantParams", "calibrate", "dequantize", "fake_quant", "quantize",
    "LossBreakdown", "ReconstructionConfig", "reconstruct_block", "run_mgrq",
    "Tape", "Tensor", "backward",
]
