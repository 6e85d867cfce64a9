from .denoise import (ConditionEncoder, ConvGRU, DenoiseOutput, DenoiseUNet, denoise_step,
                      encode_condition, timestep_embedding)
from .features import ContextBundle, ContextNet, FeatureNet, extract_context, extract_features, stage_shape
from .regularize import CostRegNet, regularize_init
from .upsample import UpsampleMask, convex_upsample, upsample_learned

__all__ = [
    "ConditionEncoder", "ConvGRU", "DenoiseOutput", "DenoiseUNet", "denoise_step", "encode_condition",
    "timestep_embedding", "ContextBundle", "ContextNet", "FeatureNet", "extract_context",
    "extract_features", "stage_shape", "CostRegNet", "regularize_init", "UpsampleMask",
    "convex_upsample", "upsample_learned",
]
