from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .layers import (
    ActNorm,
    Coupling,
    FlowLayer,
    InvertibleMixing,
    MadeBlock,
    Reshape,
    Split,
    Squeeze,
    Standardize,
    scale_clamp,
)
from .model import (
    FlowModel,
    GlowConfig,
    MafConfig,
    NllValue,
    build_glow,
    build_maf,
    build_model,
    config_from_dict,
    config_to_dict,
)
