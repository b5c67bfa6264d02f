"""DeepMedic, FCN and U-Net family builders, forward pass and checkpoints."""

from .checkpoint import load_checkpoint, save_checkpoint
from .network import NetworkInstance, check_pathway_alignment, forward, init_network
from .spec import (
    SPEC_IDS,
    Layer,
    NetworkSpec,
    Pathway,
    build_deepmedic,
    build_fcn,
    build_spec,
    build_unet,
    infer_shapes,
    output_extents,
    parameter_count,
    parameter_shapes,
    receptive_field,
)

__all__ = [
    "SPEC_IDS", "Layer", "NetworkInstance", "NetworkSpec", "Pathway",
    "build_deepmedic", "build_fcn", "build_spec", "build_unet", "check_pathway_alignment",
    "forward", "infer_shapes", "init_network", "load_checkpoint", "output_extents",
    "parameter_count", "parameter_shapes", "receptive_field", "save_checkpoint",
]
