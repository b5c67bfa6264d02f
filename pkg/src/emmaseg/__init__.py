"""Heterogeneous 3D CNN ensembles for multi-modal brain-tumour segmentation.

Subpackages: ``autodiff`` (tensors, tape, layers, optimisers),
``architectures`` (DeepMedic / FCN / U-Net specs and checkpoints),
``preprocessing`` (normalisation, sampling).  Modules: ``losses``,
``ensemble``, ``metrics``, ``volume_io``, ``phantom``, ``config``,
``training``, ``estimators``, ``toy``, ``gradcheck``, ``cli``.
"""

__version__ = "0.1.0"
