"""Dual-modality brain-age pipeline at desk scale.

Synthesizes age-linked phantom volumes, trains a 3D VGG8 regressor per
modality on a home-grown autodiff engine, stacks the predictions with
linear-regression ensembles, and reports metrics, model comparisons,
and gradient saliency overlays.
"""

__version__ = "0.1.0"

from .imaging import Modality, Volume, crop_or_pad, read_nifti, write_nifti  # noqa: E402,F401
from .dataset import (  # noqa: E402,F401
    Manifest,
    PhantomSpec,
    ScanRecord,
    Sex,
    normalize_top_percent,
    synth_phantoms,
)
from .vgg8 import Checkpoint, TrainConfig, Vgg8Config, build_vgg8, predict, train  # noqa: E402,F401
