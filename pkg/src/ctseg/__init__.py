"""ctseg: CT volume segmentation pipeline toolkit.

Library + CLI covering percentile windowing, sampled z-score
normalization, slice reduction, CT-specific augmentation, the combined
Tanimoto/cross-entropy objective with analytic gradients and ADAM, the
slice-count-sorted fold protocol, a per-voxel reference segmenter, and
stacked ensembling of member probability maps.
"""

__version__ = "0.1.0"

from .volume import (  # noqa: F401
    CtVolume,
    LabelVolume,
    ProbMap,
    UnitState,
    load_labels,
    load_probmap,
    load_volume,
    save_labels,
    save_probmap,
    save_volume,
)
from .preprocess import IntensityStats, WindowConfig  # noqa: F401
from .augment import AugmentConfig  # noqa: F401
from .objective import AdamState, LossConfig  # noqa: F401
from .dataset import FoldPlan, Manifest, assign_folds, load_manifest  # noqa: F401
from .model import PredictorParams, TrainConfig  # noqa: F401
from .synth import PhantomConfig, generate_dataset, generate_phantom  # noqa: F401
