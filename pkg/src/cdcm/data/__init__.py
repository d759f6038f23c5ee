"""Datasets, split planning and augmentation."""

from .augment import NO_AUGMENT, AugmentParams, augment, augment_tensor
from .cifar import (
    CIFAR10_CLASSES,
    AnomalySplitSpec,
    ClassImageStore,
    DatasetSplit,
    SplitManifest,
    anomaly_classes,
    build_modified_cifar10,
    load_cifar10,
    materialize,
    plan_modified_cifar10,
)
from .folds import FoldPlan, InnerSplit, OuterFold, plan_double_cv
from .ppmr import (
    IMAGE_SHAPE,
    PatientRecord,
    SliceReadError,
    SliceSource,
    generate_synthetic_ppmr,
    load_slice_dataset,
    read_slice,
)
from .subset import GROUP_NORMAL, GROUP_SEEN, GROUP_UNSEEN, Subset
