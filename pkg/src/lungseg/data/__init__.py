from .folds import Fold, FoldPlan, make_folds
from .nifti import NiftiDatatypeError, NiftiError, NiftiMagicError, NiftiTruncatedError, Volume, read_nifti
from .slicepack import SlicePackError, read_slicepack, write_slicepack
from .slices import Origin, SliceSample, normalize_hu, resize_image, resize_mask, volume_to_slices

__all__ = [
    "Fold",
    "FoldPlan",
    "make_folds",
    "Volume",
    "read_nifti",
    "NiftiError",
    "NiftiMagicError",
    "NiftiDatatypeError",
    "NiftiTruncatedError",
    "SliceSample",
    "Origin",
    "normalize_hu",
    "resize_image",
    "resize_mask",
    "volume_to_slices",
    "read_slicepack",
    "write_slicepack",
    "SlicePackError",
]
