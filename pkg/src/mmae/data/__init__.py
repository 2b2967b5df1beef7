from .arrays import read_csv_matrix, read_labels, read_matrix, read_npy, write_labels, write_npy
from .dataset import (
    LUMA_DIMS,
    MODALITIES,
    FeatureMatrix,
    Modality,
    Split,
    Standardizer,
    StandardizeStats,
    SynthSpec,
    TripletBatch,
    TripletDataset,
    batch_iter,
    fit_dataset_stats,
    standardize_apply,
    standardize_dataset,
    standardize_fit,
    synth_triplets,
)
from .manifest import load_array_file, load_manifest, save_dataset

__all__ = [
    "LUMA_DIMS", "MODALITIES", "FeatureMatrix", "Modality", "Split", "Standardizer",
    "StandardizeStats", "SynthSpec", "TripletBatch", "TripletDataset", "batch_iter",
    "fit_dataset_stats", "load_array_file", "load_manifest", "read_csv_matrix", "read_labels",
    "read_matrix", "read_npy", "save_dataset", "standardize_apply", "standardize_dataset",
    "standardize_fit", "synth_triplets", "write_labels", "write_npy",
]
