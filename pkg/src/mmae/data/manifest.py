"""Dataset manifests binding per-split array files into TripletDatasets.

A manifest is an INI file::

    [dataset]
    n_classes = 50

    [train]
    image = train/image.npy
    audio = train/audio.npy
    text = train/text.npy
    labels = train/labels.npy

with optional ``[test]`` and ``[ood]`` sections. Relative paths resolve
against the manifest's directory. Feature files may also be CSV (``.csv``).
"""
from __future__ import annotations

import configparser
import os

from ..exceptions import ConfigError, FormatError, IoError
from .arrays import read_csv_matrix, read_labels, read_matrix, write_labels, write_npy
from .dataset import MODALITIES, FeatureMatrix, Modality, Split, TripletDataset


def load_array_file(path, modality) -> FeatureMatrix:
    if str(path).lower().endswith(".csv"):
        return FeatureMatrix(read_csv_matrix(path), Modality(modality))
    return FeatureMatrix(read_matrix(path), Modality(modality))


def read_manifest(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise IoError(str(exc)) from None
    except configparser.Error as exc:
        raise FormatError(f"{path}: {exc}") from None
    return parser


def load_manifest(path, splits=None) -> dict:
    """Load every split listed in the manifest (or just ``splits``)."""
    parser = read_manifest(path)
    base = os.path.dirname(os.path.abspath(path))
    n_classes = parser.getint("dataset", "n_classes", fallback=None)
    wanted = [Split(s) for s in splits] if splits else [s for s in Split if parser.has_section(s.value)]
    out = {}
    for split in wanted:
        if not parser.has_section(split.value):
            raise ConfigError(f"{path}: no [{split.value}] section")
        section = parser[split.value]
        missing = [k for k in ("image", "audio", "text", "labels") if k not in section]
        if missing:
            raise ConfigError(f"{path}: [{split.value}] is missing {', '.join(missing)}")
        resolve = lambda key: os.path.join(base, section[key])  # noqa: E731
        out[split] = TripletDataset(
            *(load_array_file(resolve(m.value), m) for m in MODALITIES),
            read_labels(resolve("labels")),
            split,
            n_classes,
        )
    return out


def save_dataset(directory, datasets: dict, manifest_name="manifest.ini") -> str:
    """Write each split's arrays plus a manifest; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    parser = configparser.ConfigParser()
    n_classes = max(d.n_classes for d in datasets.values())
    parser["dataset"] = {"n_classes": str(n_classes)}
    for split, d in sorted(datasets.items(), key=lambda kv: list(Split).index(Split(kv[0]))):
        split = Split(split)
        entry = {}
        for m in MODALITIES:
            name = f"{split.value}_{m.value}.npy"
            write_npy(os.path.join(directory, name), d.modality(m).values)
            entry[m.value] = name
        name = f"{split.value}_labels.npy"
        write_labels(os.path.join(directory, name), d.labels)
        entry["labels"] = name
        parser[split.value] = entry
    path = os.path.join(directory, manifest_name)
    with open(path, "w") as fh:
        parser.write(fh)
    return path
