"""Reading and writing ``.npy`` array files and CSV feature tables.

Only the subset of the NumPy container the pipeline exchanges is accepted:
little-endian float32/float64 2-D matrices in C order, and little-endian
int64 1-D label vectors.
"""
from __future__ import annotations

import math
import os
import tokenize

import numpy as np
from numpy.lib import format as npformat

from ..exceptions import DataError, FormatError, IoError, UnsupportedArrayError

FLOAT_DESCRS = ("<f4", "<f8")
LABEL_DESCRS = ("<i8",)


def _read_header(fh):
    try:
        version = npformat.read_magic(fh)
    except ValueError as exc:
        raise FormatError(f"bad magic: {exc}") from None
    try:
        if version == (1, 0):
            return npformat.read_array_header_1_0(fh)
        if version == (2, 0):
            return npformat.read_array_header_2_0(fh)
    except (ValueError, SyntaxError, tokenize.TokenError) as exc:
        raise FormatError(f"malformed header: {exc}") from None
    raise FormatError(f"unsupported format version {version[0]}.{version[1]}")


def read_npy(path, *, ndim: int = 2, descrs=FLOAT_DESCRS) -> np.ndarray:
    """Read an array file, enforcing rank, dtype and C order."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise IoError(str(exc)) from None
    with fh:
        shape, fortran_order, dtype = _read_header(fh)
        if fortran_order:
            raise UnsupportedArrayError(f"{path}: Fortran-order payloads are not supported")
        if len(shape) != ndim:
            raise UnsupportedArrayError(f"{path}: expected {ndim}-D array, got shape {shape}")
        if dtype.str not in descrs:
            raise UnsupportedArrayError(f"{path}: dtype {dtype.str!r} not in {descrs}")
        nbytes = math.prod(shape) * dtype.itemsize
        payload = fh.read(nbytes)
        if len(payload) != nbytes:
            raise FormatError(f"{path}: truncated payload ({len(payload)} of {nbytes} bytes)")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_npy(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array)
    if array.dtype.byteorder == ">":
        array = array.astype(array.dtype.newbyteorder("<"))
    try:
        with open(path, "wb") as fh:
            npformat.write_array(fh, array, version=(1, 0), allow_pickle=False)
    except OSError as exc:
        raise IoError(str(exc)) from None


def read_matrix(path) -> np.ndarray:
    values = read_npy(path)
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: contains NaN or Inf entries")
    return values


def read_labels(path) -> np.ndarray:
    return read_npy(path, ndim=1, descrs=LABEL_DESCRS)


def write_labels(path, labels) -> None:
    write_npy(path, np.asarray(labels, dtype="<i8"))


def read_csv_matrix(path) -> np.ndarray:
    """CSV with a header row of column indices and one sample per line."""
    if not os.path.exists(path):
        raise IoError(f"{path}: no such file")
    try:
        values = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if values.size == 0:
        raise FormatError(f"{path}: no samples")
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: contains NaN or Inf entries")
    return values
