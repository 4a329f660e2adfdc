"""MetaImage volumes, landmark CSV files and JSON reports."""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import ValidationError
from .image import Image3D


class MetaImageError(ValidationError):
    """Base class for unreadable MetaImage files."""


class HeaderError(MetaImageError):
    """Missing, malformed or unsupported header fields."""


class SizeMismatchError(MetaImageError):
    """Raw data length disagrees with the header."""


class UnsupportedTypeError(MetaImageError):
    """Element type outside uint8, int16, uint16, float32, float64."""


MET_TYPES = {
    "MET_UCHAR": np.uint8,
    "MET_SHORT": np.int16,
    "MET_USHORT": np.uint16,
    "MET_FLOAT": np.float32,
    "MET_DOUBLE": np.float64,
}
_TYPE_NAMES = {np.dtype(v): k for k, v in MET_TYPES.items()}


def _parse_header(lines, path):
    header = {}
    for n, raw in enumerate(lines):
        line = raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise HeaderError(f"{path}: line {n + 1} is not 'Key = Value'")
        key, value = (s.strip() for s in line.split("=", 1))
        header[key] = value
        if key == "ElementDataFile":
            break
    return header


def _floats(header, key, path, default=None):
    if key not in header:
        if default is None:
            raise HeaderError(f"{path}: missing {key}")
        return default
    try:
        vals = [float(v) for v in header[key].split()]
    except ValueError:
        raise HeaderError(f"{path}: {key} is not numeric") from None
    if len(vals) != 3:
        raise HeaderError(f"{path}: {key} needs three values")
    return vals


def read_metaimage(path):
    """Read a 3D ``.mhd`` (companion raw file or ``LOCAL`` appended data)."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    # the header is text up to and including the ElementDataFile line
    marker = blob.find(b"ElementDataFile")
    if marker < 0:
        raise HeaderError(f"{path}: missing ElementDataFile")
    eol = blob.find(b"\n", marker)
    eol = len(blob) if eol < 0 else eol + 1
    try:
        text = blob[:eol].decode("ascii")
    except UnicodeDecodeError:
        raise HeaderError(f"{path}: header is not ASCII text") from None
    header = _parse_header(text.splitlines(), path)

    if header.get("NDims", "3").strip() != "3":
        raise HeaderError(f"{path}: only 3D images are supported (NDims = {header.get('NDims')})")
    try:
        dims = [int(v) for v in header["DimSize"].split()]
    except KeyError:
        raise HeaderError(f"{path}: missing DimSize") from None
    except ValueError:
        raise HeaderError(f"{path}: DimSize is not integer") from None
    if len(dims) != 3 or min(dims) < 1:
        raise HeaderError(f"{path}: DimSize needs three positive values")
    spacing_key = next((k for k in ("ElementSpacing", "ElementSize") if k in header), None)
    spacing = _floats(header, spacing_key, path) if spacing_key else [1.0, 1.0, 1.0]
    origin_key = next((k for k in ("Offset", "Origin", "Position") if k in header), None)
    origin = _floats(header, origin_key, path) if origin_key else [0.0, 0.0, 0.0]
    if "TransformMatrix" in header:
        try:
            tm = np.array([float(v) for v in header["TransformMatrix"].split()])
        except ValueError:
            raise HeaderError(f"{path}: TransformMatrix is not numeric") from None
        if tm.size != 9 or not np.allclose(tm, np.eye(3).ravel()):
            raise HeaderError(f"{path}: only axis-aligned images (identity TransformMatrix) are supported")
    etype = header.get("ElementType")
    if etype is None:
        raise HeaderError(f"{path}: missing ElementType")
    if etype not in MET_TYPES:
        raise UnsupportedTypeError(f"{path}: unsupported ElementType {etype}")
    try:
        channels = int(header.get("ElementNumberOfChannels", "1"))
    except ValueError:
        raise HeaderError(f"{path}: ElementNumberOfChannels is not integer") from None
    if header.get("CompressedData", "False").lower() == "true":
        raise HeaderError(f"{path}: compressed data is not supported")
    msb = header.get("BinaryDataByteOrderMSB", header.get("ElementByteOrderMSB", "False")).lower() == "true"
    dtype = np.dtype(MET_TYPES[etype]).newbyteorder(">" if msb else "<")

    datafile = header["ElementDataFile"]
    if datafile == "LOCAL":
        data = blob[eol:]
    else:
        raw_path = os.path.join(os.path.dirname(path), datafile)
        try:
            with open(raw_path, "rb") as fh:
                data = fh.read()
        except OSError as exc:
            raise MetaImageError(f"{path}: cannot read data file {raw_path}: {exc}") from None
    expected = int(np.prod(dims)) * channels * dtype.itemsize
    if len(data) != expected:
        raise SizeMismatchError(f"{path}: expected {expected} data bytes for {dims} x {channels} {etype}, "
                                f"found {len(data)}")
    arr = np.frombuffer(data, dtype=dtype).astype(dtype.newbyteorder("="))
    if channels == 1:
        values = arr.reshape(dims[::-1]).transpose(2, 1, 0)
    else:
        values = arr.reshape(dims[::-1] + [channels]).transpose(2, 1, 0, 3)
    try:
        return Image3D(np.ascontiguousarray(values), tuple(spacing), tuple(origin))
    except ValueError as exc:
        raise HeaderError(f"{path}: {exc}") from None


def write_metaimage(img, path, local=False):
    """Write ``img`` as ``path`` (.mhd) plus a companion ``.raw`` (or appended when ``local``).

    Multi-channel images (displacement fields) are stored as float32.
    """
    path = os.fspath(path)
    values = np.asarray(img.values)
    if values.dtype == bool:
        values = values.astype(np.uint8)
    if img.channels > 1 or values.dtype == np.float16:
        values = values.astype(np.float32)
    if values.dtype not in _TYPE_NAMES:
        raise UnsupportedTypeError(f"cannot store {values.dtype} in MetaImage")
    etype = _TYPE_NAMES[values.dtype]
    if img.channels == 1:
        raw = np.ascontiguousarray(values.transpose(2, 1, 0))
    else:
        raw = np.ascontiguousarray(values.transpose(2, 1, 0, 3))
    raw = raw.astype(raw.dtype.newbyteorder("<"), copy=False)
    base = os.path.splitext(os.path.basename(path))[0]
    raw_name = "LOCAL" if local else base + ".raw"
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        "TransformMatrix = 1 0 0 0 1 0 0 0 1",
        "Offset = " + " ".join(repr(float(v)) for v in img.origin),
        "ElementSpacing = " + " ".join(repr(float(v)) for v in img.spacing),
        "DimSize = " + " ".join(str(int(v)) for v in img.dims),
    ]
    if img.channels > 1:
        lines.append(f"ElementNumberOfChannels = {img.channels}")
    lines += [f"ElementType = {etype}", f"ElementDataFile = {raw_name}"]
    header = ("\n".join(lines) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        if local:
            fh.write(raw.tobytes())
    if not local:
        with open(os.path.join(os.path.dirname(path), raw_name), "wb") as fh:
            fh.write(raw.tobytes())


def read_landmarks(path):
    """Landmarks as an (n, 3) array from ``x,y,z`` lines (mm); a header row is skipped."""
    rows = []
    with open(path) as fh:
        for n, line in enumerate(fh):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(";", ",").split(",") if "," in line or ";" in line else line.split()
            try:
                vals = [float(v) for v in parts]
            except ValueError:
                if not rows and n == 0:
                    continue
                raise ValidationError(f"{path}: line {n + 1} is not numeric") from None
            if len(vals) != 3:
                raise ValidationError(f"{path}: line {n + 1} needs three coordinates")
            rows.append(vals)
    pts = np.asarray(rows, dtype=float).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValidationError(f"{path}: non-finite coordinates")
    return pts


def write_landmarks(points, path):
    np.savetxt(path, np.atleast_2d(points), fmt="%.6f", delimiter=",")


def read_landmark_pairs(fixed_path, moving_path):
    fp, mp = read_landmarks(fixed_path), read_landmarks(moving_path)
    if len(fp) != len(mp):
        raise ValidationError(f"landmark files differ in length ({len(fp)} vs {len(mp)})")
    return fp, mp


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(data, path):
    with open(path, "w") as fh:
        json.dump(_jsonable(data), fh, indent=2)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
