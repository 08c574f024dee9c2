"""Model container format ("UYV1").

Little-endian layout:

    magic "UYV1" (4 bytes) | format version u16 | header length u32 |
    UTF-8 JSON header | raw tensor blobs

The JSON header carries the model config, the structural layer
descriptors, and ordered tensor records: name, dtype (f32|i8), shape,
encoding (dense|bitmap-sparse), byte offset/length relative to the end
of the header, and optional scale/zero_point for quantized tensors.

bitmap-sparse encoding: a ceil(n/8)-byte validity bitmap (element e maps
to byte e//8, bit 7-(e%8), i.e. MSB first) followed by the nonzero
values packed in flat index order. Positions whose bit is 0 decode to
exact zeros.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .model import (
    BatchNorm, Conv2d, Flatten, Linear, MaxPool, ModelGraph, ReLU, UYoloConfig,
)

MAGIC = b"UYV1"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "i8": np.dtype("i1")}


class ModelFormatError(ValueError):
    """Base class for container parse failures."""


class MagicError(ModelFormatError):
    """File does not start with the expected magic bytes."""


class TruncatedError(ModelFormatError):
    """File ends before the announced header or blob data."""


class LayoutError(ModelFormatError):
    """Header is inconsistent with itself or with the blob section."""


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.int8:
        return "i8"
    if arr.dtype == np.float32:
        return "f32"
    raise ValueError(f"container: unsupported dtype {arr.dtype}")


def _sparse_bytes(arr: np.ndarray) -> int:
    nnz = int(np.count_nonzero(arr))
    return (arr.size + 7) // 8 + nnz * arr.itemsize


def _encode_tensor(arr: np.ndarray, encoding: str) -> bytes:
    flat = np.ascontiguousarray(arr).reshape(-1)
    if encoding == "dense":
        return flat.astype(_DTYPES[_dtype_tag(arr)], copy=False).tobytes()
    mask = flat != 0
    bitmap = np.packbits(mask).tobytes()
    values = flat[mask].astype(_DTYPES[_dtype_tag(arr)], copy=False).tobytes()
    return bitmap + values


def _decode_tensor(buf: bytes, rec: dict) -> np.ndarray:
    dtype = _DTYPES[rec["dtype"]]
    shape = tuple(rec["shape"])
    n = int(np.prod(shape)) if shape else 1
    if rec["encoding"] == "dense":
        if len(buf) != n * dtype.itemsize:
            raise LayoutError(
                f"tensor {rec['name']}: {len(buf)} bytes for shape {shape} ({rec['dtype']})"
            )
        return np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    if rec["encoding"] != "bitmap-sparse":
        raise LayoutError(f"tensor {rec['name']}: unknown encoding {rec['encoding']!r}")
    nbytes_bitmap = (n + 7) // 8
    if len(buf) < nbytes_bitmap:
        raise LayoutError(f"tensor {rec['name']}: bitmap truncated")
    mask = np.unpackbits(np.frombuffer(buf[:nbytes_bitmap], dtype=np.uint8))[:n].astype(bool)
    nnz = int(mask.sum())
    if len(buf) != nbytes_bitmap + nnz * dtype.itemsize:
        raise LayoutError(
            f"tensor {rec['name']}: expected {nnz} packed values, got "
            f"{(len(buf) - nbytes_bitmap) // dtype.itemsize}"
        )
    out = np.zeros(n, dtype=dtype)
    out[mask] = np.frombuffer(buf[nbytes_bitmap:], dtype=dtype)
    return out.reshape(shape)


def _layer_descriptor(layer) -> dict:
    d = {"kind": layer.kind}
    if layer.kind == "conv":
        d.update(
            in_channels=layer.in_channels, out_channels=layer.out_channels,
            kernel=layer.kernel, stride=layer.stride, padding=layer.padding,
            groups=layer.groups,
        )
    elif layer.kind == "linear":
        d.update(in_features=layer.in_features, out_features=layer.out_features)
    elif layer.kind == "batchnorm":
        d.update(num_features=layer.num_features, eps=layer.eps, momentum=layer.momentum)
    elif layer.kind == "maxpool":
        d.update(kernel=layer.kernel)
    return d


def _layer_from_descriptor(d: dict):
    kind = d["kind"]
    z = np.zeros  # placeholder params, overwritten from tensor records
    if kind == "conv":
        cg = d["in_channels"] // d["groups"]
        return Conv2d(
            d["in_channels"], d["out_channels"], d["kernel"], d["stride"],
            d["padding"], d["groups"],
            z((d["out_channels"], cg, d["kernel"], d["kernel"]), np.float32),
            z(d["out_channels"], np.float32),
        )
    if kind == "linear":
        return Linear(
            d["in_features"], d["out_features"],
            z((d["out_features"], d["in_features"]), np.float32),
            z(d["out_features"], np.float32),
        )
    if kind == "batchnorm":
        n = d["num_features"]
        return BatchNorm(
            n, z(n, np.float32), z(n, np.float32), z(n, np.float32), z(n, np.float32),
            eps=d["eps"], momentum=d["momentum"],
        )
    if kind == "relu":
        return ReLU()
    if kind == "maxpool":
        return MaxPool(d["kernel"])
    if kind == "flatten":
        return Flatten()
    raise LayoutError(f"unknown layer kind {kind!r}")


def build_float_header_and_blobs(model: ModelGraph, sparse: str = "auto"):
    """Header dict and blob list for a float model.

    sparse: "auto" stores a weight tensor bitmap-sparse when that is
    smaller than dense, "never" forces dense, "always" forces sparse for
    conv/linear weights.
    """
    records, blobs = [], []
    offset = 0
    for name, arr in model.named_parameters():
        encoding = "dense"
        if name.endswith(".weight") and sparse != "never":
            if sparse == "always" or _sparse_bytes(arr) < arr.size * arr.itemsize:
                encoding = "bitmap-sparse"
        blob = _encode_tensor(arr, encoding)
        records.append(
            {
                "name": name, "dtype": _dtype_tag(arr), "shape": list(arr.shape),
                "encoding": encoding, "offset": offset, "length": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = {
        "model_type": "float",
        "config": model.config.to_dict(),
        "layers": [_layer_descriptor(l) for l in model.layers],
        "tensors": records,
    }
    return header, blobs


def _pack(header: dict, blobs: list) -> bytes:
    hbytes = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<HI", VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def save_model(model, path, sparse: str = "auto") -> None:
    """Serialize a float ModelGraph or an int8 QuantizedModel."""
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model, sparse=sparse))


def model_to_bytes(model, sparse: str = "auto") -> bytes:
    if isinstance(model, ModelGraph):
        header, blobs = build_float_header_and_blobs(model, sparse=sparse)
    else:
        from .compress import build_quant_header_and_blobs

        header, blobs = build_quant_header_and_blobs(model, sparse=sparse)
    return _pack(header, blobs)


def header_size(model, sparse: str = "auto") -> int:
    """Bytes of magic + version + length field + JSON header."""
    if isinstance(model, ModelGraph):
        header, _ = build_float_header_and_blobs(model, sparse=sparse)
    else:
        from .compress import build_quant_header_and_blobs

        header, _ = build_quant_header_and_blobs(model, sparse=sparse)
    hbytes = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    return len(MAGIC) + 6 + len(hbytes)


def load_model(path):
    """Parse a container; returns a ModelGraph or QuantizedModel."""
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def model_from_bytes(data: bytes):
    if len(data) < 10:
        raise TruncatedError(f"container is {len(data)} bytes, needs at least 10")
    if data[:4] != MAGIC:
        raise MagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, hlen = struct.unpack("<HI", data[4:10])
    if version != VERSION:
        raise LayoutError(f"unsupported container version {version}")
    if len(data) < 10 + hlen:
        raise TruncatedError(f"header announces {hlen} bytes, only {len(data) - 10} present")
    try:
        header = json.loads(data[10 : 10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise LayoutError(f"header is not valid JSON: {e}") from e
    blob = data[10 + hlen :]

    tensors = {}
    for rec in header.get("tensors", []):
        off, length = rec["offset"], rec["length"]
        if off < 0 or off + length > len(blob):
            raise TruncatedError(
                f"tensor {rec['name']} at [{off}, {off + length}) exceeds blob of {len(blob)}"
            )
        tensors[rec["name"]] = (_decode_tensor(blob[off : off + length], rec), rec)

    if header.get("model_type") == "int8":
        from .compress import quant_model_from_header

        return quant_model_from_header(header, tensors)

    config = UYoloConfig.from_dict(header["config"])
    layers = [_layer_from_descriptor(d) for d in header["layers"]]
    m = ModelGraph(config, layers)
    for name, (arr, rec) in tensors.items():
        idx, attr = name.split(".")[1:]
        idx = int(idx)
        if idx >= len(layers) or not hasattr(layers[idx], attr):
            raise LayoutError(f"tensor {name} does not match any layer parameter")
        expected = getattr(layers[idx], attr).shape
        if tuple(arr.shape) != expected:
            raise LayoutError(f"tensor {name} shape {arr.shape} != layer shape {expected}")
        setattr(layers[idx], attr, arr.astype(np.float32, copy=False))
    return m
