"""Checksummed binary container for model parameters.

Layout:
    4 bytes   magic b"CNCM"
    4 bytes   format version, uint32 little-endian
    8 bytes   header length, uint64 little-endian
    header    UTF-8 JSON: {"kind": ..., "meta": {...},
                           "arrays": [{"name": ..., "shape": [...]}, ...]}
    payload   the arrays' float64 data, little-endian, C order, in header order
    32 bytes  SHA-256 over everything above

Loads are bit-exact: the payload is the raw float64 memory of the arrays.
"""

import hashlib
import json

import numpy as np

from cance.errors import ModelFormatError, ShapeError
from cance.nn.layers import Activation, BatchNormLayer, DenseLayer, Network

MAGIC = b"CNCM"
VERSION = 1


def save_container(path, kind: str, meta: dict, arrays: dict) -> None:
    """Write named float64 arrays plus a metadata dict to `path`."""
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.astype("<f8", copy=False).tobytes())
    header = json.dumps(
        {"kind": kind, "meta": meta, "arrays": entries}, sort_keys=True
    ).encode("utf-8")
    body = (
        MAGIC
        + VERSION.to_bytes(4, "little")
        + len(header).to_bytes(8, "little")
        + header
        + b"".join(blobs)
    )
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())


def load_container(path):
    """Read back (kind, meta, arrays) written by save_container."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 48:
        raise ModelFormatError(f"{path}: truncated file")
    body, checksum = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != checksum:
        raise ModelFormatError(f"{path}: checksum mismatch")
    if body[:4] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic bytes, not a model file")
    version = int.from_bytes(body[4:8], "little")
    if version != VERSION:
        raise ModelFormatError(f"{path}: format version {version}, expected {VERSION}")
    header_len = int.from_bytes(body[8:16], "little")
    if 16 + header_len > len(body):
        raise ModelFormatError(f"{path}: truncated header")
    try:
        header = json.loads(body[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: unreadable header: {exc}") from exc
    payload = body[16 + header_len :]
    declared = sum(int(np.prod(e["shape"])) for e in header["arrays"])
    if declared * 8 != len(payload):
        raise ShapeError(
            f"{path}: header declares {declared} float64 values, "
            f"payload holds {len(payload) // 8}"
        )
    arrays = {}
    offset = 0
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"]))
        arr = np.frombuffer(
            payload, dtype="<f8", count=count, offset=offset
        ).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(np.float64)
        offset += count * 8
    return header["kind"], header["meta"], arrays


def network_to_arrays(net: Network, prefix: str, arrays: dict) -> None:
    for i, layer in enumerate(net.layers):
        if isinstance(layer, DenseLayer):
            arrays[f"{prefix}{i}.weights"] = layer.weights
            arrays[f"{prefix}{i}.bias"] = layer.bias
        elif isinstance(layer, BatchNormLayer):
            arrays[f"{prefix}{i}.gamma"] = layer.gamma
            arrays[f"{prefix}{i}.beta"] = layer.beta
            arrays[f"{prefix}{i}.running_mean"] = layer.running_mean
            arrays[f"{prefix}{i}.running_var"] = layer.running_var
        else:
            raise ShapeError(f"cannot serialize layer {type(layer).__name__}")


def network_from_arrays(specs: list, prefix: str, arrays: dict) -> Network:
    layers = []
    for i, spec in enumerate(specs):
        if spec["type"] == "dense":
            layer = DenseLayer(
                arrays[f"{prefix}{i}.weights"],
                arrays[f"{prefix}{i}.bias"],
                Activation(spec["activation"]),
            )
            if layer.in_dim != spec["in"] or layer.out_dim != spec["out"]:
                raise ShapeError(
                    f"declared dims {spec['in']}x{spec['out']} do not match stored "
                    f"array {layer.weights.shape}"
                )
        elif spec["type"] == "batchnorm":
            layer = BatchNormLayer(spec["dim"], spec["momentum"], spec["epsilon"])
            layer.gamma = arrays[f"{prefix}{i}.gamma"].copy()
            layer.beta = arrays[f"{prefix}{i}.beta"].copy()
            layer.running_mean = arrays[f"{prefix}{i}.running_mean"].copy()
            layer.running_var = arrays[f"{prefix}{i}.running_var"].copy()
        else:
            raise ShapeError(f"unknown layer type {spec['type']!r}")
        layers.append(layer)
    return Network(layers)
