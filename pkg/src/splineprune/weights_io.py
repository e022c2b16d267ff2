"""Single-file weight interchange.

Byte layout::

    b"SPLW1\\n"                       6-byte magic line
    b"<header length in bytes>\\n"    ASCII decimal, newline terminated
    <header>                         UTF-8 JSON text of exactly that length
    <payload>                        little-endian float64 arrays, back to back

The header holds ``input_shape`` and a ``layers`` list.  Each entry has a
``kind`` (``dense``, ``conv2d``, ``maxpool2d``, ``flatten``); linear entries
also carry ``activation``, ``stride``/``padding`` for conv, and for each of
``weights``, ``bias`` and (optionally) ``mask`` an ``{"offset", "shape"}``
record.  ``offset`` counts float64 elements from the start of the payload;
arrays are stored row-major.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .engine import Conv2d, Dense, Flatten, MaxPool2d, Network
from .errors import FormatError

MAGIC = b"SPLW1\n"


def dumps(net: Network) -> bytes:
    arrays, layers = [], []
    offset = 0

    def put(arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr, dtype="<f8")
        arrays.append(arr)
        record = {"offset": offset, "shape": list(arr.shape)}
        offset += arr.size
        return record

    for layer in net.layers:
        entry = {"kind": layer.kind}
        if isinstance(layer, (Dense, Conv2d)):
            entry["activation"] = layer.activation.to_dict()
            entry["weights"] = put(layer.weights)
            entry["bias"] = put(layer.bias)
            entry["mask"] = None if layer.mask is None else put(layer.mask)
            if isinstance(layer, Conv2d):
                entry["stride"] = layer.stride
                entry["padding"] = layer.padding
        layers.append(entry)
    header = json.dumps({"input_shape": list(net.input_shape), "layers": layers},
                        sort_keys=True).encode("utf-8")
    payload = b"".join(a.tobytes() for a in arrays)
    return MAGIC + str(len(header)).encode("ascii") + b"\n" + header + payload


def loads(blob: bytes) -> Network:
    if not blob.startswith(MAGIC):
        raise FormatError("bad magic for weight file", 0)
    pos = len(MAGIC)
    end = blob.find(b"\n", pos)
    if end < 0:
        raise FormatError("missing header length line", pos)
    try:
        hlen = int(blob[pos:end])
    except ValueError:
        raise FormatError("header length is not an integer", pos) from None
    start = end + 1
    if len(blob) < start + hlen:
        raise FormatError("truncated header", len(blob))
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}", start) from None
    payload_start = start + hlen
    payload = np.frombuffer(blob, dtype="<f8", offset=payload_start,
                            count=(len(blob) - payload_start) // 8)

    def get(record):
        if record is None:
            return None
        size = int(np.prod(record["shape"]))
        if record["offset"] + size > payload.size:
            raise FormatError("truncated payload", payload_start + 8 * payload.size)
        return payload[record["offset"]:record["offset"] + size].reshape(record["shape"]).astype(np.float64)

    layers = []
    for entry in header["layers"]:
        kind = entry["kind"]
        if kind == "dense":
            layers.append(Dense(get(entry["weights"]), get(entry["bias"]),
                                entry["activation"], get(entry.get("mask"))))
        elif kind == "conv2d":
            layers.append(Conv2d(get(entry["weights"]), get(entry["bias"]), entry["activation"],
                                 get(entry.get("mask")), entry["stride"], entry["padding"]))
        elif kind == "maxpool2d":
            layers.append(MaxPool2d())
        elif kind == "flatten":
            layers.append(Flatten())
        else:
            raise FormatError(f"unknown layer kind {kind!r}", start)
    return Network(layers, tuple(header["input_shape"]))


def save_weights(net: Network, path) -> Path:
    path = Path(path)
    path.write_bytes(dumps(net))
    return path


def load_weights(path) -> Network:
    return loads(Path(path).read_bytes())
