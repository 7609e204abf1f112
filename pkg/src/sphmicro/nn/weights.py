"""Weight files: a text manifest plus a raw little-endian float32 blob.

Layout (format version 1)::

    # sphmicro weights
    format_version = 1
    architecture = {"kind": "scnn", ...}      # JSON network descriptor
    n_params = 48930                          # trainable values
    blob = model.wts.bin                      # relative to the manifest
    byte_order = little
    dtype = float32
    <key> = <value>                           # free metadata (seed, snr, ...)
    [arrays]
    conv0.w param 9 2 16
    ...
    bn0.mean buffer 128

The blob holds every listed array in manifest order, C-contiguous, with
no padding or header. Trainable parameters come first, then batch-norm
running statistics.
"""

import json
import os
import time
from pathlib import Path

import numpy as np

from .networks import build_network

FORMAT_VERSION = 1
_RESERVED = ("format_version", "architecture", "n_params", "blob", "byte_order", "dtype")


def _created():
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    stamp = time.gmtime(int(epoch)) if epoch else time.gmtime()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", stamp)


def _format_value(value):
    if isinstance(value, (list, tuple, dict)):
        return json.dumps(value)
    return str(value)


def save_weights(path, network, metadata=None):
    """Write ``path`` (manifest) and ``path + ".bin"`` (blob)."""
    path = Path(path)
    blob_path = path.with_name(path.name + ".bin")
    lines = [
        "# sphmicro weights",
        f"format_version = {FORMAT_VERSION}",
        f"architecture = {json.dumps(network.descriptor(), sort_keys=True)}",
        f"n_params = {network.count_params()}",
        f"blob = {blob_path.name}",
        "byte_order = little",
        "dtype = float32",
    ]
    meta = {"created": _created(), **(metadata or {})}
    for key in sorted(meta):
        if key in _RESERVED or "=" in key or not key.strip():
            raise ValueError(f"invalid metadata key {key!r}")
        lines.append(f"{key} = {_format_value(meta[key])}")
    lines.append("[arrays]")
    chunks = []
    for name, value in network.state_arrays().items():
        kind = "param" if name in network.params else "buffer"
        lines.append(" ".join([name, kind, *map(str, value.shape)]))
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    try:
        blob_path.write_bytes(b"".join(chunks))
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write weights to {path}: {exc}") from exc
    return path


def read_manifest(path):
    """Parse a manifest into ``(header dict, [(name, kind, shape), ...])``."""
    header, arrays, in_arrays = {}, [], False
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line == "[arrays]":
            in_arrays = True
            continue
        if in_arrays:
            parts = line.split()
            if len(parts) < 2 or parts[1] not in ("param", "buffer"):
                raise ValueError(f"{path}:{lineno}: malformed array entry {line!r}")
            arrays.append((parts[0], parts[1], tuple(int(s) for s in parts[2:])))
        else:
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            header[key.strip()] = value.strip()
    if int(header.get("format_version", -1)) != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported weight format {header.get('format_version')}")
    return header, arrays


def load_weights(path, dtype=np.float32):
    """Rebuild the network stored at ``path``; returns ``(network, metadata)``."""
    path = Path(path)
    header, arrays = read_manifest(path)
    blob = np.fromfile(path.with_name(header["blob"]), dtype="<f4")
    expected = sum(int(np.prod(shape)) for _, _, shape in arrays)
    if blob.size != expected:
        raise ValueError(f"{path}: blob holds {blob.size} values, manifest lists {expected}")
    network = build_network(json.loads(header["architecture"]), dtype=dtype)
    values, offset = {}, 0
    for name, _, shape in arrays:
        size = int(np.prod(shape))
        values[name] = blob[offset:offset + size].reshape(shape)
        offset += size
    missing = set(network.state_arrays()) - set(values)
    if missing:
        raise ValueError(f"{path}: missing arrays {sorted(missing)}")
    for name, value in values.items():
        if not np.all(np.isfinite(value)):
            raise ValueError(f"{path}: non-finite values in {name}")
    network.load_state_arrays(values)
    if network.count_params() != int(header["n_params"]):
        raise ValueError(f"{path}: parameter count mismatch")
    meta = {k: v for k, v in header.items() if k not in _RESERVED}
    return network, meta
