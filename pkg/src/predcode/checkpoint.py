"""Binary checkpoint container for trained networks.

Layout: 8 magic bytes, little-endian ``uint32`` format version, ``uint64``
manifest length, UTF-8 JSON manifest, then raw little-endian arrays in
manifest order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .data import Whitening
from .exceptions import ConfigError, FormatError
from .network import PredictiveCodingNetwork, StageParameters
from .ops import FilterBank
from .topdown import TransitionMatrix

__all__ = ["MAGIC", "VERSION", "save_checkpoint", "load_checkpoint"]

MAGIC = b"PREDCODE"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")
_STAGE_WEIGHTS = ("alpha", "alpha_prime", "state_lambda", "lambda_prime", "eta_prime", "mu")
_TUPLE_PARAMS = ("stages", "state_lambda", "cause_lambda", "alpha")


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def save_checkpoint(net, path, whitening=None, dtype="<f8"):
    """Write ``net`` (and an optional fitted whitening) to ``path``.

    ``dtype`` is ``"<f8"`` (exact round trip) or ``"<f4"`` (half the size).
    """
    if dtype not in ("<f8", "<f4"):
        raise ValueError("checkpoint dtype must be '<f8' or '<f4'")
    arrays = []
    stages = []
    for i, stage in enumerate(net.stages_, start=1):
        entry = {"index": i, **{k: float(getattr(stage, k)) for k in _STAGE_WEIGHTS}, "arrays": {}}
        for name, arr in stage.arrays().items():
            entry["arrays"][name] = len(arrays)
            arrays.append((f"stage{i}.{name}", arr))
        stages.append(entry)
    if whitening is not None:
        arrays.append(("whitening.mean", whitening.mean))
        arrays.append(("whitening.matrix", whitening.matrix))
    index = []
    offset = 0
    for name, arr in arrays:
        nbytes = arr.size * np.dtype(dtype).itemsize
        index.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in net.get_params().items()}
    manifest = {
        "params": params,
        "n_stages": len(stages),
        "stages": stages,
        "arrays": index,
        "history": getattr(net, "history_", []),
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def load_checkpoint(path, with_whitening=False):
    """Read a checkpoint; returns the network, or ``(net, whitening)`` if requested."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, length = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"{path}: format version {version}, this reader handles {VERSION}")
    start = _HEADER.size
    if len(raw) < start + length:
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[start : start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})") from None
    for key in ("params", "n_stages", "stages", "arrays"):
        if key not in manifest:
            raise FormatError(f"{path}: manifest has no {key!r} entry")
    payload = memoryview(raw)[start + length :]

    arrays = []
    for item in manifest["arrays"]:
        end = item["offset"] + item["nbytes"]
        if end > len(payload):
            raise FormatError(f"{path}: array {item['name']} truncated")
        arr = np.frombuffer(payload[item["offset"] : end], dtype=item["dtype"]).reshape(item["shape"])
        arrays.append(arr.astype(np.float64))

    by_index = {entry.get("index"): entry for entry in manifest.get("stages", [])}
    stages = []
    for i in range(1, manifest["n_stages"] + 1):
        entry = by_index.get(i)
        if entry is None:
            raise ConfigError(f"stage {i}", "missing from checkpoint manifest")
        names = entry.get("arrays", {})
        for required in ("D", "G"):
            if required not in names:
                raise ConfigError(f"stage {i}", f"has no {required} array")
        C = TransitionMatrix(arrays[names["C"]]) if "C" in names else None
        stages.append(
            StageParameters(
                D=FilterBank(arrays[names["D"]]),
                G=FilterBank(arrays[names["G"]]),
                C=C,
                **{k: entry[k] for k in _STAGE_WEIGHTS},
            )
        )
    params = {k: (_tuplify(v) if k in _TUPLE_PARAMS else v) for k, v in manifest["params"].items()}
    params.pop("stages", None)
    net = PredictiveCodingNetwork.from_stages(stages, **params)
    net.history_ = manifest.get("history", [])
    if not with_whitening:
        return net
    names = {item["name"]: i for i, item in enumerate(manifest["arrays"])}
    whitening = None
    if "whitening.mean" in names:
        whitening = Whitening(arrays[names["whitening.mean"]], arrays[names["whitening.matrix"]])
    return net, whitening
