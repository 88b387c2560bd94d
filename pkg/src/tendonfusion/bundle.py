"""Per-parameter model bundle files.

Layout (all integers little-endian):

    b"TFUS" | u32 version | u32 header length | JSON header | float64 arrays

The JSON header lists every array as ``[name, shape, offset]`` into the
trailing data block, so a bundle is fully described by its header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .lasso import LassoModel
from .regressors import RegressorSpec, from_params

MAGIC = b"TFUS"
VERSION = 1


def _pack(meta, arrays):
    table = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f8"))
        table.append([name, list(arr.shape), offset])
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = dict(meta, arrays=table)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<II", VERSION, len(blob)) + blob + b"".join(chunks)


def _unpack(buf, path):
    if buf[:4] != MAGIC:
        raise DataError(f"{path}: not a model bundle")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported bundle version {version}")
    header = json.loads(buf[12:12 + hlen])
    data = buf[12 + hlen:]
    arrays = {}
    for name, shape, offset in header.pop("arrays"):
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(float)
    return header, arrays


def save_bundle(model, path, stamp=None):
    """Serialize a ParameterModel."""
    lasso = model.lasso
    reg = model.regressor
    arrays = {
        "lasso.coefficients": lasso.coefficients,
        "lasso.mean": lasso.mean,
        "lasso.scale": lasso.scale,
        "lasso.intercept": [lasso.intercept],
        "reg.x_mean": reg.x_mean,
        "reg.x_scale": reg.x_scale,
    }
    for k, v in reg.params.items():
        arrays[f"reg.param.{k}"] = v
    meta = {
        "parameter": model.parameter,
        "trim": model.trim,
        "trim_count": model.trim_count,
        "clamp": model.clamp,
        "lasso_alpha": lasso.alpha,
        "lasso_sweeps": lasso.n_sweeps,
        "regressor": reg.spec.to_dict() if reg.spec else {"kind": reg.kind.value},
        "stamp": stamp or {},
    }
    Path(path).write_bytes(_pack(meta, arrays))


def load_bundle(path):
    """Return (ParameterModel, stamp dict)."""
    from .pipeline import ParameterModel

    header, arrays = _unpack(Path(path).read_bytes(), path)
    lasso = LassoModel(float(arrays["lasso.intercept"][0]), arrays["lasso.coefficients"],
                       arrays["lasso.mean"], arrays["lasso.scale"], header["lasso_alpha"],
                       header["lasso_sweeps"])
    spec_d = header["regressor"]
    spec = RegressorSpec(**spec_d) if len(spec_d) > 1 else None
    params = {k[len("reg.param."):]: v for k, v in arrays.items() if k.startswith("reg.param.")}
    reg = from_params(spec_d["kind"], arrays["reg.x_mean"], arrays["reg.x_scale"], params, spec)
    model = ParameterModel(header["parameter"], lasso, reg, header["trim"],
                           header["trim_count"], header["clamp"])
    return model, header["stamp"]
