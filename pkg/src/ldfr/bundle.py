"""Portable container for fitted models.

Layout (little endian)::

    8 bytes   magic b"LDFRBNDL"
    uint32    format version
    uint64    length of the JSON header, then the UTF-8 JSON header
    uint64    length of the array block, then an ``.npz`` archive

The JSON header holds the object tree; every array lives in the ``.npz``
block under the key recorded at its place in the tree, so floats round-trip
bit for bit. Only classes of this package are ever rebuilt on load.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from typing import Any, Dict, Optional

import numpy as np

from ldfr.errors import BundleVersionError, ContainerError

MAGIC = b"LDFRBNDL"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<8sIQ")
_LEN = struct.Struct("<Q")


def _registry() -> Dict[str, type]:
    from ldfr import basis, lfpca, pipeline, regression, smoothing

    classes = [basis.SplineBasisSpec, basis.QuadratureRule, smoothing.SmoothSurface,
               smoothing.CovarianceSurface, lfpca.MarginalFpca, lfpca.ScoreProcess,
               lfpca.LfpcaFit, regression.LdfrModelSpec, regression.RandomEffectsLayout,
               regression.LdfrFit, regression.CoefficientSurface, pipeline.LdfrConfig]
    return {c.__name__: c for c in classes}


class _Encoder:
    def __init__(self):
        self.arrays: Dict[str, np.ndarray] = {}

    def encode(self, obj) -> Any:
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            name = type(obj).__name__
            if name not in _registry():
                raise TypeError(f"cannot store objects of type {name}")
            return {"__class__": name,
                    "fields": {k: self.encode(v) for k, v in vars(obj).items()}}
        if isinstance(obj, np.ndarray):
            if obj.dtype.kind in "OUS":
                return {"__strings__": [self.encode(v) for v in obj.tolist()],
                        "kind": obj.dtype.kind}
            key = f"a{len(self.arrays)}"
            self.arrays[key] = obj
            return {"__array__": key}
        if isinstance(obj, tuple):
            return {"__tuple__": [self.encode(v) for v in obj]}
        if isinstance(obj, list):
            return [self.encode(v) for v in obj]
        if isinstance(obj, dict):
            return {"__dict__": [[self.encode(k), self.encode(v)] for k, v in obj.items()]}
        if isinstance(obj, np.generic):
            return obj.item()
        if obj is None or isinstance(obj, (bool, int, float, str)):
            return obj
        raise TypeError(f"cannot store {type(obj).__name__}")


def _decode(node, arrays, registry):
    if isinstance(node, list):
        return [_decode(v, arrays, registry) for v in node]
    if not isinstance(node, dict):
        return node
    if "__array__" in node:
        return arrays[node["__array__"]]
    if "__strings__" in node:
        values = [_decode(v, arrays, registry) for v in node["__strings__"]]
        return np.array(values, dtype=object if node["kind"] == "O" else None)
    if "__tuple__" in node:
        return tuple(_decode(v, arrays, registry) for v in node["__tuple__"])
    if "__dict__" in node:
        return {_decode(k, arrays, registry): _decode(v, arrays, registry)
                for k, v in node["__dict__"]}
    cls = registry.get(node.get("__class__"))
    if cls is None:
        raise ContainerError(f"unknown class {node.get('__class__')!r} in bundle")
    obj = object.__new__(cls)
    for k, v in node["fields"].items():
        # bypass __post_init__ and frozen guards: the stored state is already valid
        object.__setattr__(obj, k, _decode(v, arrays, registry))
    return obj


def dumps(payload: Dict[str, Any], version: int = FORMAT_VERSION) -> bytes:
    """Serialize a dict of storable objects."""
    enc = _Encoder()
    tree = enc.encode(payload)
    header = json.dumps(tree, allow_nan=True).encode("utf-8")
    buf = io.BytesIO()
    np.savez(buf, **enc.arrays)
    block = buf.getvalue()
    return (_HEAD.pack(MAGIC, version, len(header)) + header
            + _LEN.pack(len(block)) + block)


def loads(data: bytes) -> Dict[str, Any]:
    """Inverse of :func:`dumps`; fails as a whole on any damage."""
    if len(data) < _HEAD.size:
        raise ContainerError("file too short for a bundle header")
    magic, version, n_head = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise ContainerError("not a model bundle (bad magic)")
    if version != FORMAT_VERSION:
        raise BundleVersionError(
            f"bundle format version {version}, this library reads version {FORMAT_VERSION}")
    pos = _HEAD.size
    if len(data) < pos + n_head + _LEN.size:
        raise ContainerError("bundle truncated in the header")
    try:
        tree = json.loads(data[pos: pos + n_head].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt bundle header: {exc}") from exc
    pos += n_head
    (n_block,) = _LEN.unpack_from(data, pos)
    pos += _LEN.size
    if len(data) != pos + n_block:
        raise ContainerError(
            f"bundle array block has {len(data) - pos} bytes, expected {n_block}")
    try:
        with np.load(io.BytesIO(data[pos:]), allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except Exception as exc:
        raise ContainerError(f"corrupt bundle array block: {exc}") from exc
    try:
        return _decode(tree, arrays, _registry())
    except KeyError as exc:
        raise ContainerError(f"bundle references missing array {exc}") from exc


def model_summary(model) -> Dict[str, Any]:
    """Quantities reported for a fitted model: PVE, K, L_k and smoothing parameters."""
    fit, lf = model.fit_, model.lfpca
    return {
        "pve": lf.marginal.pve,
        "pve_scores": model.config.pve_scores,
        "K": int(lf.k),
        "L_k": [int(p.n_components) for p in lf.processes],
        "marginal_eigenvalues": [float(v) for v in lf.marginal.eigenvalues],
        "sigma2_w": float(lf.marginal.sigma2_w),
        "score_eigenvalues": [[float(v) for v in p.eigenvalues] for p in lf.processes],
        "lambda0": float(fit.lambdas[0]),
        "lambda": float(fit.lambdas[1]),
        "sigma2_e": float(fit.sigma2_e),
        "d_matrix": None if fit.d_matrix is None else np.asarray(fit.d_matrix).tolist(),
        "sigma2_group": None if fit.sigma2_group is None else float(fit.sigma2_group),
        "link": fit.spec.link,
        "random_effects": fit.spec.random_effects,
        "edf": float(fit.edf),
        "aic": float(fit.aic),
        "converged": bool(fit.converged),
        "n_obs": int(fit.n_obs),
        "n_subjects": int(len(model.subject_labels)),
    }


def save_model(model, path, provenance: Optional[Dict[str, Any]] = None) -> None:
    """Write a fitted :class:`~ldfr.pipeline.LDFR` (without its training data).

    ``provenance`` (typically the config and seed) is stored verbatim and shown
    by the report command.
    """
    if model.fit_ is None:
        raise RuntimeError("model is not fitted")
    surface = model.coefficient_surface()
    payload = {
        "config": model.config,
        "lfpca": model.lfpca,
        "fit": model.fit_,
        "coefficients": list(model.coefficients),
        "subject_labels": np.asarray(model.subject_labels),
        "surface": surface,
        "summary": model_summary(model),
        "provenance": provenance or {},
    }
    data = dumps(payload)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise ContainerError(f"cannot write bundle {path}: {exc}") from exc


def read_bundle(path) -> Dict[str, Any]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ContainerError(f"cannot read bundle {path}: {exc}") from exc
    return loads(data)


def load_model(path):
    """Rebuild a fitted :class:`~ldfr.pipeline.LDFR` from :func:`save_model` output.

    The result predicts for stored and new subjects exactly as the original;
    row-level helpers that need the training data are unavailable.
    """
    from ldfr.pipeline import LDFR

    payload = read_bundle(path)
    model = LDFR(payload["config"])
    model.lfpca = payload["lfpca"]
    model.fit_ = payload["fit"]
    model.coefficients = payload["coefficients"]
    model.subject_labels = payload["subject_labels"]
    model.provenance = payload.get("provenance", {})
    return model
