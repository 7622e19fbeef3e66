"""Binary persistence for trajectories, observation sets, fitted models and results.

Matrix files carry a fixed header (4-byte magic, ``u32`` format version,
``u64`` rows, ``u64`` columns) followed by row-major little-endian ``f64``
data, with a JSON sidecar at ``<path>.json``.  Several trajectories of equal
length are stacked row-wise; the sidecar records how to split them.

Model files are one container: magic ``TVMD``, ``u32`` version, ``u64``
manifest length, the UTF-8 JSON manifest, then raw little-endian ``f64``
blocks whose names, shapes and byte offsets the manifest lists.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .cme import ConstantFeatureMap, FeatureSpaceModel, KernelFeatureMap, LinearDecoder
from .deep_features import DenseNet, NetworkDecoder, NetworkFeatureMap
from .dynamics import SystemSpec, Trajectory
from .errors import InvalidSpecError, TensorVarError
from .kernel import KernelSpec, NystromBasis, Standardizer
from .observation import ObservationSpec

TRAJ_MAGIC = b"TVAR"
MODEL_MAGIC = b"TVMD"
FORMAT_VERSION = 1
_MATRIX_HEADER = struct.Struct("<4sIQQ")
_MODEL_HEADER = struct.Struct("<4sIQ")
_F64 = np.dtype("<f8")


class FormatError(TensorVarError, ValueError):
    """A file does not match the expected binary layout."""


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(obj) -> str:
    """Deterministic JSON (sorted keys, numpy values converted)."""
    return json.dumps(obj, default=_jsonable, sort_keys=True, indent=2)


def array_digest(*arrays) -> str:
    """SHA-256 over the little-endian ``f64`` bytes of each array in turn."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=_F64)
        h.update(struct.pack("<Q", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        h.update(a.tobytes())
    return h.hexdigest()


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


# ----------------------------------------------------------------------------
# matrices, trajectories, observation sets


def write_matrix(path, matrix, magic=TRAJ_MAGIC):
    M = np.ascontiguousarray(matrix, dtype=_F64)
    if M.ndim != 2:
        raise InvalidSpecError("only 2-d matrices can be written")
    with open(path, "wb") as fh:
        fh.write(_MATRIX_HEADER.pack(magic, FORMAT_VERSION, *M.shape))
        fh.write(M.tobytes())


def read_matrix(path, magic=TRAJ_MAGIC):
    raw = Path(path).read_bytes()
    if len(raw) < _MATRIX_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    got, version, rows, cols = _MATRIX_HEADER.unpack_from(raw)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    body = raw[_MATRIX_HEADER.size:]
    if len(body) != rows * cols * 8:
        raise FormatError(f"{path}: payload has {len(body)} bytes, "
                          f"header implies {rows * cols * 8}")
    return np.frombuffer(body, dtype=_F64).reshape(rows, cols).astype(float)


def save_trajectories(path, trajectories, seed=None):
    """Write equal-length trajectories as one stacked matrix plus sidecar."""
    trajectories = list(trajectories)
    if not trajectories:
        raise InvalidSpecError("nothing to save")
    lengths = {tr.n_steps for tr in trajectories}
    if len(lengths) != 1:
        raise InvalidSpecError("trajectories must share one length to be stacked")
    spec = trajectories[0].spec
    seed = trajectories[0].seed if seed is None else seed
    write_matrix(path, np.concatenate([tr.states for tr in trajectories]))
    meta = {"kind": "trajectories", "format_version": FORMAT_VERSION,
            "n_traj": len(trajectories), "traj_len": trajectories[0].n_steps,
            "dt_sample": trajectories[0].dt_sample, "seed": seed,
            "spec": spec.to_dict() if spec is not None else None,
            "sha256": array_digest(*(tr.states for tr in trajectories))}
    sidecar_path(path).write_text(dumps(meta))
    return meta


def load_trajectories(path):
    meta = json.loads(sidecar_path(path).read_text())
    data = read_matrix(path)
    n, length = meta["n_traj"], meta["traj_len"]
    if data.shape[0] != n * length:
        raise FormatError(f"{path}: {data.shape[0]} rows, sidecar implies {n * length}")
    spec = SystemSpec(**meta["spec"]) if meta.get("spec") else None
    return [Trajectory(data[i * length:(i + 1) * length], meta["dt_sample"], spec,
                       seed=meta.get("seed"), meta={"index": i}) for i in range(n)]


def save_observations(path, observations, spec: ObservationSpec, seed=None, extra=None):
    """Write per-trajectory observation sequences with the observation spec."""
    observations = [np.asarray(o, dtype=float) for o in observations]
    if len({o.shape for o in observations}) != 1:
        raise InvalidSpecError("observation sequences must share one shape")
    write_matrix(path, np.concatenate(observations))
    meta = {"kind": "observations", "format_version": FORMAT_VERSION,
            "n_traj": len(observations), "traj_len": observations[0].shape[0],
            "mask": list(spec.mask), "spec": spec.to_dict(),
            "seed": spec.rng_seed if seed is None else seed,
            "sha256": array_digest(*observations), **(extra or {})}
    sidecar_path(path).write_text(dumps(meta))
    return meta


def load_observations(path):
    """Return ``(list of (n_steps, n_o) arrays, ObservationSpec, sidecar dict)``."""
    meta = json.loads(sidecar_path(path).read_text())
    data = read_matrix(path)
    n, length = meta["n_traj"], meta["traj_len"]
    if data.shape[0] != n * length:
        raise FormatError(f"{path}: {data.shape[0]} rows, sidecar implies {n * length}")
    spec = ObservationSpec(**meta["spec"])
    return [data[i * length:(i + 1) * length] for i in range(n)], spec, meta


# ----------------------------------------------------------------------------
# model container


class _Blocks:
    def __init__(self):
        self.entries, self.arrays, self.offset = [], [], 0

    def add(self, name, array):
        a = np.ascontiguousarray(array, dtype=_F64)
        self.entries.append({"name": name, "shape": list(a.shape), "offset": self.offset})
        self.arrays.append(a)
        self.offset += a.nbytes
        return name


def _pack_standardizer(blocks, prefix, std: Standardizer):
    return {"mean": blocks.add(prefix + ".mean", std.mean),
            "scale": blocks.add(prefix + ".scale", std.scale)}


def _pack_net(blocks, prefix, net: DenseNet):
    return {"sizes": net.sizes, "activation": "tanh", "output_activation": "none",
            "weights": [blocks.add(f"{prefix}.W{i}", w) for i, w in enumerate(net.weights)],
            "biases": [blocks.add(f"{prefix}.b{i}", b) for i, b in enumerate(net.biases)]}


def _pack_feature_map(blocks, prefix, fmap):
    if isinstance(fmap, ConstantFeatureMap):
        return {"type": "constant", "input_dim": fmap.input_dim}
    if isinstance(fmap, KernelFeatureMap):
        b = fmap.basis
        return {"type": "kernel", "add_constant": fmap.add_constant, "centered": b.centered,
                "kernel": b.kernel.to_dict(),
                "landmarks": blocks.add(prefix + ".landmarks", b.landmarks),
                "projection": blocks.add(prefix + ".projection", b.projection),
                "eigenvalues": blocks.add(prefix + ".eigenvalues", b.eigenvalues),
                "offset": blocks.add(prefix + ".offset", b.offset),
                "standardizer": _pack_standardizer(blocks, prefix + ".std", b.standardizer)}
    if isinstance(fmap, NetworkFeatureMap):
        return {"type": "network", "add_constant": fmap.add_constant,
                "net": _pack_net(blocks, prefix + ".net", fmap.net),
                "standardizer": _pack_standardizer(blocks, prefix + ".std", fmap.standardizer)}
    raise InvalidSpecError(f"cannot serialise feature map of type {type(fmap).__name__}")


def _pack_decoder(blocks, dec):
    if isinstance(dec, LinearDecoder):
        return {"type": "linear", "matrix": blocks.add("decoder.matrix", dec.matrix),
                "offset": blocks.add("decoder.offset", dec.offset)}
    if isinstance(dec, NetworkDecoder):
        return {"type": "network", "net": _pack_net(blocks, "decoder.net", dec.net),
                "standardizer": _pack_standardizer(blocks, "decoder.std", dec.standardizer)}
    raise InvalidSpecError(f"cannot serialise decoder of type {type(dec).__name__}")


def save_model(path, model: FeatureSpaceModel):
    blocks = _Blocks()
    manifest = {
        "format": "tensorvar-model", "format_version": FORMAT_VERSION,
        "path": model.path, "lam": model.lam, "meta": model.meta,
        "dims": {"d_s": model.d_s, "n_s": model.n_s, "d_oh": int(model.C_inv.shape[1])},
        "state_map": _pack_feature_map(blocks, "state", model.state_map),
        "obs_map": _pack_feature_map(blocks, "obs", model.obs_map),
        "hist_map": _pack_feature_map(blocks, "hist", model.hist_map),
        "decoder": _pack_decoder(blocks, model.decoder),
        "operators": {name: blocks.add(name, getattr(model, name))
                      for name in ("C_dyn", "C_inv", "B", "R", "Q", "background_state")},
    }
    manifest["blocks"] = blocks.entries
    text = dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MODEL_HEADER.pack(MODEL_MAGIC, FORMAT_VERSION, len(text)))
        fh.write(text)
        for a in blocks.arrays:
            fh.write(a.tobytes())


def read_model_manifest(path):
    raw = Path(path).read_bytes()
    if len(raw) < _MODEL_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n = _MODEL_HEADER.unpack_from(raw)
    if magic != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MODEL_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    start = _MODEL_HEADER.size
    manifest = json.loads(raw[start:start + n].decode("utf-8"))
    return manifest, raw[start + n:]


def load_model(path) -> FeatureSpaceModel:
    manifest, body = read_model_manifest(path)
    arrays = {}
    for e in manifest["blocks"]:
        size = int(np.prod(e["shape"], dtype=np.int64)) * 8
        if e["offset"] + size > len(body):
            raise FormatError(f"{path}: block {e['name']} runs past end of file")
        arrays[e["name"]] = np.frombuffer(body, _F64, size // 8, e["offset"]).reshape(
            e["shape"]).astype(float)

    def std(d):
        return Standardizer(arrays[d["mean"]], arrays[d["scale"]])

    def net(d):
        return DenseNet(d["sizes"], weights=[arrays[k] for k in d["weights"]],
                        biases=[arrays[k] for k in d["biases"]])

    def fmap(d):
        if d["type"] == "constant":
            return ConstantFeatureMap(d["input_dim"])
        if d["type"] == "kernel":
            k = d["kernel"]
            kernel = KernelSpec(k["lengthscale"], k["selection"], k["family"], tuple(k["grid"]))
            basis = NystromBasis(arrays[d["landmarks"]], kernel, arrays[d["projection"]],
                                 arrays[d["eigenvalues"]], arrays[d["offset"]],
                                 std(d["standardizer"]), d["centered"])
            return KernelFeatureMap(basis, d["add_constant"])
        if d["type"] == "network":
            return NetworkFeatureMap(net(d["net"]), std(d["standardizer"]), d["add_constant"])
        raise FormatError(f"unknown feature map type {d['type']!r}")

    dec = manifest["decoder"]
    if dec["type"] == "linear":
        decoder = LinearDecoder(arrays[dec["matrix"]], arrays[dec["offset"]])
    else:
        decoder = NetworkDecoder(net(dec["net"]), std(dec["standardizer"]))
    ops = {k: arrays[v] for k, v in manifest["operators"].items()}
    model = FeatureSpaceModel(fmap(manifest["state_map"]), fmap(manifest["obs_map"]),
                              fmap(manifest["hist_map"]), decoder, ops["C_dyn"], ops["C_inv"],
                              ops["B"], ops["R"], ops["Q"], manifest["lam"],
                              ops["background_state"], manifest["path"], manifest["meta"])
    return model.validate()


# ----------------------------------------------------------------------------
# per-timestep result tables


def write_result_csv(path, estimate, truth=None, residuals=None, method="tensor-var",
                     run=0, start=0):
    """One row per timestep: method, run, time, truth, estimate, residual terms.

    ``residuals`` maps a term name to a length-``T+1`` sequence (missing
    terms are left blank).
    """
    est = np.atleast_2d(np.asarray(estimate, dtype=float))
    n_t, n_s = est.shape
    residuals = residuals or {}
    terms = sorted(residuals)
    header = ["method", "run", "t"] + [f"truth_{i}" for i in range(n_s)] * (truth is not None) \
        + [f"estimate_{i}" for i in range(n_s)] + [f"residual_{k}" for k in terms]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t in range(n_t):
            row = [method, run, start + t]
            if truth is not None:
                row += [repr(float(v)) for v in np.asarray(truth)[t]]
            row += [repr(float(v)) for v in est[t]]
            row += [repr(float(residuals[k][t])) if t < len(residuals[k]) else "" for k in terms]
            w.writerow(row)


def write_manifest(path, manifest: dict):
    Path(path).write_text(dumps(manifest) + "\n")
