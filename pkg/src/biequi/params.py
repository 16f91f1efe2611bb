"""Model configuration, seeded weight initialisation and the ``.bqf`` weight
archive.

Archive layout (all integers little-endian)::

    8 bytes   magic b"BQEQRW01"
    8 bytes   uint64 length L of the manifest
    L bytes   UTF-8 JSON manifest {"config": {...}, "tensors": [...]}
    ...       float32 payload; each manifest entry gives name, shape,
              dtype ("f32") and the byte offset into the payload
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeMismatch

MAGIC = b"BQEQRW01"
ROLES = ("vn_weight", "scalar_weight", "bias", "gate_direction", "dustbin")
MODEL_PREFIXES = ("main", "refine")

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and pipeline hyper-parameters.

    Widths not fixed by the method description default to small values
    suitable for CPU-scale runs.
    """

    n_levels: int = 4
    base_voxel: float = 0.025
    k_neighbors: int = 20
    scalar_dims: tuple = (32, 64, 128, 256)
    vector_dims: tuple = (8, 16, 32, 64)
    layers_per_level: int = 3
    n_blocks: int = 3
    num_heads: int = 1
    geo_dims: int = 64
    n_anchors: int = 3
    sigma_d: float = 0.2
    sigma_a_deg: float = 15.0
    top_k: int = 256
    mutual_m: int = 3
    sinkhorn_iters: int = 100
    refine_steps: int = 3
    acceptance_radius: float = 0.1
    max_points: int = 5000
    lgr_refits: int = 1
    init_features: str = "edge_vn"
    coarse_similarity: str = "cosine"
    grid_frame: str = "pca"
    residual: str = "sublayer"
    refine_moves_points: bool = False

    def __post_init__(self):
        object.__setattr__(self, "scalar_dims", tuple(int(x) for x in self.scalar_dims))
        object.__setattr__(self, "vector_dims", tuple(int(x) for x in self.vector_dims))
        if self.n_levels < 2:
            raise ValueError("n_levels must be at least 2")
        if len(self.scalar_dims) != self.n_levels or len(self.vector_dims) != self.n_levels:
            raise ValueError("scalar_dims and vector_dims need one entry per level")
        positive = ("base_voxel", "k_neighbors", "layers_per_level", "n_blocks", "num_heads",
                    "geo_dims", "n_anchors", "sigma_d", "sigma_a_deg", "mutual_m",
                    "sinkhorn_iters", "acceptance_radius", "max_points", "lgr_refits")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if min(self.scalar_dims) < 1 or min(self.vector_dims) < 1:
            raise ValueError("feature widths must be positive")
        if self.top_k < 0 or self.refine_steps < 0:
            raise ValueError("top_k and refine_steps must be nonnegative")
        if self.num_heads != 1:
            raise ValueError("only single-head attention is implemented")
        if self.geo_dims % 2:
            raise ValueError("geo_dims must be even (sin/cos pairs)")
        if self.init_features != "edge_vn":
            raise ValueError("init_features must be 'edge_vn'")
        if self.coarse_similarity != "cosine":
            raise ValueError("coarse_similarity must be 'cosine'")
        if self.residual != "sublayer":
            raise ValueError("residual must be 'sublayer'")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["scalar_dims"] = list(self.scalar_dims)
        d["vector_dims"] = list(self.vector_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: tuple
    role: str
    fan_in: int


def _backbone_specs(cfg):
    cs, cv, k = cfg.scalar_dims, cfg.vector_dims, cfg.k_neighbors
    specs = [
        TensorSpec("backbone/lift_s", (1, cs[0]), "scalar_weight", 1),
        TensorSpec("backbone/init_vn", (k, cv[0]), "vn_weight", k),
    ]
    for lvl in range(cfg.n_levels):
        s, v = cs[lvl], cv[lvl]
        fan = 2 * s + 1 + v
        for m in range(cfg.layers_per_level):
            base = f"backbone/l{lvl}/h{m}"
            specs += [
                TensorSpec(f"{base}/w_s", (fan, s), "scalar_weight", fan),
                TensorSpec(f"{base}/b_s", (s,), "bias", fan),
                TensorSpec(f"{base}/w_v", (v + 1, v), "vn_weight", v + 1),
                TensorSpec(f"{base}/gate", (v, v), "gate_direction", v),
            ]
        if lvl + 1 < cfg.n_levels:
            specs += [
                TensorSpec(f"backbone/t{lvl}/w_s", (s, cs[lvl + 1]), "scalar_weight", s),
                TensorSpec(f"backbone/t{lvl}/w_v", (v, cv[lvl + 1]), "vn_weight", v),
            ]
    return specs


def _model_specs(cfg, prefix):
    c, v, g = cfg.scalar_dims[-1], cfg.vector_dims[-1], cfg.geo_dims
    geo_in = (1 + cfg.n_anchors) * g
    specs = [TensorSpec(f"{prefix}/geo/w", (geo_in, g), "scalar_weight", geo_in)]
    for b in range(cfg.n_blocks):
        base = f"{prefix}/block{b}"
        specs += [
            TensorSpec(f"{base}/intra/w_q", (c, c), "scalar_weight", c),
            TensorSpec(f"{base}/intra/w_k", (c, c), "scalar_weight", c),
            TensorSpec(f"{base}/intra/w_r", (g, c), "scalar_weight", g),
            TensorSpec(f"{base}/intra/w_v", (c, c), "scalar_weight", c),
            TensorSpec(f"{base}/intra/wq_vec", (v,), "scalar_weight", v),
            TensorSpec(f"{base}/intra/wk_vec", (v,), "scalar_weight", v),
            TensorSpec(f"{base}/intra/vn", (v, v), "vn_weight", v),
            TensorSpec(f"{base}/cross/w_q", (c, c), "scalar_weight", c),
            TensorSpec(f"{base}/cross/w_k", (c, c), "scalar_weight", c),
            TensorSpec(f"{base}/cross/w_v", (c, c), "scalar_weight", c),
            TensorSpec(f"{base}/pair/w_q", (c, c), "scalar_weight", c),
            TensorSpec(f"{base}/pair/w_k", (c, c), "scalar_weight", c),
            TensorSpec(f"{base}/pair/w_v", (c, c), "scalar_weight", c),
            TensorSpec(f"{base}/pair/wq_vec", (v,), "scalar_weight", v),
            TensorSpec(f"{base}/pair/wk_vec", (v,), "scalar_weight", v),
            TensorSpec(f"{base}/pair/vn", (v, v), "vn_weight", v),
            TensorSpec(f"{base}/pair/ln_gamma", (v,), "scalar_weight", v),
            TensorSpec(f"{base}/pair/ln_beta", (v,), "bias", v),
        ]
    v1, s1 = cfg.vector_dims[1], cfg.scalar_dims[1]
    specs += [
        TensorSpec(f"{prefix}/fine/w_u", (v1 * v1, s1), "scalar_weight", v1 * v1),
        TensorSpec(f"{prefix}/fine/dustbin", (1,), "dustbin", 1),
    ]
    return specs


def param_specs(config):
    specs = _backbone_specs(config)
    for prefix in MODEL_PREFIXES:
        specs += _model_specs(config, prefix)
    return specs


def fnv1a64(text):
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def splitmix64(x):
    """SplitMix64 finaliser applied elementwise to a uint64 array
    (the state increment is included)."""
    z = np.asarray(x, dtype=np.uint64) + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def uniform_stream(seed, name, n):
    """``n`` doubles in ``[0, 1)`` from the counter-based stream keyed by
    ``(seed, name)``."""
    key = splitmix64(np.array([(int(seed) & _MASK64) ^ fnv1a64(name)], dtype=np.uint64))[0]
    counters = np.arange(n, dtype=np.uint64) * _GOLDEN + key
    bits = splitmix64(counters) >> np.uint64(11)
    return bits.astype(np.float64) * (1.0 / (1 << 53))


class ParamSet:
    """Immutable mapping from tensor name to float32 weights.

    Indexing returns a read-only float64 view of the stored values; ``raw``
    exposes the float32 tensors that are serialised.
    """

    def __init__(self, config, tensors):
        self.config = config
        self._raw = {}
        self._f64 = {}
        specs = {s.name: s for s in param_specs(config)}
        missing = set(specs) - set(tensors)
        extra = set(tensors) - set(specs)
        if missing or extra:
            raise FormatError(f"tensor names do not match config "
                              f"(missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]})")
        for name, spec in specs.items():
            arr = np.array(tensors[name], dtype="<f4")
            if tuple(arr.shape) != tuple(spec.shape):
                raise ShapeMismatch(f"{name}: shape {arr.shape} != expected {spec.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite values")
            arr.setflags(write=False)
            wide = arr.astype(np.float64)
            wide.setflags(write=False)
            self._raw[name] = arr
            self._f64[name] = wide

    def __getitem__(self, name):
        return self._f64[name]

    def __contains__(self, name):
        return name in self._raw

    def __iter__(self):
        return iter(self._raw)

    def __len__(self):
        return len(self._raw)

    @property
    def raw(self):
        return dict(self._raw)

    def __eq__(self, other):
        if not isinstance(other, ParamSet):
            return NotImplemented
        return (self.config == other.config and self._raw.keys() == other._raw.keys()
                and all(np.array_equal(self._raw[k].view(np.uint32), other._raw[k].view(np.uint32))
                        for k in self._raw))

    def with_tensors(self, **updates):
        """Copy with some tensors replaced (names use ``__`` for ``/``)."""
        tensors = dict(self._raw)
        for key, value in updates.items():
            tensors[key.replace("__", "/")] = value
        return ParamSet(self.config, tensors)

    def replaced(self, mapping):
        tensors = dict(self._raw)
        tensors.update(mapping)
        return ParamSet(self.config, tensors)


def init_params(config=None, seed=0):
    """Deterministic initialisation: every tensor is drawn uniformly in
    ``+-sqrt(6 / fan_in)``; dustbin scores start at 1.0."""
    config = config or ModelConfig()
    tensors = {}
    for spec in param_specs(config):
        n = int(np.prod(spec.shape))
        if spec.role == "dustbin":
            values = np.ones(n)
        else:
            bound = np.sqrt(6.0 / spec.fan_in)
            values = (2.0 * uniform_stream(seed, spec.name, n) - 1.0) * bound
        tensors[spec.name] = values.reshape(spec.shape).astype("<f4")
    return ParamSet(config, tensors)


def save_archive(params, path):
    entries = []
    offset = 0
    chunks = []
    for name, arr in params.raw.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset})
        chunks.append(data)
        offset += len(data)
    manifest = json.dumps({"config": params.config.to_dict(), "tensors": entries},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for chunk in chunks:
            fh.write(chunk)


def load_archive(path):
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise FormatError("not a BQEQRW01 archive (bad magic)")
    (mlen,) = struct.unpack("<Q", blob[8:16])
    if 16 + mlen > len(blob):
        raise FormatError("archive truncated inside the manifest")
    try:
        manifest = json.loads(blob[16:16 + mlen].decode("utf-8"))
        config = ModelConfig.from_dict(manifest["config"])
        entries = manifest["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed manifest: {exc}") from exc
    payload = memoryview(blob)[16 + mlen:]
    expected = {s.name: s for s in param_specs(config)}
    tensors = {}
    for entry in entries:
        try:
            name, shape, dtype, offset = entry["name"], tuple(entry["shape"]), entry["dtype"], int(entry["offset"])
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed tensor entry: {entry!r}") from exc
        if dtype != "f32":
            raise FormatError(f"{name}: unsupported dtype {dtype!r}")
        if name in expected and shape != tuple(expected[name].shape):
            raise ShapeMismatch(f"{name}: archive shape {shape} != config shape {expected[name].shape}")
        nbytes = 4 * int(np.prod(shape))
        if offset < 0 or offset + nbytes > len(payload):
            raise FormatError(f"{name}: payload truncated (need bytes {offset}..{offset + nbytes})")
        tensors[name] = np.frombuffer(payload[offset:offset + nbytes], dtype="<f4").reshape(shape).copy()
    return ParamSet(config, tensors)
