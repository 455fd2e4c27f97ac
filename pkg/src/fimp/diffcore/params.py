"""Named parameter store, initializers, and the checkpoint container.

Checkpoint container layout (little-endian):

    8 bytes   magic  b"FIMPCKPT"
    8 bytes   uint64 manifest length in bytes
    ...       manifest JSON: {format_version, config_hash, meta,
                              arrays: [{name, shape, offset}]}
    ...       one contiguous float32 blob; `offset` is the byte offset of
              each array inside the blob

Round-trips are byte-exact.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from fimp.diffcore.tensor import Tensor, default_dtype
from fimp.errors import CheckpointError, DimensionError

_MAGIC = b"FIMPCKPT"
FORMAT_VERSION = 1


class ParamStore:
    """Flat mapping of parameter names to gradient-carrying tensors."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(array, dtype=default_dtype()), requires_grad=True)
        t.zero_grad()
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(values)
        extra = set(values) - set(self._params)
        if missing or extra:
            raise CheckpointError(
                f"parameter names mismatch (missing={sorted(missing)[:3]}, "
                f"extra={sorted(extra)[:3]})")
        for k, t in self._params.items():
            v = np.asarray(values[k])
            if v.shape != t.data.shape:
                raise CheckpointError(
                    f"shape mismatch for {k}: {v.shape} vs {t.data.shape}")
            t.data[...] = v.astype(t.data.dtype)


# -- initializers -----------------------------------------------------------

def glorot_uniform(shape, rng: np.random.Generator) -> np.ndarray:
    fan_in, fan_out = shape[-2], shape[-1]
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-limit, limit, size=shape)


def token_init(shape, rng: np.random.Generator, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


# -- parameter bundles ------------------------------------------------------

@dataclass
class AttentionParams:
    """Projections for multi-head attention.

    w_q/w_k/w_v are [C, C]; column block i*(C/h):(i+1)*(C/h) is head i's
    projection.  w_o is the [C, C] output projection.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    @property
    def feature_dim(self) -> int:
        return self.w_q.data.shape[0]


@dataclass
class GruParams:
    """Update (z), reset (r) and candidate (n) gate weights."""

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_n: Tensor
    u_n: Tensor
    b_n: Tensor

    def blocks(self):
        return [self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r,
                self.w_n, self.u_n, self.b_n]


@dataclass
class MlpParams:
    """Affine layers for an MLP; hidden layers get the activation."""

    layers: list = field(default_factory=list)  # [(W, b), ...]

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].data.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].data.shape[1]


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor


def make_attention(store: ParamStore, prefix: str, dim: int, heads: int,
                   rng: np.random.Generator) -> AttentionParams:
    if dim % heads != 0:
        raise DimensionError(f"feature dim {dim} not divisible by {heads} heads")
    mk = lambda n: store.add(f"{prefix}.{n}", glorot_uniform((dim, dim), rng))
    return AttentionParams(mk("w_q"), mk("w_k"), mk("w_v"), mk("w_o"), heads)


def make_gru(store: ParamStore, prefix: str, dim: int,
             rng: np.random.Generator) -> GruParams:
    def wb(gate):
        w = store.add(f"{prefix}.w_{gate}", glorot_uniform((dim, dim), rng))
        u = store.add(f"{prefix}.u_{gate}", glorot_uniform((dim, dim), rng))
        b = store.add(f"{prefix}.b_{gate}", np.zeros(dim))
        return w, u, b

    return GruParams(*wb("z"), *wb("r"), *wb("n"))


def make_mlp(store: ParamStore, prefix: str, dims, rng: np.random.Generator) -> MlpParams:
    layers = []
    for i in range(len(dims) - 1):
        w = store.add(f"{prefix}.w{i}", glorot_uniform((dims[i], dims[i + 1]), rng))
        b = store.add(f"{prefix}.b{i}", np.zeros(dims[i + 1]))
        layers.append((w, b))
    return MlpParams(layers)


def make_layer_norm(store: ParamStore, prefix: str, dim: int) -> LayerNormParams:
    return LayerNormParams(
        store.add(f"{prefix}.gain", np.ones(dim)),
        store.add(f"{prefix}.bias", np.zeros(dim)),
    )


# -- checkpoint I/O ---------------------------------------------------------

def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def save_arrays(path, arrays: dict[str, np.ndarray], cfg_hash: str = "",
                meta: dict | None = None) -> None:
    """Write named float arrays as manifest + contiguous float32 blob."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    manifest = json.dumps({
        "format_version": FORMAT_VERSION,
        "config_hash": cfg_hash,
        "meta": meta or {},
        "arrays": entries,
    }, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(len(manifest).to_bytes(8, "little"))
        f.write(manifest)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint container; returns (manifest, name -> float32 array)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    mlen = int.from_bytes(raw[8:16], "little")
    try:
        manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: bad manifest ({e})") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unknown format version {manifest.get('format_version')}")
    blob = raw[16 + mlen:]
    arrays = {}
    for e in manifest["arrays"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = e["offset"]
        arrays[e["name"]] = np.frombuffer(
            blob, dtype="<f4", count=n, offset=start).reshape(shape).copy()
    return manifest, arrays
