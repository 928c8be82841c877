"""Trace containers, synthetic trace generation and the on-disk trace format.

A trace directory holds ``manifest.json`` plus one raw little-endian float32
file per tensor (row-major, last index fastest)::

    manifest.json
    decode_attn.f32   [L, H, K_max, T]
    vnorm.f32         [L, H, T]
    prefill_attn.f32  [L, H, W, T]   (optional)
    keys.f32          [L, H, T, d_h] (optional)

Tensors are kept as float32 in memory so that save/load round-trips are
bit-exact; every consumer upcasts to float64 before computing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import (
    InvalidShapeError,
    MissingTensorFileError,
    SizeMismatchError,
    TraceLoadError,
    TraceValueError,
)

SCHEMA_VERSION = 1
DTYPE_TAG = "f32le"
_DTYPE = np.dtype("<f4")
MANIFEST_NAME = "manifest.json"
REQUIRED_TENSORS = ("decode_attn", "vnorm")
OPTIONAL_TENSORS = ("prefill_attn", "keys", "oracle_importance")
ROW_SUM_TOL = 1e-6
# Upper bound on elements of any single tensor (int64 indexing, ~8 GiB of f32).
_MAX_ELEMENTS = 2**31

Scenario = Literal["aligned", "misaligned", "mixed"]
SCENARIOS = ("aligned", "misaligned", "mixed")


@dataclass(frozen=True)
class ModelShape:
    L: int
    H: int
    T: int
    K_max: int
    d_h: int = 0

    def __post_init__(self):
        for name in ("L", "H", "T", "K_max"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise InvalidShapeError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.d_h, (int, np.integer)) or self.d_h < 0:
            raise InvalidShapeError(f"d_h must be a nonnegative integer, got {self.d_h!r}")
        if self.L * self.H * self.K_max * self.T > _MAX_ELEMENTS:
            raise InvalidShapeError("L*H*K_max*T exceeds the addressable tensor size")

    @property
    def num_heads(self) -> int:
        return self.L * self.H

    def heads(self):
        for l in range(self.L):
            for h in range(self.H):
                yield HeadIndex(l, h)

    def as_dict(self) -> dict:
        return {"L": self.L, "H": self.H, "T": self.T, "K_max": self.K_max, "d_h": self.d_h}


@dataclass(frozen=True, order=True)
class HeadIndex:
    layer: int
    head: int

    def check(self, shape: ModelShape) -> "HeadIndex":
        if not (0 <= self.layer < shape.L and 0 <= self.head < shape.H):
            raise IndexError(f"head {self} out of range for L={shape.L}, H={shape.H}")
        return self


@dataclass(frozen=True, eq=False)
class TraceBundle:
    """Attention traces for one prefill plus ``K_max`` decode steps.

    ``decode_attn[l, h, k, j]`` is the softmax weight decode step ``k`` puts on
    prefill position ``j``; rows may sum to less than one because the rest of
    the mass lands on already-decoded tokens. ``vnorm[l, h, j]`` is the norm of
    the value vector after the head's output projection.
    """

    shape: ModelShape
    decode_attn: np.ndarray
    vnorm: np.ndarray
    prefill_attn: np.ndarray | None = None
    keys: np.ndarray | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = self.shape
        for name, arr in self.tensors().items():
            arr = np.ascontiguousarray(arr, dtype=_DTYPE)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        _expect_dims("decode_attn", self.decode_attn, (s.L, s.H, s.K_max, s.T))
        _expect_dims("vnorm", self.vnorm, (s.L, s.H, s.T))
        if self.prefill_attn is not None:
            if self.prefill_attn.ndim != 4 or self.prefill_attn.shape[:2] != (s.L, s.H) \
                    or self.prefill_attn.shape[3] != s.T or self.prefill_attn.shape[2] < 1:
                raise SizeMismatchError(
                    f"prefill_attn has dims {self.prefill_attn.shape}, expected ({s.L}, {s.H}, W, {s.T})",
                    tensor="prefill_attn")
        if self.keys is not None:
            if s.d_h < 1:
                raise InvalidShapeError("keys present but d_h == 0")
            _expect_dims("keys", self.keys, (s.L, s.H, s.T, s.d_h))
        validate_bundle(self)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"decode_attn": self.decode_attn, "vnorm": self.vnorm}
        if self.prefill_attn is not None:
            out["prefill_attn"] = self.prefill_attn
        if self.keys is not None:
            out["keys"] = self.keys
        return out

    @property
    def window_rows(self) -> int:
        return 0 if self.prefill_attn is None else self.prefill_attn.shape[2]

    def equals(self, other: "TraceBundle") -> bool:
        """Exact element-wise equality of shape and every tensor."""
        if self.shape != other.shape:
            return False
        a, b = self.tensors(), other.tensors()
        if a.keys() != b.keys():
            return False
        return all(np.array_equal(a[k], b[k]) for k in a)


def _expect_dims(name, arr, dims):
    if arr.shape != tuple(dims):
        raise SizeMismatchError(f"{name} has dims {arr.shape}, expected {tuple(dims)}", tensor=name)


def _first_bad(mask: np.ndarray):
    return tuple(int(i) for i in np.argwhere(mask)[0])


def validate_bundle(bundle: TraceBundle) -> None:
    """Raise :class:`TraceValueError` naming the first offending entry."""
    for name, arr in bundle.tensors().items():
        bad = ~np.isfinite(arr)
        if bad.any():
            idx = _first_bad(bad)
            raise TraceValueError(f"{name}{list(idx)} is not finite", tensor=name, index=idx)
        if name == "keys":
            continue
        neg = arr < 0
        if neg.any():
            idx = _first_bad(neg)
            raise TraceValueError(f"{name}{list(idx)} is negative ({arr[idx]})", tensor=name, index=idx)
    sums = bundle.decode_attn.astype(np.float64).sum(axis=-1)
    over = sums > 1.0 + ROW_SUM_TOL
    if over.any():
        idx = _first_bad(over)
        raise TraceValueError(
            f"decode_attn row {list(idx)} sums to {sums[idx]:.9g} > 1", tensor="decode_attn", index=idx)


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

_SCENARIO_CODE = {"aligned": 0, "misaligned": 1, "mixed": 2}


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _clustered_logits(rng, T: int) -> np.ndarray:
    """Unit-variance logits with local clusters: smoothed relevance plus token noise."""
    width = 5
    raw = rng.standard_normal(T + width - 1)
    smooth = np.convolve(raw, np.ones(width) / np.sqrt(width), mode="valid")
    return (0.8 * smooth + 0.6 * rng.standard_normal(T))


def _head_traits(shape: ModelShape, scenario: str, model_seed: int):
    """Per-head structural traits, shared by every query of the same model."""
    rng = np.random.default_rng([model_seed, _SCENARIO_CODE[scenario], shape.L, shape.H])
    n = shape.num_heads
    sharpness = np.exp(rng.normal(0.6, 0.45, size=n))  # logit scale per head
    mass = np.exp(rng.normal(0.0, 0.6, size=n))  # output-projection gain per head
    if scenario == "aligned":
        misaligned = np.zeros(n, dtype=bool)
    elif scenario == "misaligned":
        k = max(1, math.ceil(0.5 * n))
        misaligned = np.zeros(n, dtype=bool)
        misaligned[rng.permutation(n)[:k]] = True
    else:
        misaligned = (np.arange(n) % 2) == 1
    return sharpness.reshape(shape.L, shape.H), mass.reshape(shape.L, shape.H), \
        misaligned.reshape(shape.L, shape.H)


def generate_synthetic_trace(shape: ModelShape, seed: int, scenario: Scenario = "mixed",
                             *, window: int | None = None, model_seed: int = 0) -> TraceBundle:
    """Deterministic synthetic trace for ``(shape, seed, scenario)``.

    Head traits (sharpness, output gain, which heads are misaligned) depend only
    on ``model_seed`` and the scenario, so bundles with different ``seed`` look
    like different queries against the same model. In misaligned heads a set of
    tokens the observation window barely attends to receives a strong attention
    spike at one future decode step, with boosted value norm.

    ``window`` is the number of observation rows stored in ``prefill_attn``
    (default ``min(32, T)``).
    """
    if scenario not in SCENARIOS:
        raise InvalidShapeError(f"unknown scenario {scenario!r}")
    if not isinstance(shape, ModelShape):
        raise InvalidShapeError("shape must be a ModelShape")
    L, H, T, K = shape.L, shape.H, shape.T, shape.K_max
    W = min(32, T) if window is None else int(window)
    if not 1 <= W <= T:
        raise InvalidShapeError(f"window rows must be in 1..T, got {W}")
    d = shape.d_h if shape.d_h > 0 else 0

    sharp, gain, mis = _head_traits(shape, scenario, model_seed)
    rng = np.random.default_rng([int(seed) & (2**64 - 1), _SCENARIO_CODE[scenario], 0x5EED])

    decode = np.zeros((L, H, K, T))
    prefill = np.zeros((L, H, W, T))
    vnorm = np.zeros((L, H, T))
    keys = np.zeros((L, H, T, d)) if d else None
    n_plant = max(1, min(T // 2, max(8, T // 8)))
    causal = np.arange(T)[None, :] <= (T - W + np.arange(W))[:, None]

    for l in range(L):
        for h in range(H):
            s = sharp[l, h]
            base = s * _clustered_logits(rng, T)
            base[0] += 2.0 * s  # attention sink
            wl = base + 0.35 * s * rng.standard_normal((W, T))
            wl = np.where(causal, wl, -np.inf)
            prefill[l, h] = _softmax(wl)

            dec_base = base.copy()
            vn = gain[l, h] * np.exp(0.25 * rng.standard_normal(T))
            spikes = []
            if mis[l, h]:
                quiet = np.argsort(base, kind="stable")[: max(n_plant, T // 2)]
                planted = rng.choice(quiet, size=n_plant, replace=False)
                # window-favoured tokens fade during decoding
                loud = np.argsort(-base, kind="stable")[:n_plant]
                dec_base[loud] -= 1.5 * s
                vn[planted] *= 3.0
                spikes = [(j, int(rng.integers(K))) for j in planted]
            logits = dec_base[None, :] + 0.2 * s * rng.standard_normal((K, T))
            top = dec_base.max() + 1.0 * s
            for j, k in spikes:
                logits[k, j] = top + 0.5 * s * abs(rng.standard_normal())
            for k in range(K):
                extra = s * rng.standard_normal(k + 1)  # already-decoded tokens
                row = _softmax(np.concatenate([logits[k], extra]))
                decode[l, h, k] = row[:T]
            vnorm[l, h] = vn

            if d:
                direction = rng.standard_normal(d)
                direction /= np.linalg.norm(direction)
                spread = 0.4 + np.maximum(base / s, 0.0)
                keys[l, h] = 2.0 * direction[None, :] + spread[:, None] * rng.standard_normal((T, d))

    return TraceBundle(
        shape=shape,
        decode_attn=decode.astype(_DTYPE),
        vnorm=vnorm.astype(_DTYPE),
        prefill_attn=prefill.astype(_DTYPE),
        keys=None if keys is None else keys.astype(_DTYPE),
        seed=int(seed),
        meta={"scenario": scenario, "model_seed": int(model_seed), "generator": "lukv.synthetic/1"},
    )


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def _tensor_file(name: str) -> str:
    return f"{name}.f32"


def write_tensor(dir_path: Path, name: str, arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype=_DTYPE)
    fname = _tensor_file(name)
    (Path(dir_path) / fname).write_bytes(arr.tobytes(order="C"))
    return {"file": fname, "dims": [int(x) for x in arr.shape], "dtype": DTYPE_TAG}


def save_trace(bundle: TraceBundle, dir_path, extra_tensors: dict[str, np.ndarray] | None = None) -> Path:
    """Write ``bundle`` to ``dir_path`` and return the manifest path."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, arr in bundle.tensors().items():
        tensors[name] = write_tensor(d, name, arr)
    for name, arr in (extra_tensors or {}).items():
        tensors[name] = write_tensor(d, name, arr)
    manifest = {"schema_version": SCHEMA_VERSION, "shape": bundle.shape.as_dict(), "tensors": tensors}
    if bundle.seed is not None:
        manifest["seed"] = bundle.seed
    manifest["meta"] = dict(bundle.meta)
    path = d / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(dir_path) -> dict:
    path = Path(dir_path) / MANIFEST_NAME
    if not path.is_file():
        raise MissingTensorFileError(f"no {MANIFEST_NAME} in {dir_path}", tensor="manifest")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise TraceLoadError(f"unreadable manifest {path}: {exc}", tensor="manifest") from exc
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise TraceLoadError(f"unsupported schema_version {manifest.get('schema_version')!r}",
                             tensor="manifest")
    return manifest


def read_tensor(dir_path, name: str, entry: dict) -> np.ndarray:
    if entry.get("dtype") != DTYPE_TAG:
        raise TraceLoadError(f"{name}: unsupported dtype {entry.get('dtype')!r}", tensor=name)
    path = Path(dir_path) / entry["file"]
    if not path.is_file():
        raise MissingTensorFileError(f"{name}: file {path} is missing", tensor=name)
    dims = tuple(int(x) for x in entry["dims"])
    expected = math.prod(dims) * _DTYPE.itemsize
    size = path.stat().st_size
    if size != expected:
        raise SizeMismatchError(
            f"{name}: {path.name} holds {size} bytes, dims {list(dims)} need {expected}", tensor=name)
    return np.frombuffer(path.read_bytes(), dtype=_DTYPE).reshape(dims)


def load_trace(dir_path) -> TraceBundle:
    manifest = read_manifest(dir_path)
    try:
        shape = ModelShape(**manifest["shape"])
    except TypeError as exc:
        raise TraceLoadError(f"bad shape block: {exc}", tensor="manifest") from exc
    entries = manifest.get("tensors", {})
    for name in REQUIRED_TENSORS:
        if name not in entries:
            raise MissingTensorFileError(f"manifest does not declare required tensor {name}", tensor=name)
    arrays = {name: read_tensor(dir_path, name, entries[name])
              for name in REQUIRED_TENSORS + ("prefill_attn", "keys") if name in entries}
    return TraceBundle(shape=shape, seed=manifest.get("seed"), meta=manifest.get("meta", {}), **arrays)


def load_extra_tensor(dir_path, name: str) -> np.ndarray | None:
    entries = read_manifest(dir_path).get("tensors", {})
    if name not in entries:
        return None
    return read_tensor(dir_path, name, entries[name])
