"""Data ingestion and batching.

Three pieces live here:

* a seeded synthetic tri-modal generator: every class gets one random
  prototype per modality, samples are prototype + Gaussian noise, and the
  whole dataset is a pure function of its seeds;
* binary file formats: an IDX parser (big-endian header, u8 payload, the
  MNIST container layout) and the "TNSR" tensor file (little-endian, for
  precomputed feature matrices), plus a JSON manifest tying modality files
  together;
* deterministic batch construction with one seeded shuffle per call.

TNSR layout:

    magic   4 bytes  b"TNSR"
    version u32 LE   1
    dtype   u8       0 = f32, 1 = f64, 2 = u8
    ndim    u8
    dims    ndim x u32 LE
    payload little-endian, C order

IDX layout (big-endian): bytes 0-1 zero, byte 2 dtype (only 0x08 = unsigned
byte is supported), byte 3 ndim, then ndim u32 dims, then the payload in
row-major order. Image files carry magic 0x00000803, label files 0x00000801.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1
_TNSR_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_TNSR_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}

IDX_DTYPE_U8 = 0x08


@dataclass
class TriModalBatch:
    """Aligned (text, video, audio) rows with class labels and pair ids."""

    text_inputs: np.ndarray
    video_inputs: np.ndarray
    audio_inputs: np.ndarray
    labels: np.ndarray
    pair_ids: np.ndarray

    def __post_init__(self):
        sizes = {self.text_inputs.shape[0], self.video_inputs.shape[0],
                 self.audio_inputs.shape[0], self.labels.shape[0], self.pair_ids.shape[0]}
        if len(sizes) != 1:
            raise ValueError(f"modalities disagree on batch size: {sorted(sizes)}")
        if len(np.unique(self.pair_ids)) != self.pair_ids.shape[0]:
            raise ValueError("pair_ids must be unique within a batch")

    @property
    def size(self) -> int:
        return self.text_inputs.shape[0]


@dataclass
class TriModalDataset:
    """Immutable matched-triple dataset plus per-class text inputs."""

    text_inputs: np.ndarray   # (N, d_t)
    video_inputs: np.ndarray  # (N, d_v)
    audio_inputs: np.ndarray  # (N, d_a)
    labels: np.ndarray        # (N,) ints in [0, C)
    pair_ids: np.ndarray      # (N,) unique ints
    class_text_inputs: np.ndarray  # (C, d_t) noise-free text input per class
    class_names: list

    def __post_init__(self):
        n = self.text_inputs.shape[0]
        for name in ("video_inputs", "audio_inputs", "labels", "pair_ids"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} length does not match text_inputs ({n})")
        c = self.class_text_inputs.shape[0]
        if np.any(self.labels < 0) or np.any(self.labels >= c):
            raise ValueError(f"labels must lie in [0, {c})")
        if len(self.class_names) != c:
            raise ValueError("class_names length must match class_text_inputs")

    @property
    def size(self) -> int:
        return self.text_inputs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_text_inputs.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.text_inputs.shape[1], self.video_inputs.shape[1],
                self.audio_inputs.shape[1])


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic tri-modal task.

    Prototypes are standard-normal draws seeded per class from
    (prototype_seed, class_id); sample noise comes from rng_seed. Keeping
    prototype_seed fixed while varying rng_seed yields fresh splits of the
    same underlying task.
    """

    classes: int = 10
    dims: tuple = (16, 32, 24)
    noise_sigma: tuple = (0.1, 0.1, 0.1)
    samples_per_class: int = 100
    prototype_seed: int = 7
    rng_seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.noise_sigma = tuple(float(s) for s in self.noise_sigma)
        if self.classes < 2:
            raise ValueError(f"need >= 2 classes, got {self.classes}")
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        if len(self.noise_sigma) != 3 or any(s < 0 for s in self.noise_sigma):
            raise ValueError(f"noise_sigma must be three values >= 0, got {self.noise_sigma}")
        if self.samples_per_class < 1:
            raise ValueError(f"samples_per_class must be >= 1, got {self.samples_per_class}")


def class_prototypes(spec: SyntheticSpec):
    """One standard-normal prototype per class per modality.

    Per-class RNGs are seeded from (prototype_seed, class_id); within a
    class, the text, video, audio prototypes are drawn in that order.
    """
    d_t, d_v, d_a = spec.dims
    proto_t = np.empty((spec.classes, d_t))
    proto_v = np.empty((spec.classes, d_v))
    proto_a = np.empty((spec.classes, d_a))
    for c in range(spec.classes):
        rng = np.random.default_rng(np.random.SeedSequence([spec.prototype_seed, c]))
        proto_t[c] = rng.standard_normal(d_t)
        proto_v[c] = rng.standard_normal(d_v)
        proto_a[c] = rng.standard_normal(d_a)
    return proto_t, proto_v, proto_a


def generate_synthetic(spec: SyntheticSpec) -> TriModalDataset:
    """Matched triples from the spec; a pure function of its seeds.

    Rows are grouped by class (labels 0,0,...,1,1,...) and pair_ids run
    0..N-1. Noise blocks are drawn class by class, text/video/audio within
    each class, so the layout is reproducible by construction.
    """
    proto_t, proto_v, proto_a = class_prototypes(spec)
    sigma_t, sigma_v, sigma_a = spec.noise_sigma
    k = spec.samples_per_class
    rng = np.random.default_rng(np.random.SeedSequence([spec.rng_seed]))
    text_rows, video_rows, audio_rows = [], [], []
    for c in range(spec.classes):
        text_rows.append(proto_t[c] + sigma_t * rng.standard_normal((k, spec.dims[0])))
        video_rows.append(proto_v[c] + sigma_v * rng.standard_normal((k, spec.dims[1])))
        audio_rows.append(proto_a[c] + sigma_a * rng.standard_normal((k, spec.dims[2])))
    n = spec.classes * k
    return TriModalDataset(
        text_inputs=np.concatenate(text_rows),
        video_inputs=np.concatenate(video_rows),
        audio_inputs=np.concatenate(audio_rows),
        labels=np.repeat(np.arange(spec.classes), k),
        pair_ids=np.arange(n),
        class_text_inputs=proto_t,
        class_names=[f"class_{c}" for c in range(spec.classes)],
    )


def make_batches(dataset: TriModalDataset, batch_size: int, rng_seed: int,
                 drop_last: bool = True) -> list[TriModalBatch]:
    """One seeded shuffle, then consecutive slices of batch_size rows.

    With drop_last, a trailing partial batch is discarded; a batch_size
    larger than the dataset then yields no batches at all and a warning.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = dataset.size
    perm = np.random.default_rng(rng_seed).permutation(n)
    batches = []
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if drop_last and idx.shape[0] < batch_size:
            break
        batches.append(TriModalBatch(
            text_inputs=dataset.text_inputs[idx],
            video_inputs=dataset.video_inputs[idx],
            audio_inputs=dataset.audio_inputs[idx],
            labels=dataset.labels[idx],
            pair_ids=dataset.pair_ids[idx],
        ))
    if not batches:
        warnings.warn(f"batch_size {batch_size} exceeds dataset size {n}; no batches produced")
    return batches


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------


def parse_idx(path) -> np.ndarray:
    """Parse an IDX file of unsigned bytes into an ndarray of its dims."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError(f"IDX file too short for a header: {len(data)} bytes")
    magic = data[:4]
    if magic[0] != 0 or magic[1] != 0 or magic[2] != IDX_DTYPE_U8:
        raise FormatError(f"bad IDX magic 0x{magic.hex()} (expected dtype byte 0x08)")
    ndim = magic[3]
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise FormatError(f"truncated IDX header: need {header_len} bytes, have {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:header_len])
    expected = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    payload = data[header_len:]
    if len(payload) != expected:
        raise FormatError(
            f"IDX payload length mismatch: expected {expected} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(array, path) -> None:
    """Write a u8 array in IDX layout (fixture/testing counterpart of parse_idx)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, IDX_DTYPE_U8, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


# ---------------------------------------------------------------------------
# TNSR tensor files
# ---------------------------------------------------------------------------


def write_tensor_file(array, path) -> None:
    """Write an f32/f64/u8 array in the TNSR layout; round-trips bitwise."""
    arr = np.ascontiguousarray(array)
    key = arr.dtype.newbyteorder("=")
    if key not in _TNSR_CODES:
        raise ValueError(f"unsupported dtype {arr.dtype}; TNSR holds f32, f64, or u8")
    code = _TNSR_CODES[key]
    header = TNSR_MAGIC + struct.pack("<IBB", TNSR_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(_TNSR_DTYPES[code], copy=False).tobytes())


def read_tensor_file(path) -> np.ndarray:
    """Read a TNSR file back into an ndarray of its stored dtype."""
    data = Path(path).read_bytes()
    if len(data) < 10:
        raise FormatError(f"TNSR file too short for a header: {len(data)} bytes")
    if data[:4] != TNSR_MAGIC:
        raise FormatError(f"bad TNSR magic {data[:4]!r}, expected {TNSR_MAGIC!r}")
    version, code, ndim = struct.unpack_from("<IBB", data, 4)
    if version != TNSR_VERSION:
        raise FormatError(f"unsupported TNSR version {version}")
    if code not in _TNSR_DTYPES:
        raise FormatError(f"unknown TNSR dtype code {code}")
    header_len = 10 + 4 * ndim
    if len(data) < header_len:
        raise FormatError(f"truncated TNSR header: need {header_len} bytes, have {len(data)}")
    dims = struct.unpack_from(f"<{ndim}I", data, 10)
    dtype = _TNSR_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
    payload = data[header_len:]
    if len(payload) != expected:
        raise FormatError(
            f"TNSR payload length mismatch: expected {expected} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------

_MANIFEST_KEYS = {"text", "video", "audio", "labels", "class_text_inputs", "class_names"}


def _load_feature_file(path: Path) -> np.ndarray:
    """Load a TNSR or IDX file by sniffing its magic bytes."""
    head = path.read_bytes()[:4]
    if head[:4] == TNSR_MAGIC:
        return read_tensor_file(path)
    if len(head) == 4 and head[0] == 0 and head[1] == 0:
        return parse_idx(path)
    raise FormatError(f"{path}: neither TNSR nor IDX (magic 0x{head.hex()})")


def _as_features(arr: np.ndarray) -> np.ndarray:
    """Flatten trailing dims to (N, d) float64; u8 is scaled to [0, 1]."""
    out = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(arr.shape[0], 1)
    out = out.astype(np.float64)
    if arr.dtype == np.uint8:
        out /= 255.0
    return out


def load_manifest(path) -> TriModalDataset:
    """Build a dataset from a JSON manifest of modality files.

    The manifest maps "text"/"video"/"audio"/"labels" to TNSR or IDX files
    (paths relative to the manifest). Optional keys: "class_text_inputs"
    (TNSR, one noise-free text input per class) and "class_names". Without
    class_text_inputs the text inputs must be C-dimensional and the one-hot
    identity is used.
    """
    path = Path(path)
    if not path.exists():
        raise FormatError(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    if not isinstance(doc, dict):
        raise FormatError("manifest must be a JSON object")
    unknown = set(doc) - _MANIFEST_KEYS
    if unknown:
        raise FormatError(f"unknown manifest key(s): {sorted(unknown)}")
    missing = {"text", "video", "audio", "labels"} - set(doc)
    if missing:
        raise FormatError(f"manifest missing required key(s): {sorted(missing)}")
    base = path.parent

    def resolve(key):
        p = base / doc[key]
        if not p.exists():
            raise FormatError(f"manifest file for {key!r} not found: {p}")
        return p

    text = _as_features(_load_feature_file(resolve("text")))
    video = _as_features(_load_feature_file(resolve("video")))
    audio = _as_features(_load_feature_file(resolve("audio")))
    labels = _load_feature_file(resolve("labels")).astype(np.int64).reshape(-1)
    n_classes = int(labels.max()) + 1 if labels.size else 0
    if "class_text_inputs" in doc:
        class_text = _as_features(read_tensor_file(resolve("class_text_inputs")))
    else:
        if text.shape[1] != n_classes:
            raise FormatError(
                "manifest without class_text_inputs needs one-hot text inputs "
                f"of width {n_classes}, got {text.shape[1]}")
        class_text = np.eye(n_classes)
    names = doc.get("class_names", [f"class_{c}" for c in range(class_text.shape[0])])
    return TriModalDataset(
        text_inputs=text, video_inputs=video, audio_inputs=audio,
        labels=labels, pair_ids=np.arange(labels.shape[0]),
        class_text_inputs=class_text, class_names=list(names),
    )
