"""Dense encoder stack with explicit forward/backward passes.

Plain numpy in float64 throughout. Each ``Mlp`` is a sequence of dense
layers with the hidden activation applied between them; encoders end with a
unit-sphere normalization so every embedding has norm 1, the matching head
skips it and outputs a raw logit. Forward returns a ``Tape`` holding what
backward needs; backward returns the input gradient plus per-layer
parameter gradients in layer order.

Parameter layout (used by the flat views and the checkpoint format): per
layer, weights row-major then bias; layers in sequence order; modules in
the order they were registered (text, video, audio[, matcher]).

Checkpoint format (little-endian):

    magic   4 bytes  b"TRI1"
    version u32      1
    3 encoder headers, in text/video/audio order:
        activation u8   (0 = tanh, 1 = relu)
        n_dense    u32
        in_dim     u32  (input dimension; meaningful even with 0 layers)
        per dense layer: in u32, out u32
    parameters: all three encoders' flat views, f64

The matching head is a training-time auxiliary and is not checkpointed;
evaluation only needs the encoders.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

CHECKPOINT_MAGIC = b"TRI1"
CHECKPOINT_VERSION = 1
_ACT_CODES = {"tanh": 0, "relu": 1}
_ACT_NAMES = {code: name for name, code in _ACT_CODES.items()}


def _act_forward(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    raise ValueError(f"unknown activation {name!r}")


def _act_backward(name: str, out: np.ndarray, grad: np.ndarray) -> np.ndarray:
    # Derivative expressed through the cached activation output.
    if name == "tanh":
        return grad * (1.0 - out * out)
    if name == "relu":
        return grad * (out > 0.0)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray     # (out_dim,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] < 1 or self.weights.shape[1] < 1:
            raise ValueError(f"weights must be (out, in) with out, in >= 1, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match out dim {self.weights.shape[0]}")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class Tape:
    """Activation record produced by Mlp.forward, consumed by backward."""

    version: int
    xs: list = field(default_factory=list)      # input to each dense layer
    acts: list = field(default_factory=list)    # activation outputs (hidden layers)
    prenorm_norms: np.ndarray | None = None     # (B, 1) norms before unit-sphere step
    output: np.ndarray | None = None


class Mlp:
    """Dense layers + hidden activation, optionally ending in unit-sphere norm."""

    def __init__(self, layers, activation: str = "tanh",
                 normalize_output: bool = True, in_dim: int | None = None):
        if activation not in _ACT_CODES:
            raise ValueError(f"unknown activation {activation!r}")
        self.layers = list(layers)
        self.activation = activation
        self.normalize_output = normalize_output
        self._version = 0
        if self.layers:
            for prev, nxt in zip(self.layers, self.layers[1:]):
                if prev.out_dim != nxt.in_dim:
                    raise ValueError(
                        f"layer shapes do not chain: {prev.out_dim} -> {nxt.in_dim}")
            self._in_dim = self.layers[0].in_dim
        else:
            if in_dim is None:
                raise ValueError("in_dim is required for a zero-layer model")
            self._in_dim = int(in_dim)

    @classmethod
    def build(cls, dims, activation: str = "tanh", normalize_output: bool = True,
              rng: np.random.Generator | None = None) -> "Mlp":
        """Glorot-uniform weights, zero biases; dims = [in, hidden..., out].

        A single entry builds a zero-layer model (identity, plus the
        normalization step when enabled).
        """
        dims = [int(d) for d in dims]
        if len(dims) < 1 or any(d < 1 for d in dims):
            raise ValueError(f"dims must be non-empty positive ints, got {dims}")
        rng = rng if rng is not None else np.random.default_rng(0)
        layers = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (d_in + d_out))
            layers.append(DenseLayer(
                weights=rng.uniform(-limit, limit, size=(d_out, d_in)),
                bias=np.zeros(d_out),
            ))
        return cls(layers, activation=activation, normalize_output=normalize_output,
                   in_dim=dims[0])

    @property
    def in_dim(self) -> int:
        return self._in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim if self.layers else self._in_dim

    def forward(self, x) -> tuple[np.ndarray, Tape]:
        """Batched forward pass; x is (B, in_dim). Returns (output, tape)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"input must be (B, {self.in_dim}), got shape {x.shape}")
        tape = Tape(version=self._version)
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            tape.xs.append(h)
            h = h @ layer.weights.T + layer.bias
            if i < last:
                h = _act_forward(self.activation, h)
                tape.acts.append(h)
        if self.normalize_output:
            norms = np.linalg.norm(h, axis=1, keepdims=True)
            if np.any(norms == 0.0):
                raise ValueError("cannot project a zero vector onto the unit sphere")
            h = h / norms
            tape.prenorm_norms = norms
        tape.output = h
        return h, tape

    def backward(self, tape: Tape, upstream) -> tuple[np.ndarray, list]:
        """Backward pass through a tape from this model's forward.

        Returns (d_input, grads) with grads a list of (dW, db) per layer.
        The unit-sphere step applies J = (I - y y^T) / ||pre-norm|| to the
        upstream gradient, so components along the output are dropped.
        """
        if tape.version != self._version:
            raise ValueError("stale tape: parameters changed since the matching forward call")
        g = np.asarray(upstream, dtype=np.float64)
        if tape.output is None or g.shape != tape.output.shape:
            raise ValueError(f"upstream gradient shape {g.shape} does not match output")
        if self.normalize_output:
            y = tape.output
            g = (g - (g * y).sum(axis=1, keepdims=True) * y) / tape.prenorm_norms
        grads: list = [None] * len(self.layers)
        for i in reversed(range(len(self.layers))):
            if i < len(self.layers) - 1:
                g = _act_backward(self.activation, tape.acts[i], g)
            layer = self.layers[i]
            grads[i] = (g.T @ tape.xs[i], g.sum(axis=0))
            g = g @ layer.weights
        return g, grads

    @property
    def num_params(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.layers)

    def get_flat(self) -> np.ndarray:
        if not self.layers:
            return np.zeros(0)
        return np.concatenate([np.concatenate([l.weights.ravel(), l.bias])
                               for l in self.layers])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} parameters, got shape {flat.shape}")
        offset = 0
        for layer in self.layers:
            w_size = layer.weights.size
            layer.weights = flat[offset:offset + w_size].reshape(layer.weights.shape).copy()
            offset += w_size
            b_size = layer.bias.size
            layer.bias = flat[offset:offset + b_size].copy()
            offset += b_size
        self._version += 1

    def clone(self) -> "Mlp":
        clone = Mlp(
            [DenseLayer(l.weights.copy(), l.bias.copy()) for l in self.layers],
            activation=self.activation,
            normalize_output=self.normalize_output,
            in_dim=self._in_dim,
        )
        return clone


@dataclass
class ModelConfig:
    """Encoder/matcher architecture knobs."""

    latent_dim: int = 3
    text_hidden: tuple = ()
    video_hidden: tuple = (64, 64)
    audio_hidden: tuple = (64, 64)
    matcher_hidden: tuple = (64,)
    activation: str = "tanh"
    init_seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 2:
            raise ValueError(f"latent_dim must be >= 2, got {self.latent_dim}")
        if self.activation not in _ACT_CODES:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.text_hidden = tuple(int(h) for h in self.text_hidden)
        self.video_hidden = tuple(int(h) for h in self.video_hidden)
        self.audio_hidden = tuple(int(h) for h in self.audio_hidden)
        self.matcher_hidden = tuple(int(h) for h in self.matcher_hidden)


class EncoderStack:
    """One encoder per modality, all projecting onto the same unit sphere."""

    def __init__(self, text: Mlp, video: Mlp, audio: Mlp):
        dims = {text.out_dim, video.out_dim, audio.out_dim}
        if len(dims) != 1:
            raise ValueError(f"encoders must share the latent dimension, got {sorted(dims)}")
        for name, enc in (("text", text), ("video", video), ("audio", audio)):
            if not enc.normalize_output:
                raise ValueError(f"{name} encoder must end in unit-sphere normalization")
        self.text = text
        self.video = video
        self.audio = audio

    @property
    def latent_dim(self) -> int:
        return self.text.out_dim

    def encoders(self) -> list[Mlp]:
        return [self.text, self.video, self.audio]

    def embed(self, text_in, video_in, audio_in):
        """Vectorized forward over a matched batch of raw inputs.

        Returns (text_emb, video_emb, audio_emb, tapes).
        """
        t, tape_t = self.text.forward(text_in)
        v, tape_v = self.video.forward(video_in)
        a, tape_a = self.audio.forward(audio_in)
        if not (t.shape[0] == v.shape[0] == a.shape[0]):
            raise ValueError("modalities disagree on batch size")
        return t, v, a, (tape_t, tape_v, tape_a)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([e.get_flat() for e in self.encoders()])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        offset = 0
        for enc in self.encoders():
            n = enc.num_params
            enc.set_flat(flat[offset:offset + n])
            offset += n
        if offset != flat.size:
            raise ValueError(f"expected {offset} parameters, got {flat.size}")

    def clone(self) -> "EncoderStack":
        return EncoderStack(self.text.clone(), self.video.clone(), self.audio.clone())


def embed_batch(stack: EncoderStack, text_in, video_in, audio_in):
    """Module-level alias for EncoderStack.embed."""
    return stack.embed(text_in, video_in, audio_in)


def _child_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream)]))


def build_stack(cfg: ModelConfig, d_text: int, d_video: int, d_audio: int) -> EncoderStack:
    """Seeded encoder construction; streams 0..2 of init_seed, matcher gets 3."""
    text = Mlp.build([d_text, *cfg.text_hidden, cfg.latent_dim],
                     activation=cfg.activation, rng=_child_rng(cfg.init_seed, 0))
    video = Mlp.build([d_video, *cfg.video_hidden, cfg.latent_dim],
                      activation=cfg.activation, rng=_child_rng(cfg.init_seed, 1))
    audio = Mlp.build([d_audio, *cfg.audio_hidden, cfg.latent_dim],
                      activation=cfg.activation, rng=_child_rng(cfg.init_seed, 2))
    return EncoderStack(text, video, audio)


def build_matcher(cfg: ModelConfig) -> Mlp:
    """Matching head: concatenated (t, v, a) embeddings -> one logit."""
    return Mlp.build([3 * cfg.latent_dim, *cfg.matcher_hidden, 1],
                     activation=cfg.activation, normalize_output=False,
                     rng=_child_rng(cfg.init_seed, 3))


class ParamView:
    """Flat parameter/gradient view over an ordered list of Mlp modules."""

    def __init__(self, modules):
        self.modules = list(modules)
        self.sizes = [m.num_params for m in self.modules]
        self.total = sum(self.sizes)

    def get_flat(self) -> np.ndarray:
        if not self.modules:
            return np.zeros(0)
        return np.concatenate([m.get_flat() for m in self.modules])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.total,):
            raise ValueError(f"expected {self.total} parameters, got shape {flat.shape}")
        offset = 0
        for module, size in zip(self.modules, self.sizes):
            module.set_flat(flat[offset:offset + size])
            offset += size

    def flatten_grads(self, grads_per_module) -> np.ndarray:
        """Flatten per-module (dW, db) lists into the parameter layout."""
        if len(grads_per_module) != len(self.modules):
            raise ValueError(f"expected grads for {len(self.modules)} modules, "
                             f"got {len(grads_per_module)}")
        parts = []
        for module, grads in zip(self.modules, grads_per_module):
            if len(grads) != len(module.layers):
                raise ValueError("gradient list does not match module layers")
            for (dw, db) in grads:
                parts.append(np.asarray(dw, dtype=np.float64).ravel())
                parts.append(np.asarray(db, dtype=np.float64).ravel())
        return np.concatenate(parts) if parts else np.zeros(0)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(stack: EncoderStack, path) -> None:
    """Write the encoder stack in the TRI1 binary layout."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    for enc in stack.encoders():
        blob += struct.pack("<BII", _ACT_CODES[enc.activation], len(enc.layers), enc.in_dim)
        for layer in enc.layers:
            blob += struct.pack("<II", layer.in_dim, layer.out_dim)
    params = np.concatenate([e.get_flat() for e in stack.encoders()])
    blob += params.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> EncoderStack:
    """Read a TRI1 checkpoint back into an EncoderStack."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise FormatError(f"checkpoint too short: {len(data)} bytes")
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    offset = 8
    encoders = []
    for _ in range(3):
        if offset + 9 > len(data):
            raise FormatError("truncated checkpoint header")
        act_code, n_dense, in_dim = struct.unpack_from("<BII", data, offset)
        offset += 9
        if act_code not in _ACT_NAMES:
            raise FormatError(f"unknown activation code {act_code}")
        shapes = []
        for _ in range(n_dense):
            if offset + 8 > len(data):
                raise FormatError("truncated checkpoint header")
            d_in, d_out = struct.unpack_from("<II", data, offset)
            offset += 8
            shapes.append((d_in, d_out))
        layers = [DenseLayer(np.zeros((d_out, d_in)), np.zeros(d_out))
                  for d_in, d_out in shapes]
        encoders.append(Mlp(layers, activation=_ACT_NAMES[act_code],
                            normalize_output=True, in_dim=in_dim))
    expected = sum(e.num_params for e in encoders)
    payload = data[offset:]
    if len(payload) != expected * 8:
        raise FormatError(f"checkpoint payload length mismatch: expected {expected * 8} "
                          f"bytes, got {len(payload)}")
    params = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    stack = EncoderStack(*encoders)
    stack.set_flat(params)
    return stack
