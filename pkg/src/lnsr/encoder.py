"""Toy post-LN transformer encoder with per-layer taps.

Layer numbering is 1-based. The *input* of layer ``b`` is the hidden state
entering encoder layer ``b``; for ``b == 1`` that is the embedding output
(token + position embeddings after layer norm). A trace started at layer
``b`` holds the outputs of layers ``b..L``.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import diffcore as dc

PAD, CLS, SEP, MASK, UNK = 0, 1, 2, 3, 4
NUM_SPECIAL = 5

_MASK_BIAS = -1e9


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 4
    d_model: int = 64
    n_heads: int = 2
    d_ff: int = 128
    vocab_size: int = 64
    max_seq_len: int = 32
    head_kind: str = "classification"  # or "regression"
    num_labels: int = 2
    init_std: float = 0.02
    ln_eps: float = 1e-12

    def __post_init__(self):
        for name in ("num_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            val = getattr(self, name)
            if not isinstance(val, (int, np.integer)) or val <= 0:
                raise ConfigError(f"encoder.{name} must be a positive integer, got {val!r}")
        if self.d_model % self.n_heads:
            raise ConfigError("encoder.d_model must be divisible by encoder.n_heads")
        if self.head_kind not in ("classification", "regression"):
            raise ConfigError(f"unknown head_kind {self.head_kind!r}")
        if self.head_kind == "classification" and self.num_labels < 2:
            raise ConfigError("classification needs num_labels >= 2")
        if self.init_std < 0:
            raise ConfigError("encoder.init_std must be non-negative")

    @property
    def out_dim(self) -> int:
        return self.num_labels if self.head_kind == "classification" else 1

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "embed.tok": (cfg.vocab_size, d),
        "embed.pos": (cfg.max_seq_len, d),
        "embed.ln.g": (d,),
        "embed.ln.b": (d,),
    }
    for r in range(1, cfg.num_layers + 1):
        p = f"layer{r}."
        for m in ("q", "k", "v", "o"):
            shapes[p + f"attn.{m}.w"] = (d, d)
            shapes[p + f"attn.{m}.b"] = (d,)
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        shapes[p + "ffn.in.w"] = (d, f)
        shapes[p + "ffn.in.b"] = (f,)
        shapes[p + "ffn.out.w"] = (f, d)
        shapes[p + "ffn.out.b"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
    shapes["head.w"] = (d, cfg.out_dim)
    shapes["head.b"] = (cfg.out_dim,)
    return shapes


def is_head(name: str) -> bool:
    return name.startswith("head.")


def layer_of(name: str) -> int:
    """Encoder layer index a parameter belongs to; 0 for embeddings, L+1 for the head."""
    if name.startswith("embed."):
        return 0
    if name.startswith("layer"):
        return int(name[len("layer") : name.index(".")])
    return 10**9


@dataclass
class Parameters:
    """Named tensors for one encoder, split into body and head.

    Values are numpy arrays normally; during training they are diffcore
    Vars on the current step's tape.
    """

    config: EncoderConfig
    tensors: dict[str, Any]

    def __getitem__(self, name: str):
        return self.tensors[name]

    @property
    def body_names(self) -> list[str]:
        return [n for n in self.tensors if not is_head(n)]

    @property
    def head_names(self) -> list[str]:
        return [n for n in self.tensors if is_head(n)]

    def copy(self) -> "Parameters":
        return Parameters(self.config, {k: np.array(v, copy=True) for k, v in self.tensors.items()})

    def on_tape(self, tape: dc.Tape) -> "Parameters":
        return Parameters(self.config, {k: tape.param(k, v) for k, v in self.tensors.items()})

    def replace(self, **tensors) -> "Parameters":
        new = dict(self.tensors)
        new.update(tensors)
        return Parameters(self.config, new)

    def equals(self, other: "Parameters") -> bool:
        return self.tensors.keys() == other.tensors.keys() and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name], dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def init_params(config: EncoderConfig, rng: np.random.Generator) -> Parameters:
    """Gaussian weights with ``config.init_std``, zero biases, unit layer-norm gains."""
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            tensors[name] = np.ones(shape)
        elif name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(0.0, config.init_std, size=shape) if config.init_std else np.zeros(shape)
    return Parameters(config, tensors)


def init_head(params: Parameters, rng: np.random.Generator) -> Parameters:
    """Fresh task head on top of an existing body."""
    cfg = params.config
    shapes = param_shapes(cfg)
    w = rng.normal(0.0, cfg.init_std, size=shapes["head.w"]) if cfg.init_std else np.zeros(shapes["head.w"])
    return params.replace(**{"head.w": w, "head.b": np.zeros(shapes["head.b"])})


@dataclass
class LayerTrace:
    """Per-layer hidden states of one (batched) forward pass.

    ``outputs[i]`` is the output of layer ``start_layer + i``.
    ``embedding`` is only set on full passes.
    """

    start_layer: int
    outputs: list
    pooled: Any
    logits: Any
    mask: np.ndarray
    embedding: Any = None
    batched: bool = True

    @property
    def per_layer_outputs(self) -> list:
        return self.outputs

    def layer(self, r: int):
        i = r - self.start_layer
        if i < 0 or i >= len(self.outputs):
            raise IndexError(f"layer {r} not in trace (layers {self.start_layer}..{self.end_layer})")
        return self.outputs[i]

    @property
    def end_layer(self) -> int:
        return self.start_layer + len(self.outputs) - 1

    def layer_input(self, b: int):
        """Hidden state entering layer ``b`` (x^b)."""
        if b == self.start_layer:
            if self.embedding is None:
                raise IndexError("trace does not hold the input of its first layer")
            return self.embedding
        return self.layer(b - 1)


def _attention(p: Mapping, prefix: str, h, key_bias: np.ndarray, cfg: EncoderConfig):
    bsz, t, d = dc.value_of(h).shape
    nh = cfg.n_heads
    dh = d // nh

    def split(m):
        x = dc.matmul(h, p[f"{prefix}attn.{m}.w"]) + p[f"{prefix}attn.{m}.b"]
        return dc.transpose(dc.reshape(x, (bsz, t, nh, dh)), (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    scores = dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh)) + key_bias
    attn = dc.softmax(scores)
    ctx = dc.reshape(dc.transpose(dc.matmul(attn, v), (0, 2, 1, 3)), (bsz, t, d))
    return dc.matmul(ctx, p[f"{prefix}attn.o.w"]) + p[f"{prefix}attn.o.b"]


def encoder_layer(p: Mapping, r: int, h, key_bias: np.ndarray, cfg: EncoderConfig):
    prefix = f"layer{r}."
    a = dc.layer_norm(h + _attention(p, prefix, h, key_bias, cfg), p[prefix + "ln1.g"], p[prefix + "ln1.b"], cfg.ln_eps)
    ff = dc.gelu(dc.matmul(a, p[prefix + "ffn.in.w"]) + p[prefix + "ffn.in.b"])
    ff = dc.matmul(ff, p[prefix + "ffn.out.w"]) + p[prefix + "ffn.out.b"]
    return dc.layer_norm(a + ff, p[prefix + "ln2.g"], p[prefix + "ln2.b"], cfg.ln_eps)


def _key_bias(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 0.0, _MASK_BIAS)[:, None, None, :]


def _normalize_tokens(tokens, mask, cfg: EncoderConfig):
    tokens = np.asarray(tokens)
    batched = tokens.ndim == 2
    if not batched:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or not np.issubdtype(tokens.dtype, np.integer):
        raise ValueError("tokens must be an integer sequence or a 2-D batch of them")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    if tokens.shape[1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if mask is None:
        mask = np.ones(tokens.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool).reshape(tokens.shape)
    return tokens, mask, batched


def embed(params: Parameters, tokens, mask=None):
    cfg = params.config
    tokens, mask, _ = _normalize_tokens(tokens, mask, cfg)
    p = params.tensors
    t = tokens.shape[1]
    x = dc.getitem(p["embed.tok"], tokens) + dc.getitem(p["embed.pos"], slice(0, t))
    return dc.layer_norm(x, p["embed.ln.g"], p["embed.ln.b"], cfg.ln_eps)


def _head(params: Parameters, last):
    pooled = dc.getitem(last, (slice(None), 0))
    out = dc.matmul(pooled, params["head.w"]) + params["head.b"]
    if params.config.head_kind == "regression":
        out = dc.reshape(out, (dc.value_of(out).shape[0],))
    return pooled, out


def _squeeze_trace(trace: LayerTrace) -> LayerTrace:
    def sq(x):
        if x is None:
            return None
        shape = dc.value_of(x).shape[1:]
        return dc.reshape(x, shape)

    return LayerTrace(
        start_layer=trace.start_layer,
        outputs=[sq(o) for o in trace.outputs],
        pooled=sq(trace.pooled),
        logits=sq(trace.logits),
        mask=trace.mask[0],
        embedding=sq(trace.embedding),
        batched=False,
    )


def _run_layers(params: Parameters, h, b: int, mask: np.ndarray):
    cfg = params.config
    bias = _key_bias(mask)
    outputs = []
    for r in range(b, cfg.num_layers + 1):
        h = encoder_layer(params.tensors, r, h, bias, cfg)
        outputs.append(h)
    return outputs


def forward(params: Parameters, tokens, mask=None) -> LayerTrace:
    """Full pass: embeddings, all L layers, first-token pooling and head.

    ``tokens`` is one integer sequence (T,) or a batch (B, T); ``mask`` marks
    real (non-padding) positions.
    """
    tokens, mask, batched = _normalize_tokens(tokens, mask, params.config)
    x1 = embed(params, tokens, mask)
    outputs = _run_layers(params, x1, 1, mask)
    pooled, logits = _head(params, outputs[-1])
    trace = LayerTrace(1, outputs, pooled, logits, mask, embedding=x1)
    return trace if batched else _squeeze_trace(trace)


def forward_from(params: Parameters, layer_input, b: int, mask=None) -> LayerTrace:
    """Run layers ``b..L`` (and the head) on a given layer-``b`` input."""
    cfg = params.config
    if not 1 <= b <= cfg.num_layers:
        raise ValueError(f"layer index b={b} outside 1..{cfg.num_layers}")
    shape = dc.value_of(layer_input).shape
    batched = len(shape) == 3
    if not batched:
        if len(shape) != 2:
            raise ValueError("layer_input must be (T, d_model) or (B, T, d_model)")
        layer_input = dc.reshape(layer_input, (1,) + shape)
        shape = (1,) + shape
    if shape[-1] != cfg.d_model:
        raise ValueError(f"layer_input width {shape[-1]} != d_model {cfg.d_model}")
    if mask is None:
        mask = np.ones(shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(shape[:2])
    outputs = _run_layers(params, layer_input, b, mask)
    pooled, logits = _head(params, outputs[-1])
    trace = LayerTrace(b, outputs, pooled, logits, mask, embedding=layer_input)
    return trace if batched else _squeeze_trace(trace)


@dataclass
class Batch:
    """Padded token batch. ``mask`` marks real positions."""

    tokens: np.ndarray
    mask: np.ndarray
    labels: np.ndarray | None = None

    @classmethod
    def from_sequences(cls, seqs, labels=None) -> "Batch":
        t = max(len(s) for s in seqs)
        tokens = np.full((len(seqs), t), PAD, dtype=np.int64)
        mask = np.zeros((len(seqs), t), dtype=bool)
        for i, s in enumerate(seqs):
            tokens[i, : len(s)] = s
            mask[i, : len(s)] = True
        return cls(tokens, mask, None if labels is None else np.asarray(labels))

    def __len__(self) -> int:
        return self.tokens.shape[0]


class EncoderModel:
    """Adapter exposing the encoder through the interface the trainer uses."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        self.num_layers = config.num_layers

    def forward(self, params: Parameters, batch) -> LayerTrace:
        return forward(params, batch.tokens, batch.mask)

    def forward_from(self, params: Parameters, layer_input, b: int, batch) -> LayerTrace:
        return forward_from(params, layer_input, b, batch.mask)

    def loss(self, trace: LayerTrace, batch):
        if self.config.head_kind == "classification":
            return dc.cross_entropy(trace.logits, batch.labels)
        diff = trace.logits - np.asarray(batch.labels, dtype=np.float64)
        return dc.mean(diff * diff)

    def predict(self, trace: LayerTrace) -> np.ndarray:
        out = dc.value_of(trace.logits)
        if self.config.head_kind == "classification":
            return out.argmax(axis=-1)
        return out.copy()


# -- snapshot format ---------------------------------------------------------
#
# b"LNSRSNAP" | u32 version | u32 header_len | header (UTF-8 JSON)
# | u32 n_tensors | per tensor: u16 name_len, name, u8 ndim, u32 dims..., <f8 data

_MAGIC = b"LNSRSNAP"
_VERSION = 1


def save_snapshot(params: Parameters, path: str | Path, meta: Mapping | None = None) -> None:
    header = json.dumps({"encoder": params.config.to_dict(), "meta": dict(meta or {})}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<II", _VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(params.tensors)))
    for name in sorted(params.tensors):
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_snapshot(path: str | Path) -> tuple[Parameters, dict]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a parameter snapshot")
    off = 8
    version, hlen = struct.unpack_from("<II", data, off)
    off += 8
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    header = json.loads(data[off : off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(shape))
        tensors[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    config = EncoderConfig(**header["encoder"])
    return Parameters(config, tensors), header.get("meta", {})


__all__ = [
    "ConfigError",
    "EncoderConfig",
    "Parameters",
    "LayerTrace",
    "EncoderModel",
    "Batch",
    "param_shapes",
    "init_params",
    "init_head",
    "embed",
    "forward",
    "forward_from",
    "save_snapshot",
    "load_snapshot",
    "layer_of",
    "is_head",
    "PAD",
    "CLS",
    "SEP",
    "MASK",
    "UNK",
    "NUM_SPECIAL",
]
