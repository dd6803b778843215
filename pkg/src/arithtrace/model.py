"""Post-layer-norm Transformer encoder with a scalar regression head on [CLS].

Layer indices used for activation capture and interventions:
``0`` is the embedding sum fed to the first block, ``l`` (1..num_layers) is the
output of block ``l`` (after its final layer norm), i.e. exactly the tensor the
next block consumes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .equations import VOCAB, Equation, IntermediateValue, TokenSequence
from .tensor import Parameter, Tensor


class InputError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 6
    model_dim: int = 128
    num_heads: int = 8
    ffn_dim: int = 512
    max_sequence_length: int = 64
    dropout: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        dims = (self.num_layers, self.model_dim, self.num_heads, self.ffn_dim, self.max_sequence_length)
        if min(dims) < 1:
            raise ValueError(f"all model dimensions must be >= 1: {self}")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def desk_scale(cls, **overrides) -> "ModelConfig":
        return cls(**{"num_layers": 3, "model_dim": 64, "num_heads": 4, "ffn_dim": 256, **overrides})


@dataclass
class TargetScaler:
    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, targets: Sequence[float]) -> "TargetScaler":
        y = np.asarray(targets, dtype=np.float64)
        std = float(y.std())
        return cls(float(y.mean()), std if std > 0 else 1.0)

    def scale(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.std

    def unscale(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


@dataclass
class InterventionHook:
    """Replace the hidden state (batch, tokens, dim) leaving ``layer`` with ``transform(state)``."""

    layer: int
    transform: Callable[[np.ndarray], np.ndarray]


@dataclass
class ActivationRecord:
    layers: dict[int, np.ndarray] = field(default_factory=dict)  # layer -> (instances, tokens, dim)
    texts: list[str] = field(default_factory=list)
    intermediates: list[tuple[IntermediateValue, ...]] = field(default_factory=list)

    @property
    def num_instances(self) -> int:
        return len(self.texts)

    def values(self, label: str) -> np.ndarray:
        """Per-instance values of the intermediate with the given label."""
        out = []
        for ivs in self.intermediates:
            match = [iv.value for iv in ivs if iv.label == label]
            if not match:
                raise KeyError(f"intermediate {label!r} missing from an instance")
            out.append(match[0])
        return np.asarray(out, dtype=np.float64)

    def labels(self) -> list[str]:
        return [iv.label for iv in self.intermediates[0]] if self.intermediates else []


class TransformerModel:
    def __init__(self, config: ModelConfig, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.scaler = TargetScaler()
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(config.seed)
        d, f = config.model_dim, config.ffn_dim

        def add(name, shape, std):
            data = rng.normal(0.0, std, size=shape) if std else np.zeros(shape)
            self.params[name] = Parameter(data, name, dtype=self.dtype)

        def add_ones(name, n):
            self.params[name] = Parameter(np.ones(n), name, dtype=self.dtype)

        add("embed.token", (len(VOCAB), d), 0.1)
        add("embed.position", (config.max_sequence_length, d), 0.1)
        for i in range(config.num_layers):
            p = f"blocks.{i}."
            for w in ("q", "k", "v", "o"):
                add(p + f"attn.w{w}", (d, d), (1.0 / d) ** 0.5)
                add(p + f"attn.b{w}", (d,), 0)
            add_ones(p + "ln1.gain", d)
            add(p + "ln1.bias", (d,), 0)
            add(p + "ffn.w1", (d, f), (2.0 / (d + f)) ** 0.5)
            add(p + "ffn.b1", (f,), 0)
            add(p + "ffn.w2", (f, d), (2.0 / (d + f)) ** 0.5)
            add(p + "ffn.b2", (d,), 0)
            add_ones(p + "ln2.gain", d)
            add(p + "ln2.bias", (d,), 0)
        add("head.w", (d, 1), 0.02)
        add("head.b", (1,), 0)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- graph construction -------------------------------------------------
    def _attention(self, x: Tensor, pad_mask: np.ndarray, i: int, rng) -> Tensor:
        P = self.params
        p = f"blocks.{i}.attn."
        B, L, d = x.shape
        H = self.config.num_heads
        dh = d // H

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, L, H, dh).transpose(0, 2, 1, 3)

        q = heads(x @ P[p + "wq"] + P[p + "bq"])
        k = heads(x @ P[p + "wk"] + P[p + "bk"])
        v = heads(x @ P[p + "wv"] + P[p + "bv"])
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / dh**0.5)
        scores = T.mask_fill(scores, pad_mask[:, None, None, :], -1e9)
        attn = T.dropout(T.softmax(scores), self.config.dropout, rng)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
        return ctx @ P[p + "wo"] + P[p + "bo"]

    def _block(self, x: Tensor, pad_mask: np.ndarray, i: int, rng) -> Tensor:
        P = self.params
        p = f"blocks.{i}."
        rate = self.config.dropout
        x = T.layer_norm(x + T.dropout(self._attention(x, pad_mask, i, rng), rate, rng), P[p + "ln1.gain"], P[p + "ln1.bias"])
        h = T.gelu(x @ P[p + "ffn.w1"] + P[p + "ffn.b1"]) @ P[p + "ffn.w2"] + P[p + "ffn.b2"]
        return T.layer_norm(x + T.dropout(h, rate, rng), P[p + "ln2.gain"], P[p + "ln2.bias"])

    def run(
        self,
        ids: np.ndarray,
        rng: np.random.Generator | None = None,
        hook: InterventionHook | None = None,
        capture: Iterable[int] = (),
    ) -> tuple[Tensor, dict[int, np.ndarray]]:
        """Scaled predictions (batch,) plus captured layer states.

        Dropout is active only when ``rng`` is given.
        """
        ids = np.asarray(ids)
        self._check_ids(ids)
        capture = set(capture)
        B, L = ids.shape
        pad_mask = ids == VOCAB.pad_id
        P = self.params
        x = T.embedding(P["embed.token"], ids) + P["embed.position"][:L]
        x = T.dropout(x, self.config.dropout, rng)
        captured: dict[int, np.ndarray] = {}
        for layer in range(self.config.num_layers + 1):
            if layer > 0:
                x = self._block(x, pad_mask, layer - 1, rng)
            if hook is not None and hook.layer == layer:
                x = Tensor(np.asarray(hook.transform(x.data), dtype=x.dtype))
            if layer in capture:
                captured[layer] = x.data.copy()
        cls_vec = x[:, 0, :]
        pred = (cls_vec @ P["head.w"] + P["head.b"]).reshape(B)
        return pred, captured

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.ndim != 2:
            raise InputError(f"token batch must be 2-D, got shape {ids.shape}")
        if ids.shape[1] > self.config.max_sequence_length:
            raise InputError(
                f"sequence length {ids.shape[1]} exceeds max_sequence_length {self.config.max_sequence_length}"
            )
        if ids.size and (ids.min() < 0 or ids.max() >= len(VOCAB)):
            raise InputError("token id outside the vocabulary")


def pad_batch(sequences: Sequence[TokenSequence | Sequence[int]], length: int | None = None) -> np.ndarray:
    rows = [s.tokens if isinstance(s, TokenSequence) else tuple(s) for s in sequences]
    width = max(len(r) for r in rows) if length is None else length
    out = np.full((len(rows), width), VOCAB.pad_id, dtype=np.int64)
    for i, r in enumerate(rows):
        if len(r) > width:
            raise InputError(f"sequence of length {len(r)} exceeds batch width {width}")
        out[i, : len(r)] = r
    return out


def forward(
    model: TransformerModel,
    tokens,
    capture_layers: Iterable[int] = (),
    hook: InterventionHook | None = None,
) -> tuple[np.ndarray, dict[int, np.ndarray] | None]:
    """Inference: unscaled predictions and (if requested) captured layer states."""
    ids = tokens if isinstance(tokens, np.ndarray) else pad_batch(tokens)
    capture_layers = set(capture_layers)
    for layer in capture_layers | ({hook.layer} if hook else set()):
        if not 0 <= layer <= model.config.num_layers:
            raise InputError(f"layer {layer} outside [0, {model.config.num_layers}]")
    with T.no_grad():
        pred, captured = model.run(ids, hook=hook, capture=capture_layers)
    return model.scaler.unscale(pred.data), (captured if capture_layers else None)


def predict(model: TransformerModel, equations: Sequence[Equation], batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(equations), batch_size):
        chunk = equations[start : start + batch_size]
        preds, _ = forward(model, [eq.tokens() for eq in chunk])
        out.append(preds)
    return np.concatenate(out) if out else np.zeros(0)


def capture_activations(
    model: TransformerModel,
    equations: Sequence[Equation],
    layers: Iterable[int],
    batch_size: int = 256,
    hook: InterventionHook | None = None,
) -> ActivationRecord:
    layers = sorted(set(layers))
    seqs = [eq.tokens() for eq in equations]
    lengths = {len(s) for s in seqs}
    if len(lengths) > 1:
        raise InputError(
            f"equations tokenize to different lengths {sorted(lengths)}; "
            "instantiate them from one fixed-width EquationTemplate"
        )
    record = ActivationRecord(
        texts=[eq.text for eq in equations], intermediates=[eq.intermediates for eq in equations]
    )
    if not layers or not equations:
        return record
    chunks: dict[int, list[np.ndarray]] = {l: [] for l in layers}
    for start in range(0, len(seqs), batch_size):
        _, captured = forward(model, seqs[start : start + batch_size], layers, hook)
        for l in layers:
            chunks[l].append(captured[l])
    record.layers = {l: np.concatenate(chunks[l]) for l in layers}
    return record


# --------------------------------------------------------------------------
# Checkpoints: magic, u32 version, u32 header length + canonical JSON header,
# u32 tensor count, then per tensor (u32 name length, name, u32 rank, u32 dims, f32 LE data).

MAGIC = b"TMLB"
FORMAT_VERSION = 1


def write_tensor_file(path, magic: bytes, header: dict, tensors: dict[str, np.ndarray], dtype="<f4") -> None:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [magic, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(head)), head]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype=dtype)
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensor_file(path, magic: bytes, dtype="<f4") -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated file")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4) != magic:
        raise CheckpointError(f"{path}: bad magic bytes (expected {magic!r})")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (hlen,) = struct.unpack("<I", take(4))
    try:
        header = json.loads(take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    (count,) = struct.unpack("<I", take(4))
    itemsize = np.dtype(dtype).itemsize
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(take(n * itemsize), dtype=dtype).reshape(shape).copy()
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return header, tensors


def save(model: TransformerModel, path) -> None:
    header = {
        "config": asdict(model.config),
        "vocabulary": list(VOCAB.symbols),
        "scaler": asdict(model.scaler),
    }
    write_tensor_file(path, MAGIC, header, {n: p.data for n, p in model.params.items()})


def load(path) -> TransformerModel:
    header, tensors = read_tensor_file(path, MAGIC)
    try:
        config = ModelConfig(**header["config"])
        scaler = TargetScaler(**header["scaler"])
        vocab = header["vocabulary"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: incomplete header ({exc})") from exc
    if vocab != list(VOCAB.symbols):
        raise CheckpointError(f"{path}: vocabulary differs from this build")
    model = TransformerModel(config)
    if set(tensors) != set(model.params):
        missing = sorted(set(model.params) - set(tensors))
        extra = sorted(set(tensors) - set(model.params))
        raise CheckpointError(f"{path}: parameter set mismatch (missing {missing}, unexpected {extra})")
    for name, param in model.params.items():
        if tensors[name].shape != param.shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {tensors[name].shape}, config implies {param.shape}"
            )
    for name, param in model.params.items():
        param.data = tensors[name].astype(np.float32)
    model.scaler = scaler
    return model
