"""Fully connected networks split into representation and head parameters.

All parameters of a model live in one flat float64 vector (the
``ParameterStore``): ordered (weight, bias) blocks per layer, with the
first ``split_index`` layers forming the representation view and the rest
the head view. The forward pass exists twice with identical semantics: a
plain numpy path for evaluation and a taped path for meta-training.

Checkpoints are a small binary format (magic ``KCML``), bit-exact on round
trip, with an optional bit-packed importance-mask section and a trailing
CRC-32.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import backend, seeds
from .errors import FormatError, UsageError
from .tape import Node, Tape

CHECKPOINT_MAGIC = b"KCML"
CHECKPOINT_VERSION = 1
_MASK_TAG = 0x4D


@dataclass(frozen=True)
class ModelSpec:
    """Layer widths (input first, output last) plus the representation split."""

    layer_sizes: tuple[int, ...]
    split_index: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise UsageError("a model needs at least input and output widths")
        if any(s < 1 for s in self.layer_sizes):
            raise UsageError(f"zero-width layer in spec {self.layer_sizes}")
        if not 1 <= self.split_index < self.n_layers:
            raise UsageError(f"split_index {self.split_index} outside [1, {self.n_layers - 1}]")
        if self.activation != "relu":
            raise UsageError(f"unsupported activation tag {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def with_output_dim(self, out_dim: int) -> "ModelSpec":
        if out_dim < 1:
            raise UsageError("output dimension must be >= 1")
        return ModelSpec(self.layer_sizes[:-1] + (out_dim,), self.split_index, self.activation)


@dataclass(frozen=True)
class Block:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        n = 1
        for s in self.shape:
            n *= s
        return n


@lru_cache(maxsize=None)
def layout_for(spec: ModelSpec) -> tuple[Block, ...]:
    """(W1, b1, W2, b2, ...) block layout; representation blocks come first."""
    blocks = []
    offset = 0
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_sizes[i], spec.layer_sizes[i + 1]
        blocks.append(Block(f"W{i + 1}", offset, (fan_in, fan_out)))
        offset += fan_in * fan_out
        blocks.append(Block(f"b{i + 1}", offset, (fan_out,)))
        offset += fan_out
    return tuple(blocks)


class ParameterStore:
    """Flat, ordered float64 parameter vector with layer-block views.

    The value array is frozen (read-only); updates produce new stores via
    :meth:`with_values`, which keeps snapshots safe to share.
    """

    def __init__(self, spec: ModelSpec, values: np.ndarray):
        self.spec = spec
        self.layout = layout_for(spec)
        n = self.layout[-1].offset + self.layout[-1].size
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (n,):
            raise UsageError(f"expected {n} parameters for spec, got shape {values.shape}")
        if values.flags.writeable:
            values = values.copy()
            values.flags.writeable = False
        self.values = values
        # representation blocks are a contiguous prefix of the flat vector
        self.theta_end = self.layout[2 * spec.split_index - 1].offset + self.layout[2 * spec.split_index - 1].size

    @property
    def n_params(self) -> int:
        return self.values.size

    @property
    def theta(self) -> np.ndarray:
        """Representation view (layers 1..split_index)."""
        return self.values[: self.theta_end]

    @property
    def head(self) -> np.ndarray:
        """Head view (remaining layers)."""
        return self.values[self.theta_end :]

    def block_values(self, block: Block) -> np.ndarray:
        return self.values[block.offset : block.offset + block.size].reshape(block.shape)

    def with_values(self, values: np.ndarray) -> "ParameterStore":
        return ParameterStore(self.spec, values)

    def __eq__(self, other):
        return (
            isinstance(other, ParameterStore)
            and self.spec == other.spec
            and np.array_equal(self.values, other.values)
        )


def _init_layer(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    weights = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return weights, np.zeros(fan_out)


def build_model(spec: ModelSpec, seed) -> ParameterStore:
    """Fan-balanced uniform weights, zero biases; deterministic per seed."""
    rng = seeds.rng(seed, "init")
    parts = []
    for i in range(spec.n_layers):
        weights, biases = _init_layer(rng, spec.layer_sizes[i], spec.layer_sizes[i + 1])
        parts.append(weights.ravel())
        parts.append(biases)
    return ParameterStore(spec, np.concatenate(parts))


def replace_head(spec: ModelSpec, store: ParameterStore, out_dim: int, seed) -> tuple[ModelSpec, ParameterStore]:
    """Copy the representation bit-exact, re-draw the head (resized to out_dim)."""
    new_spec = spec.with_output_dim(out_dim)
    rng = seeds.rng(seed, "head")
    parts = [store.theta]
    for i in range(spec.split_index, new_spec.n_layers):
        weights, biases = _init_layer(rng, new_spec.layer_sizes[i], new_spec.layer_sizes[i + 1])
        parts.append(weights.ravel())
        parts.append(biases)
    return new_spec, ParameterStore(new_spec, np.concatenate(parts))


# -- forward passes ---------------------------------------------------------


def forward_range(spec: ModelSpec, values: np.ndarray, x: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """Numpy forward through layers [lo, hi); relu after all but the final layer."""
    lay = layout_for(spec)
    h = x
    for layer in range(lo, hi):
        wb, bb = lay[2 * layer], lay[2 * layer + 1]
        w = values[wb.offset : wb.offset + wb.size].reshape(wb.shape)
        b = values[bb.offset : bb.offset + bb.size]
        if h.shape[-1] != w.shape[0]:
            raise UsageError(f"input width {h.shape[-1]} does not match layer {layer + 1} fan-in {w.shape[0]}")
        h = h @ w + b
        if layer != spec.n_layers - 1:
            h = backend.relu(h)
    return h


def forward(spec: ModelSpec, store: ParameterStore, x: np.ndarray) -> np.ndarray:
    """g(h(x|theta)|W) for a single input vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise UsageError(f"expected inputs of width {spec.input_dim}, got shape {x.shape}")
    out = forward_range(spec, store.values, x, 0, spec.n_layers)
    return out[0] if single else out


class TapedParams:
    """A ParameterStore registered as leaf nodes on a tape (one per block)."""

    def __init__(self, tape: Tape, store: ParameterStore):
        self.tape = tape
        self.spec = store.spec
        self.layout = store.layout
        self.blocks: list[Node] = [tape.leaf(store.block_values(b)) for b in store.layout]
        self.n_params = store.n_params

    @property
    def theta_blocks(self) -> list[Node]:
        return self.blocks[: 2 * self.spec.split_index]

    @property
    def head_blocks(self) -> list[Node]:
        return self.blocks[2 * self.spec.split_index :]

    def flat(self, blocks=None) -> Node:
        """Concatenate (a subset of) block nodes into one flat vector node."""
        blocks = self.blocks if blocks is None else blocks
        parts = [self.tape.reshape(b, (b.value.size,)) for b in blocks]
        return self.tape.concat1d(parts)


def taped_forward_range(tape: Tape, spec: ModelSpec, blocks, x: Node, lo: int, hi: int) -> Node:
    """Taped twin of forward_range; `blocks` is indexable by block position."""
    h = x
    for layer in range(lo, hi):
        w, b = blocks[2 * layer], blocks[2 * layer + 1]
        h = tape.add(tape.matmul(h, w), b)
        if layer != spec.n_layers - 1:
            h = tape.relu(h)
    return h


def taped_forward(tape: Tape, params: TapedParams, x) -> Node:
    x = x if isinstance(x, Node) else tape.const(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if x.value.ndim != 2 or x.value.shape[1] != params.spec.input_dim:
        raise UsageError(f"expected inputs of width {params.spec.input_dim}, got shape {x.value.shape}")
    return taped_forward_range(tape, params.spec, params.blocks, x, 0, params.spec.n_layers)


def grad_flat(tape: Tape, objective: Node, params: TapedParams) -> Node:
    """Gradient of a scalar node w.r.t. the full store, as one flat vector node.

    The result is a tape expression: it can be masked, squared, summed and
    differentiated again (double backward).
    """
    grads = tape.gradient(objective, params.blocks)
    parts = [tape.reshape(g, (g.value.size,)) for g in grads]
    return tape.concat1d(parts)


# -- checkpoint io -----------------------------------------------------------


def _spec_text(spec: ModelSpec) -> str:
    sizes = ",".join(str(s) for s in spec.layer_sizes)
    return f"layers={sizes};split={spec.split_index};activation={spec.activation}"


def _parse_spec_text(text: str) -> ModelSpec:
    fields = {}
    for part in text.split(";"):
        if "=" not in part:
            raise FormatError(f"malformed spec field {part!r} in checkpoint")
        key, value = part.split("=", 1)
        fields[key] = value
    try:
        sizes = tuple(int(s) for s in fields["layers"].split(","))
        split = int(fields["split"])
        activation = fields["activation"]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"invalid checkpoint spec text: {exc}") from exc
    try:
        return ModelSpec(sizes, split, activation)
    except UsageError as exc:
        raise FormatError(f"checkpoint spec is not a valid model spec: {exc}") from exc


def save_checkpoint(path, spec: ModelSpec, store: ParameterStore, mask_bits: np.ndarray | None = None) -> None:
    """Write spec + parameters (+ optional mask) with a trailing CRC-32."""
    if store.spec != spec:
        raise UsageError("store was built for a different spec")
    payload = bytearray()
    payload += CHECKPOINT_MAGIC
    payload += struct.pack("<I", CHECKPOINT_VERSION)
    text = _spec_text(spec).encode("utf-8")
    payload += struct.pack("<I", len(text))
    payload += text
    payload += struct.pack("<Q", store.n_params)
    payload += store.values.astype("<f8").tobytes()
    if mask_bits is not None:
        mask_bits = np.asarray(mask_bits).astype(np.uint8)
        if mask_bits.shape != (store.n_params,):
            raise UsageError("mask length does not match parameter count")
        payload += bytes([_MASK_TAG])
        payload += np.packbits(mask_bits, bitorder="little").tobytes()
    payload += struct.pack("<I", zlib.crc32(bytes(payload)))
    with open(path, "wb") as fh:
        fh.write(bytes(payload))


def load_checkpoint(path) -> tuple[ModelSpec, ParameterStore, np.ndarray | None]:
    """Inverse of save_checkpoint; returns (spec, store, mask-bits-or-None)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 12:
        raise FormatError("checkpoint truncated")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic bytes {raw[:4]!r}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch (corrupted checkpoint)")
    pos = 4
    (version,) = struct.unpack_from("<I", body, pos)
    pos += 4
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (text_len,) = struct.unpack_from("<I", body, pos)
    pos += 4
    if pos + text_len > len(body):
        raise FormatError("checkpoint truncated in spec text")
    spec = _parse_spec_text(body[pos : pos + text_len].decode("utf-8"))
    pos += text_len
    (n_params,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    end = pos + 8 * n_params
    if end > len(body):
        raise FormatError("checkpoint truncated in parameter data")
    values = np.frombuffer(body[pos:end], dtype="<f8").astype(np.float64)
    pos = end
    mask_bits = None
    if pos < len(body):
        if body[pos] != _MASK_TAG:
            raise FormatError(f"unknown section tag 0x{body[pos]:02X}")
        pos += 1
        n_bytes = (n_params + 7) // 8
        if pos + n_bytes != len(body):
            raise FormatError("mask section has wrong length")
        packed = np.frombuffer(body[pos : pos + n_bytes], dtype=np.uint8)
        mask_bits = np.unpackbits(packed, bitorder="little")[:n_params]
    try:
        store = ParameterStore(spec, values)
    except UsageError as exc:
        raise FormatError(str(exc)) from exc
    return spec, store, mask_bits
