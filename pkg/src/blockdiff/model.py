"""Tiny transformer with block-causal attention.

Attention is bidirectional inside a block and causal across blocks, and
packed samples are fully isolated: each sample in a packed row is processed
with its own positions (restarting at 0) and its own block grid, so packing
is pure bookkeeping with zero numeric effect. The final block of a sample
may be shorter than `block_len` (ragged) and keeps its actual length.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T

CHECKPOINT_MAGIC = b"BDLMCKPT"
CHECKPOINT_VERSION = 1

# Feed-forward hidden width as a multiple of embed_dim.
FFN_MULT = 4
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int
    num_layers: int
    num_heads: int
    max_seq_len: int
    block_len: int
    mask_token_id: int
    think_open_id: int
    think_close_id: int
    eos_id: int

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.block_len < 1:
            raise ValueError("block_len must be >= 1")
        specials = (self.mask_token_id, self.think_open_id, self.think_close_id, self.eos_id)
        if len(set(specials)) != 4 or any(s < 0 or s >= self.vocab_size for s in specials):
            raise ValueError(f"special token ids must be distinct and < vocab_size: {specials}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass
class AttentionMask:
    """Boolean attention pattern plus the partition it was derived from.

    allowed[q][k] is True iff q and k belong to the same packed sample and
    k's block is at or before q's block. sample_ids / block_ids / positions
    are per-token: which sample span a token falls in, its block index local
    to that sample, and its position local to that sample.
    """

    allowed: np.ndarray
    block_len: int
    sample_spans: list[tuple[int, int]]
    sample_ids: np.ndarray
    block_ids: np.ndarray
    positions: np.ndarray


def build_block_causal_mask(
    seq_len: int, block_len: int, sample_boundaries: list[int] | None = None
) -> AttentionMask:
    """Block-causal attention mask with optional packing boundaries.

    `sample_boundaries` lists interior cut points between packed samples
    (0 and seq_len are implicit). Block indices and positions restart at
    each sample start.
    """
    if block_len <= 0:
        raise ValueError(f"block_len must be positive, got {block_len}")
    boundaries = sorted(set(sample_boundaries or []))
    if any(b < 0 or b > seq_len for b in boundaries):
        raise ValueError(f"boundaries {boundaries} outside [0, {seq_len}]")
    cuts = [0] + [b for b in boundaries if 0 < b < seq_len] + [seq_len]
    spans = [(cuts[i], cuts[i + 1]) for i in range(len(cuts) - 1)]

    sample_ids = np.zeros(seq_len, dtype=np.int64)
    block_ids = np.zeros(seq_len, dtype=np.int64)
    positions = np.zeros(seq_len, dtype=np.int64)
    for si, (s, e) in enumerate(spans):
        idx = np.arange(s, e)
        sample_ids[idx] = si
        positions[idx] = idx - s
        block_ids[idx] = (idx - s) // block_len

    same_sample = sample_ids[:, None] == sample_ids[None, :]
    allowed = same_sample & (block_ids[None, :] <= block_ids[:, None])
    return AttentionMask(
        allowed=allowed,
        block_len=block_len,
        sample_spans=spans,
        sample_ids=sample_ids,
        block_ids=block_ids,
        positions=positions,
    )


class ModelParams:
    """Named parameter tensors for one model instance."""

    def __init__(self, config: ModelConfig, params: dict[str, T.Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> T.Tensor:
        return self.params[name]

    def named(self) -> dict[str, T.Tensor]:
        return self.params

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def all_finite(self) -> bool:
        return all(np.isfinite(p.values).all() for p in self.params.values())

    def num_parameters(self) -> int:
        return sum(p.values.size for p in self.params.values())


def init_params(config: ModelConfig, rng: np.random.Generator, head_scale: float = 0.0) -> ModelParams:
    """Random initialization.

    Matrices get fan-in scaled normals; the output head defaults to zero so
    an untrained model is exactly a uniform predictor (head_scale > 0 opts
    into a random head).
    """
    d = config.embed_dim
    h = FFN_MULT * d

    def param(arr: np.ndarray) -> T.Tensor:
        return T.Tensor(arr, requires_grad=True)

    def matrix(rows: int, cols: int) -> T.Tensor:
        return param(rng.normal(0.0, 1.0 / np.sqrt(rows), size=(rows, cols)))

    p: dict[str, T.Tensor] = {}
    p["tok_embed"] = param(rng.normal(0.0, 0.02, size=(config.vocab_size, d)))
    p["pos_embed"] = param(rng.normal(0.0, 0.02, size=(config.max_seq_len, d)))
    for i in range(config.num_layers):
        p[f"layer{i}.ln1.gain"] = param(np.ones(d))
        p[f"layer{i}.ln1.bias"] = param(np.zeros(d))
        p[f"layer{i}.attn.w_qkv"] = matrix(d, 3 * d)
        p[f"layer{i}.attn.b_qkv"] = param(np.zeros(3 * d))
        p[f"layer{i}.attn.w_out"] = matrix(d, d)
        p[f"layer{i}.attn.b_out"] = param(np.zeros(d))
        p[f"layer{i}.ln2.gain"] = param(np.ones(d))
        p[f"layer{i}.ln2.bias"] = param(np.zeros(d))
        p[f"layer{i}.mlp.w1"] = matrix(d, h)
        p[f"layer{i}.mlp.b1"] = param(np.zeros(h))
        p[f"layer{i}.mlp.w2"] = matrix(h, d)
        p[f"layer{i}.mlp.b2"] = param(np.zeros(d))
    p["final_ln.gain"] = param(np.ones(d))
    p["final_ln.bias"] = param(np.zeros(d))
    if head_scale > 0.0:
        p["head.w"] = param(rng.normal(0.0, head_scale, size=(d, config.vocab_size)))
    else:
        p["head.w"] = param(np.zeros((d, config.vocab_size)))
    p["head.b"] = param(np.zeros(config.vocab_size))
    return ModelParams(config, p)


def _forward_single(model: ModelParams, tokens: np.ndarray, allowed: np.ndarray) -> T.Tensor:
    cfg = model.config
    p = model.params
    n = tokens.shape[0]
    additive = np.where(allowed, 0.0, -np.inf)

    x = T.add(
        T.embedding(p["tok_embed"], tokens),
        T.embedding(p["pos_embed"], np.arange(n)),
    )
    inv_sqrt_dh = 1.0 / np.sqrt(cfg.head_dim)
    for i in range(cfg.num_layers):
        ln1 = T.layer_norm(x, p[f"layer{i}.ln1.gain"], p[f"layer{i}.ln1.bias"], LN_EPS)
        qkv = T.add(T.matmul(ln1, p[f"layer{i}.attn.w_qkv"]), p[f"layer{i}.attn.b_qkv"])
        heads = []
        for hd in range(cfg.num_heads):
            lo = hd * cfg.head_dim
            q = T.slice_cols(qkv, lo, lo + cfg.head_dim)
            k = T.slice_cols(qkv, cfg.embed_dim + lo, cfg.embed_dim + lo + cfg.head_dim)
            v = T.slice_cols(qkv, 2 * cfg.embed_dim + lo, 2 * cfg.embed_dim + lo + cfg.head_dim)
            scores = T.scale(T.matmul(q, transpose(k)), inv_sqrt_dh)
            probs = T.masked_softmax_rows(scores, additive)
            heads.append(T.matmul(probs, v))
        attn = T.add(T.matmul(T.concat_cols(heads), p[f"layer{i}.attn.w_out"]), p[f"layer{i}.attn.b_out"])
        x = T.add(x, attn)
        ln2 = T.layer_norm(x, p[f"layer{i}.ln2.gain"], p[f"layer{i}.ln2.bias"], LN_EPS)
        hidden = T.relu(T.add(T.matmul(ln2, p[f"layer{i}.mlp.w1"]), p[f"layer{i}.mlp.b1"]))
        mlp = T.add(T.matmul(hidden, p[f"layer{i}.mlp.w2"]), p[f"layer{i}.mlp.b2"])
        x = T.add(x, mlp)
    x = T.layer_norm(x, p["final_ln.gain"], p["final_ln.bias"], LN_EPS)
    return T.add(T.matmul(x, p["head.w"]), p["head.b"])


def transpose(x: T.Tensor) -> T.Tensor:
    values = x.values.T

    def backward(dout: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(dout.T)

    return T._make_node(values, (x,), backward)


def forward(model: ModelParams, tokens: np.ndarray, mask: AttentionMask) -> T.Tensor:
    """Logits [L, vocab] for a (possibly packed) token row.

    Samples in the row are processed independently over their own spans, so
    a packed sample's logits are bit-identical to processing it alone.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    cfg = model.config
    n = tokens.shape[0]
    if n > cfg.max_seq_len:
        raise ValueError(f"sequence length {n} exceeds max_seq_len {cfg.max_seq_len}")
    if mask.allowed.shape != (n, n):
        raise ValueError(f"mask shape {mask.allowed.shape} does not match {n} tokens")
    if n and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise IndexError(f"token id out of range for vocab {cfg.vocab_size}")

    parts = []
    for s, e in mask.sample_spans:
        parts.append(_forward_single(model, tokens[s:e], mask.allowed[s:e, s:e]))
    if len(parts) == 1:
        return parts[0]
    return T.concat_rows(parts)


def save_checkpoint(path: str, model: ModelParams) -> None:
    """Little-endian container: magic, version, config ints, named blobs."""
    cfg = model.config
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_values = [getattr(cfg, f.name) for f in fields(ModelConfig)]
    buf.write(struct.pack(f"<{len(cfg_values)}I", *cfg_values))
    buf.write(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", p.values.ndim))
        buf.write(struct.pack(f"<{p.values.ndim}I", *p.values.shape))
        buf.write(np.ascontiguousarray(p.values, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str) -> ModelParams:
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        chunk = bytes(view[off : off + n])
        if len(chunk) != n:
            raise ValueError("truncated checkpoint")
        off += n
        return chunk

    if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    n_cfg = len(fields(ModelConfig))
    cfg_values = struct.unpack(f"<{n_cfg}I", take(4 * n_cfg))
    config = ModelConfig(*cfg_values)
    (n_params,) = struct.unpack("<I", take(4))
    params: dict[str, T.Tensor] = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        params[name] = T.Tensor(arr, requires_grad=True)
    if off != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return ModelParams(config, params)
