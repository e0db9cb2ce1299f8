"""Block-by-block semi-autoregressive decoding.

Each block starts as mask tokens and is denoised over a fixed number of
steps: every step runs one forward pass, reads the argmax token and its
probability at each still-masked position, and freezes the K/S most
confident predictions (ties broken toward the lower position). Committed
tokens and earlier blocks are never revisited.

Decoding is greedy and deterministic; the rng argument is accepted for
interface symmetry and unused.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ModelParams, build_block_causal_mask, forward


@dataclass(frozen=True)
class DecodeConfig:
    block_len: int = 4
    denoise_steps: int = 4
    max_new_blocks: int = 16
    eos_mode: str = "stop-at-eos-block"

    def __post_init__(self):
        if not 1 <= self.denoise_steps <= self.block_len:
            raise ValueError(
                f"need 1 <= steps <= block_len, got steps={self.denoise_steps} "
                f"block_len={self.block_len}"
            )
        if self.block_len % self.denoise_steps != 0:
            raise ValueError(
                f"block_len {self.block_len} must be divisible by steps {self.denoise_steps}"
            )
        if self.eos_mode not in ("stop-at-eos-block", "fixed-length"):
            raise ValueError(f"unknown eos_mode {self.eos_mode!r}")


@dataclass
class StepRecord:
    step: int
    positions: list[int]
    tokens: list[int]
    confidences: list[float]


@dataclass
class DecodeTrace:
    steps: list[StepRecord] = field(default_factory=list)
    block_start: int = 0
    final_tokens: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "block_start": self.block_start,
            "final_tokens": self.final_tokens,
            "steps": [
                {
                    "step": s.step,
                    "positions": s.positions,
                    "tokens": s.tokens,
                    "confidences": s.confidences,
                }
                for s in self.steps
            ],
        }


def _softmax_rows(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=1, keepdims=True)


def decode_block(
    model: ModelParams,
    context: np.ndarray,
    cfg: DecodeConfig,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, DecodeTrace]:
    """Denoise the next block after `context`, committing K/S tokens per step.

    If the context ends mid-block (unaligned prompt), only the remainder of
    the current grid block is generated, with proportionally fewer steps.
    """
    mcfg = model.config
    context = np.asarray(context, dtype=np.int64)
    K = cfg.block_len
    grid_start = (context.size // K) * K
    fill = grid_start + K - context.size
    if context.size + fill > mcfg.max_seq_len:
        raise ValueError(
            f"context of {context.size} plus {fill} new tokens exceeds "
            f"max_seq_len {mcfg.max_seq_len}"
        )
    quota = K // cfg.denoise_steps
    tokens = np.concatenate([context, np.full(fill, mcfg.mask_token_id, dtype=np.int64)])
    attn = build_block_causal_mask(tokens.size, K)
    trace = DecodeTrace(block_start=int(context.size))

    pending = list(range(context.size, tokens.size))
    step = 0
    while pending:
        with T.no_grad():
            logits = forward(model, tokens, attn)
        rows = logits.values[pending].copy()
        rows[:, mcfg.mask_token_id] = -np.inf  # the mask token is never emitted
        probs = _softmax_rows(rows)
        best = probs.argmax(axis=1)
        conf = probs[np.arange(best.size), best]
        order = sorted(range(best.size), key=lambda i: (-conf[i], pending[i]))
        commit = sorted(order[: min(quota, len(pending))], key=lambda i: pending[i])
        rec = StepRecord(step=step, positions=[], tokens=[], confidences=[])
        for i in commit:
            pos = pending[i]
            tokens[pos] = int(best[i])
            rec.positions.append(pos)
            rec.tokens.append(int(best[i]))
            rec.confidences.append(float(conf[i]))
        pending = [p for p in pending if p not in rec.positions]
        trace.steps.append(rec)
        step += 1

    block = tokens[context.size:]
    trace.final_tokens = [int(t) for t in block]
    return block, trace


def decode_sequence(
    model: ModelParams,
    prompt: np.ndarray,
    cfg: DecodeConfig,
    rng: np.random.Generator | None = None,
    collect_traces: bool = False,
) -> tuple[np.ndarray, list[DecodeTrace]]:
    """Append decoded blocks after the prompt until eos or the block budget.

    In stop-at-eos-block mode the output is truncated right after the first
    eos token of the block that produced one. Stops early (without error)
    when another block would not fit in max_seq_len.
    """
    mcfg = model.config
    out = np.asarray(prompt, dtype=np.int64).copy()
    traces: list[DecodeTrace] = []
    for _ in range(cfg.max_new_blocks):
        grid_start = (out.size // cfg.block_len) * cfg.block_len
        fill = grid_start + cfg.block_len - out.size
        if out.size + fill > mcfg.max_seq_len:
            break
        block, trace = decode_block(model, out, cfg, rng)
        out = np.concatenate([out, block])
        if collect_traces:
            traces.append(trace)
        if cfg.eos_mode == "stop-at-eos-block" and np.any(block == mcfg.eos_id):
            first = int(np.where(out[-block.size:] == mcfg.eos_id)[0][0])
            out = out[: out.size - block.size + first + 1]
            break
    return out, traces


def reference_ar_greedy(
    model: ModelParams,
    prompt: np.ndarray,
    max_new_tokens: int,
    stop_at_eos: bool = True,
) -> np.ndarray:
    """Token-by-token greedy loop: append one mask, take its argmax, repeat."""
    mcfg = model.config
    out = np.asarray(prompt, dtype=np.int64).copy()
    for _ in range(max_new_tokens):
        if out.size + 1 > mcfg.max_seq_len:
            break
        tokens = np.concatenate([out, [mcfg.mask_token_id]])
        attn = build_block_causal_mask(tokens.size, 1)
        with T.no_grad():
            logits = forward(model, tokens, attn)
        row = logits.values[-1].copy()
        row[mcfg.mask_token_id] = -np.inf
        nxt = int(np.argmax(row))
        out = np.concatenate([out, [nxt]])
        if stop_at_eos and nxt == mcfg.eos_id:
            break
    return out


def write_trace(path: str, traces: list[DecodeTrace]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([t.to_dict() for t in traces], fh, indent=2)
