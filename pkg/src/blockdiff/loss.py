"""Training objectives for block-wise masked diffusion.

A sample's blocks are its positions partitioned into `block_len` runs from
the sample start (ragged final block allowed). Corruption masks supervised
positions per the block's noise draw; prompt positions are conditioning
only and are never corrupted or supervised. Chain-of-thought delimiter
tokens are corrupted unconditionally and always supervised.

Two scaling rules divide each block's summed masked-token NLL either by the
sampled ratio t_b or by the realized ratio t'_b (effective mask ratio
scaling). Blocks where no supervised position got masked contribute
nothing; by default they are also dropped from the batch denominator
(`num_skipped` records how often).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .data import TokenSequence
from .schedule import NoiseDraw, realize_mask

RULES = ("sampled-ratio", "effective-ratio")
AGGREGATIONS = ("block-mean", "token-mean")


@dataclass
class SupervisionMask:
    """Per-position loss weights plus the always-corrupted token set."""

    loss_weight: np.ndarray
    always_mask_ids: frozenset[int] = frozenset()

    def __post_init__(self):
        self.loss_weight = np.asarray(self.loss_weight, dtype=np.float64)

    def supervisable(self) -> np.ndarray:
        return self.loss_weight > 0.0


def make_supervision(tokens: np.ndarray, prompt_len: int,
                     always_mask_ids: Iterable[int] = ()) -> SupervisionMask:
    """Weight 1 on the response span, 0 on the prompt; always-mask token
    positions get weight 1 regardless."""
    tokens = np.asarray(tokens, dtype=np.int64)
    ids = frozenset(int(i) for i in always_mask_ids)
    weight = (np.arange(tokens.size) >= prompt_len).astype(np.float64)
    for tok in ids:
        weight[tokens == tok] = 1.0
    return SupervisionMask(loss_weight=weight, always_mask_ids=ids)


def block_spans(offset: int, length: int, block_len: int) -> list[tuple[int, int]]:
    """Absolute (start, stop) spans of a sample's blocks; final one ragged."""
    if block_len < 1:
        raise ValueError("block_len must be >= 1")
    return [(offset + s, offset + min(s + block_len, length))
            for s in range(0, length, block_len)]


def make_noise_draws(
    streams: Sequence[np.random.Generator],
    ts: Sequence[float],
    spans: Sequence[tuple[int, int]],
    tokens: np.ndarray,
    sup: SupervisionMask,
) -> list[NoiseDraw]:
    """Realize one draw per block of a sample.

    The Bernoulli mask is restricted to supervisable positions and widened
    to cover always-mask tokens, so each draw's t_prime is exactly the
    fraction of the block that actually gets corrupted.
    """
    if not (len(ts) == len(spans) <= len(streams)):
        raise ValueError(f"need {len(spans)} ratios and streams, got "
                         f"{len(ts)} ratios / {len(streams)} streams")
    tokens = np.asarray(tokens, dtype=np.int64)
    always = np.isin(tokens, sorted(sup.always_mask_ids)) if sup.always_mask_ids else None
    draws = []
    for local_b, ((s, e), t) in enumerate(zip(spans, ts)):
        raw = realize_mask(streams[local_b], t, e - s)
        mask = raw.mask & sup.supervisable()[s:e]
        if always is not None:
            mask |= always[s:e]
        draws.append(NoiseDraw.from_mask(t, mask, block_index=local_b, start=s))
    return draws


def apply_corruption(
    tokens: np.ndarray,
    draws: Sequence[NoiseDraw],
    sup: SupervisionMask,
    mask_token_id: int,
) -> np.ndarray:
    """Replace masked positions with the mask token.

    Prompt/context positions are never corrupted; positions holding
    always-mask tokens are corrupted unconditionally.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    corrupted = tokens.copy()
    maskable = sup.supervisable()
    for d in draws:
        s, e = d.start, d.start + d.block_len
        apply = d.mask & maskable[s:e]
        corrupted[s:e][apply] = mask_token_id
    if sup.always_mask_ids:
        corrupted[np.isin(tokens, sorted(sup.always_mask_ids))] = mask_token_id
    return corrupted


@dataclass
class PerBlockLoss:
    block_index: int
    start: int
    ell_b: float
    t_b: float
    t_prime: float
    scaled: float | None
    num_masked_supervised: int


@dataclass
class LossBreakdown:
    per_block: list[PerBlockLoss]
    batch_loss: float
    num_skipped: int
    num_supervised_tokens: int
    rule: str
    aggregation: str
    loss: T.Tensor
    loss_sum: T.Tensor
    num_active_blocks: int


def bd3_loss(
    logits: T.Tensor,
    targets: np.ndarray,
    draws: Sequence[NoiseDraw],
    sup: SupervisionMask,
    rule: str = "sampled-ratio",
    aggregation: str = "block-mean",
    skip_zero_mask_blocks: bool = True,
    sample_spans: Sequence[tuple[int, int]] | None = None,
) -> LossBreakdown:
    """Per-block NLL over masked supervised positions, inverse-ratio scaled.

    rule selects the denominator: the sampled ratio t_b or the realized
    ratio t'_b. Skipped blocks (nothing supervised got masked) carry no
    scaled entry; with skip_zero_mask_blocks the batch mean runs over the
    contributing blocks only, otherwise over every block that had at least
    one supervisable position.

    With `sample_spans` (packed rows), block losses are summed per sample
    first and the per-sample sums are then added, so a packed row's total is
    bit-identical to summing the samples' standalone totals.
    """
    if rule not in RULES:
        raise ValueError(f"unknown rule {rule!r}; expected one of {RULES}")
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    targets = np.asarray(targets, dtype=np.int64)

    def span_of(d: NoiseDraw) -> int:
        if sample_spans is None:
            return 0
        for gi, (gs, ge) in enumerate(sample_spans):
            if gs <= d.start < ge:
                return gi
        raise ValueError(f"draw at {d.start} outside every sample span")

    per_block: list[PerBlockLoss] = []
    grouped_terms: dict[int, list[T.Tensor]] = {}
    num_skipped = 0
    num_supervised_tokens = 0
    num_active = 0
    num_eligible = 0
    for d in draws:
        s, e = d.start, d.start + d.block_len
        weights = d.mask * sup.loss_weight[s:e]
        n_masked = int(np.count_nonzero(weights))
        if np.any(sup.loss_weight[s:e] > 0.0):
            num_eligible += 1
        if n_masked == 0:
            num_skipped += 1
            per_block.append(PerBlockLoss(d.block_index, d.start, 0.0, d.t_b,
                                          d.t_prime, None, 0))
            continue
        if rule == "effective-ratio" and d.t_prime == 0.0:
            raise RuntimeError("effective-ratio with t_prime=0 on a supervised block")
        ell = T.softmax_cross_entropy(T.slice_rows(logits, s, e), targets[s:e], weights)
        denom = d.t_b if rule == "sampled-ratio" else d.t_prime
        scaled = T.scale(ell, 1.0 / denom)
        grouped_terms.setdefault(span_of(d), []).append(scaled)
        num_active += 1
        num_supervised_tokens += n_masked
        per_block.append(PerBlockLoss(d.block_index, d.start, ell.item(), d.t_b,
                                      d.t_prime, scaled.item(), n_masked))

    def fold(terms: list[T.Tensor]) -> T.Tensor:
        acc = terms[0]
        for term in terms[1:]:
            acc = T.add(acc, term)
        return acc

    group_sums = [fold(grouped_terms[g]) for g in sorted(grouped_terms)]
    loss_sum = fold(group_sums) if group_sums else T.Tensor(0.0)

    if skip_zero_mask_blocks:
        denom_blocks = num_active
    else:
        denom_blocks = num_eligible
    if aggregation == "block-mean":
        scale_by = 1.0 / denom_blocks if denom_blocks else 0.0
    else:
        scale_by = 1.0 / num_supervised_tokens if num_supervised_tokens else 0.0
    loss = T.scale(loss_sum, scale_by)

    return LossBreakdown(
        per_block=per_block,
        batch_loss=loss.item(),
        num_skipped=num_skipped,
        num_supervised_tokens=num_supervised_tokens,
        rule=rule,
        aggregation=aggregation,
        loss=loss,
        loss_sum=loss_sum,
        num_active_blocks=num_active,
    )


@dataclass
class Pack:
    """One packed training row."""

    tokens: np.ndarray
    sample_indices: list[int]
    offsets: list[int]
    boundaries: list[int]
    supervision: SupervisionMask
    samples: list[TokenSequence] = field(default_factory=list)

    def sample_spans(self) -> list[tuple[int, int]]:
        ends = self.boundaries + [int(self.tokens.size)]
        return list(zip(self.offsets, ends))


class OversizedSampleError(ValueError):
    def __init__(self, index: int, length: int, capacity: int):
        super().__init__(f"sample {index} has {length} tokens, capacity is {capacity}")
        self.index = index


def pack_samples(
    samples: Sequence[TokenSequence],
    capacity: int,
    always_mask_ids: Iterable[int] = (),
) -> list[Pack]:
    """First-fit-decreasing assignment of samples to fixed-capacity rows.

    Bin assignment considers samples in decreasing length; within a pack
    samples keep their original input order. No sample is ever split.
    """
    for i, s in enumerate(samples):
        if len(s) > capacity:
            raise OversizedSampleError(i, len(s), capacity)

    order = sorted(range(len(samples)), key=lambda i: (-len(samples[i]), i))
    bins: list[list[int]] = []
    space: list[int] = []
    for i in order:
        need = len(samples[i])
        for b, free in enumerate(space):
            if need <= free:
                bins[b].append(i)
                space[b] -= need
                break
        else:
            bins.append([i])
            space.append(capacity - need)

    packs: list[Pack] = []
    for members in sorted(bins, key=min):
        members = sorted(members)
        offsets, weights, token_parts = [], [], []
        pos = 0
        for i in members:
            seq = samples[i]
            offsets.append(pos)
            token_parts.append(seq.tokens)
            weights.append(make_supervision(seq.tokens, seq.prompt_len,
                                            always_mask_ids).loss_weight)
            pos += len(seq)
        packs.append(Pack(
            tokens=np.concatenate(token_parts),
            sample_indices=members,
            offsets=offsets,
            boundaries=offsets[1:],
            supervision=SupervisionMask(
                loss_weight=np.concatenate(weights),
                always_mask_ids=frozenset(int(i) for i in always_mask_ids),
            ),
            samples=[samples[i] for i in members],
        ))
    return packs


def shift_draws(draws: Sequence[NoiseDraw], delta: int) -> list[NoiseDraw]:
    """Relocate draws by a fixed offset (for packed/unpacked comparisons)."""
    return [NoiseDraw(d.t_b, d.mask, d.t_prime, d.block_index, d.start + delta)
            for d in draws]
