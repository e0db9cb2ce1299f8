"""Corruption-level samplers and the progressive Beta curriculum.

Four scheduler kinds are supported: a synchronous uniform schedule (one
ratio shared by all blocks of a sample), an asynchronous uniform schedule
(independent per-block ratios), a clamped uniform variant restricted to a
high-noise band, and a Beta schedule whose mean and concentration ramp
linearly over a warmup horizon.

Ratios live in (0, 1]: the uniform samplers reject exact-zero draws since
inverse-ratio loss scaling is undefined at 0.

RNG streams are derived from a master seed with numpy's SeedSequence
spawn-key mechanism via `derive_rng(master_seed, *path)`; distinct paths
give statistically independent streams. Training uses one stream per
(ablation arm, block index), with synchronous draws taken from the block-0
stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# Fixed path tags for derive_rng so stream purposes never collide.
STREAM_INIT = 0
STREAM_DATA = 1
STREAM_NOISE = 2
STREAM_EVAL = 3
STREAM_THEORY = 4
STREAM_BOOTSTRAP = 5


def derive_rng(master_seed: int, *path: int) -> np.random.Generator:
    """Independent generator for a (seed, path) pair; same pair, same stream."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=tuple(path)))


@dataclass(frozen=True)
class BetaSchedule:
    """Linear ramp of the Beta mean and concentration over a warmup horizon.

    At normalized progress u = min(step / warmup_steps, 1):
        mu_u = mu_start + u * (mu_final - mu_start)
        c_u  = c_start + u * (c_final - c_start)
    and the Beta parameters are alpha = mu_u * c_u, beta = (1 - mu_u) * c_u.
    """

    mu_start: float = 0.5
    mu_final: float = 0.8
    c_start: float = 2.0
    c_final: float = 25.0
    warmup_steps: int = 1

    def __post_init__(self):
        for mu in (self.mu_start, self.mu_final):
            if not 0.0 < mu < 1.0:
                raise ValueError(f"Beta means must lie in (0,1), got {mu}")
        for c in (self.c_start, self.c_final):
            if c <= 0.0:
                raise ValueError(f"concentrations must be positive, got {c}")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")

    def params_at(self, step: int) -> tuple[float, float, float, float]:
        """(alpha, beta, mu, concentration) at a training step."""
        if step < 0:
            raise ValueError(f"step must be >= 0, got {step}")
        u = min(step / self.warmup_steps, 1.0)
        mu = self.mu_start + u * (self.mu_final - self.mu_start)
        c = self.c_start + u * (self.c_final - self.c_start)
        return mu * c, (1.0 - mu) * c, mu, c


def beta_params_at(sched: BetaSchedule, step: int) -> tuple[float, float, float, float]:
    return sched.params_at(step)


@dataclass(frozen=True)
class SchedulerKind:
    """One of: sns-uniform, abns-uniform, abns-clamp, abns-beta."""

    kind: str
    clamp_lo: float = 0.45
    clamp_hi: float = 0.95
    beta: BetaSchedule | None = None

    KINDS = ("sns-uniform", "abns-uniform", "abns-clamp", "abns-beta")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown scheduler kind {self.kind!r}; expected one of {self.KINDS}")
        if self.kind == "abns-clamp" and not (0.0 < self.clamp_lo < self.clamp_hi <= 1.0):
            raise ValueError(f"clamp bounds must satisfy 0 < lo < hi <= 1, got "
                             f"({self.clamp_lo}, {self.clamp_hi})")
        if self.kind == "abns-beta" and self.beta is None:
            raise ValueError("abns-beta requires a BetaSchedule")

    @property
    def synchronous(self) -> bool:
        return self.kind == "sns-uniform"

    def describe(self) -> str:
        if self.kind == "abns-clamp":
            return f"abns-clamp({self.clamp_lo},{self.clamp_hi})"
        if self.kind == "abns-beta":
            b = self.beta
            return (f"abns-beta(mu={b.mu_start}->{b.mu_final},"
                    f"c={b.c_start}->{b.c_final},warmup={b.warmup_steps})")
        return self.kind


@dataclass(frozen=True)
class NoiseDraw:
    """One block's corruption: sampled ratio, realized mask, effective ratio.

    `mask` is boolean over the block's positions (True = replaced by the
    mask token); t_prime is exactly popcount(mask)/len(mask). `start` is the
    block's absolute offset within its (possibly packed) token row.
    """

    t_b: float
    mask: np.ndarray
    t_prime: float
    block_index: int
    start: int = 0

    @classmethod
    def from_mask(cls, t_b: float, mask: np.ndarray, block_index: int, start: int = 0) -> "NoiseDraw":
        mask = np.asarray(mask, dtype=bool)
        return cls(
            t_b=float(t_b),
            mask=mask,
            t_prime=float(int(mask.sum())) / mask.size,
            block_index=block_index,
            start=start,
        )

    @property
    def block_len(self) -> int:
        return self.mask.size


def _uniform_open(rng: np.random.Generator) -> float:
    # U(0,1) with exact-zero draws rejected: 1/t must stay finite.
    while True:
        t = float(rng.random())
        if t > 0.0:
            return t


def _gamma_sample(rng: np.random.Generator, shape: float) -> float:
    """Marsaglia-Tsang (2000) squeeze-rejection Gamma(shape, 1) sampler.

    For shape < 1 uses the boost Gamma(shape) = Gamma(shape+1) * U^(1/shape).
    """
    if shape < 1.0:
        return _gamma_sample(rng, shape + 1.0) * float(rng.random()) ** (1.0 / shape)
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = float(rng.standard_normal())
        v = (1.0 + c * x) ** 3
        if v <= 0.0:
            continue
        u = float(rng.random())
        if u < 1.0 - 0.0331 * x**4:
            return d * v
        if math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
            return d * v


def beta_sample(rng: np.random.Generator, alpha: float, beta: float) -> float:
    """Beta(alpha, beta) via the two-Gamma-ratio construction, kept in (0, 1]."""
    while True:
        x = _gamma_sample(rng, alpha)
        y = _gamma_sample(rng, beta)
        if x + y > 0.0:
            t = x / (x + y)
            if t > 0.0:
                return min(t, 1.0)


def _draw_one(rng: np.random.Generator, kind: SchedulerKind, step: int) -> float:
    if kind.kind in ("sns-uniform", "abns-uniform"):
        return _uniform_open(rng)
    if kind.kind == "abns-clamp":
        return kind.clamp_lo + (kind.clamp_hi - kind.clamp_lo) * float(rng.random())
    alpha, beta, _, _ = kind.beta.params_at(step)
    return beta_sample(rng, alpha, beta)


def sample_sync(rng: np.random.Generator, num_blocks: int) -> list[float]:
    """One uniform ratio shared by all blocks."""
    if num_blocks < 1:
        raise ValueError("num_blocks must be >= 1")
    t = _uniform_open(rng)
    return [t] * num_blocks


def sample_async(
    rng: np.random.Generator | Sequence[np.random.Generator],
    num_blocks: int,
    kind: SchedulerKind,
    step: int = 0,
) -> list[float]:
    """Independent per-block ratios from the step's distribution.

    `rng` may be a single generator or one generator per block index (the
    per-(arm, block) stream layout used in training).
    """
    if num_blocks < 1:
        raise ValueError("num_blocks must be >= 1")
    if isinstance(rng, np.random.Generator):
        streams: Sequence[np.random.Generator] = [rng] * num_blocks
    else:
        if len(rng) < num_blocks:
            raise ValueError(f"need {num_blocks} streams, got {len(rng)}")
        streams = rng
    return [_draw_one(streams[b], kind, step) for b in range(num_blocks)]


def realize_mask(rng: np.random.Generator, t: float, block_len: int) -> NoiseDraw:
    """Independent Bernoulli(t) masking of a block."""
    if not 0.0 < t <= 1.0:
        raise ValueError(f"mask ratio must be in (0,1], got {t}")
    if block_len < 1:
        raise ValueError("block_len must be >= 1")
    mask = rng.random(block_len) < t
    return NoiseDraw.from_mask(t, mask, block_index=0)
