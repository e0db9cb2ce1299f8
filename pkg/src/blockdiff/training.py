"""Training loop, ablation arms, and diagnostics.

An ablation arm is a (noise scheduler, scaling rule) pair. All arms of a
run share the master seed, the initial parameters, and the exact batch
order; only the per-arm noise streams differ, and those are keyed by the
arm's configuration (two arms configured identically train identically,
bit for bit, apart from wall-clock).

Held-out NLL is the unscaled per-token reconstruction loss on a frozen set
of evaluation corruptions (fixed t grid, fixed masks derived from the
master seed), so arm comparisons see identical eval noise.
"""

from __future__ import annotations

import csv
import json
import os
import time
import zlib
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import MASK_ID, THINK_CLOSE_ID, THINK_OPEN_ID, TokenSequence, ingest_corpus
from .loss import (
    Pack,
    apply_corruption,
    bd3_loss,
    block_spans,
    make_noise_draws,
    make_supervision,
    pack_samples,
)
from .model import ModelParams, build_block_causal_mask, forward, init_params, save_checkpoint
from .schedule import (
    STREAM_DATA,
    STREAM_EVAL,
    STREAM_INIT,
    STREAM_NOISE,
    SchedulerKind,
    derive_rng,
    sample_async,
    sample_sync,
)
from .stats import sliding_window_variance, spearman

ALWAYS_MASK_IDS = (THINK_OPEN_ID, THINK_CLOSE_ID)

METRICS_HEADER = [
    "step", "arm", "batch_loss", "loss_variance_window", "mean_t_prime",
    "num_skipped", "learning_rate", "wall_clock",
]


class SecondMomentOptimizer:
    """Momentum-free adaptive step: bias-corrected second-moment scaling.

    v <- beta2 v + (1-beta2) g^2;  p <- p - lr * g / (sqrt(v-hat) + eps).
    """

    def __init__(self, model: ModelParams, lr: float, beta2: float = 0.999, eps: float = 1e-8):
        self.model = model
        self.lr = lr
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.v = {name: np.zeros_like(p.values) for name, p in model.named().items()}

    def step(self) -> None:
        self.t += 1
        correction = 1.0 - self.beta2**self.t
        for name, p in self.model.named().items():
            if p.grad is None:
                continue
            v = self.v[name]
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.values -= self.lr * p.grad / (np.sqrt(v / correction) + self.eps)
            if not np.isfinite(p.values).all():
                raise RuntimeError(f"non-finite parameter {name} after step {self.t}")


@dataclass(frozen=True)
class ArmSpec:
    name: str
    scheduler: SchedulerKind
    rule: str

    def stream_key(self) -> int:
        ident = f"{self.scheduler.describe()}|{self.rule}"
        return zlib.crc32(ident.encode()) & 0x7FFFFFFF


def arm_registry(cfg: RunConfig) -> dict[str, ArmSpec]:
    """The standard ablation ladder: each entry adds one component."""

    def beta_kind(c_final: float) -> SchedulerKind:
        warmup = max(1, int(round(cfg.warmup_frac * cfg.steps)))
        from .schedule import BetaSchedule

        return SchedulerKind("abns-beta", beta=BetaSchedule(
            mu_start=cfg.mu_start, mu_final=cfg.mu_final,
            c_start=cfg.c_start, c_final=c_final, warmup_steps=warmup,
        ))

    clamp = SchedulerKind("abns-clamp", clamp_lo=cfg.clamp_lo, clamp_hi=cfg.clamp_hi)
    return {
        "sns": ArmSpec("SNS", SchedulerKind("sns-uniform"), "sampled-ratio"),
        "abns": ArmSpec("ABNS", SchedulerKind("abns-uniform"), "sampled-ratio"),
        "abns-emrs": ArmSpec("ABNS+EMRS", SchedulerKind("abns-uniform"), "effective-ratio"),
        "abns-emrs-clamp": ArmSpec("ABNS+EMRS+Clamp", clamp, "effective-ratio"),
        "abns-emrs-pbnc25": ArmSpec("ABNS+EMRS+PBNC(c=25)", beta_kind(25.0), "effective-ratio"),
        "abns-emrs-pbnc50": ArmSpec("ABNS+EMRS+PBNC(c=50)", beta_kind(50.0), "effective-ratio"),
    }


def split_corpus(samples: list[TokenSequence], holdout_frac: float
                 ) -> tuple[list[TokenSequence], list[TokenSequence]]:
    if holdout_frac <= 0.0 or len(samples) < 2:
        return samples, []
    n_hold = max(1, int(len(samples) * holdout_frac))
    n_hold = min(n_hold, len(samples) - 1)
    return samples[:-n_hold], samples[-n_hold:]


def make_batch_plan(seed: int, steps: int, batch_size: int, n_samples: int) -> list[np.ndarray]:
    rng = derive_rng(seed, STREAM_DATA)
    return [rng.integers(0, n_samples, size=batch_size) for _ in range(steps)]


@dataclass
class TrainResult:
    arm: ArmSpec
    model: ModelParams
    metrics: list[dict]
    checkpoint_path: str
    losses: np.ndarray = field(default_factory=lambda: np.array([]))


def _step_noise(arm: ArmSpec, streams, num_blocks: int, step: int) -> list[float]:
    if arm.scheduler.synchronous:
        return sample_sync(streams[0], num_blocks)
    return sample_async(streams, num_blocks, arm.scheduler, step)


def train_arm(
    cfg: RunConfig,
    arm: ArmSpec,
    train_samples: list[TokenSequence],
    batch_plan: list[np.ndarray],
    out_dir: str,
) -> TrainResult:
    mcfg = cfg.model_config()
    model = init_params(mcfg, derive_rng(cfg.seed, STREAM_INIT))
    opt = SecondMomentOptimizer(model, lr=cfg.lr)
    max_blocks = -(-mcfg.max_seq_len // mcfg.block_len)
    streams = [derive_rng(cfg.seed, STREAM_NOISE, arm.stream_key(), b)
               for b in range(max_blocks)]

    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, f"{arm.name.replace('/', '_')}.ckpt")
    window: deque[float] = deque(maxlen=cfg.variance_window)
    metrics: list[dict] = []
    losses = np.empty(cfg.steps)
    start = time.time()

    for step in range(cfg.steps):
        batch = [train_samples[int(i)] for i in batch_plan[step]]
        packs = pack_samples(batch, mcfg.max_seq_len, ALWAYS_MASK_IDS)

        term_sums: list[T.Tensor] = []
        n_active = 0
        n_skipped = 0
        tprimes: list[float] = []
        for pack in packs:
            attn = build_block_causal_mask(pack.tokens.size, mcfg.block_len, pack.boundaries)
            draws = []
            for (s, e) in pack.sample_spans():
                spans = block_spans(s, e - s, mcfg.block_len)
                ts = _step_noise(arm, streams, len(spans), step)
                draws.extend(make_noise_draws(streams, ts, spans, pack.tokens,
                                              pack.supervision))
            corrupted = apply_corruption(pack.tokens, draws, pack.supervision, MASK_ID)
            logits = forward(model, corrupted, attn)
            br = bd3_loss(
                logits, pack.tokens, draws, pack.supervision,
                rule=arm.rule, aggregation=cfg.aggregation,
                skip_zero_mask_blocks=cfg.skip_zero_mask_blocks,
                sample_spans=pack.sample_spans(),
            )
            if br.num_active_blocks:
                term_sums.append(br.loss_sum)
            n_active += br.num_active_blocks
            n_skipped += br.num_skipped
            sup = pack.supervision.supervisable()
            tprimes.extend(d.t_prime for d in draws if sup[d.start:d.start + d.block_len].any())

        loss_sum = term_sums[0] if term_sums else T.Tensor(0.0)
        for term in term_sums[1:]:
            loss_sum = T.add(loss_sum, term)
        loss = T.scale(loss_sum, 1.0 / n_active if n_active else 0.0)
        batch_loss = loss.item()
        if not np.isfinite(batch_loss):
            raise RuntimeError(f"non-finite loss at step {step} in arm {arm.name}")

        model.zero_grads()
        T.backward(loss)
        opt.step()

        losses[step] = batch_loss
        window.append(batch_loss)
        var = float(np.var(np.array(window), ddof=1)) if len(window) == cfg.variance_window else float("nan")
        metrics.append({
            "step": step,
            "arm": arm.name,
            "batch_loss": batch_loss,
            "loss_variance_window": var,
            "mean_t_prime": float(np.mean(tprimes)) if tprimes else float("nan"),
            "num_skipped": n_skipped,
            "learning_rate": cfg.lr,
            "wall_clock": time.time() - start,
        })
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 and step + 1 < cfg.steps:
            save_checkpoint(os.path.join(out_dir, f"{arm.name.replace('/', '_')}-step{step + 1}.ckpt"), model)

    save_checkpoint(ckpt_path, model)
    return TrainResult(arm=arm, model=model, metrics=metrics,
                       checkpoint_path=ckpt_path, losses=losses)


def write_metrics(path: str, rows: list[dict], append: bool = False) -> None:
    mode = "a" if append and os.path.exists(path) else "w"
    with open(path, mode, encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
        if mode == "w":
            writer.writeheader()
        for row in rows:
            writer.writerow(row)


def evaluate_nll(
    model: ModelParams,
    samples: list[TokenSequence],
    t_values: list[float],
    masks_per_t: int,
    master_seed: int,
    cap: int | None = None,
) -> tuple[float, np.ndarray]:
    """Mean per-token NLL over frozen eval corruptions; also per-sample means.

    Draws are derived from (master_seed, sample, t, repeat) so every model
    evaluated with the same seed sees identical masks.
    """
    mcfg = model.config
    used = samples[:cap] if cap else samples
    per_sample = np.zeros(len(used))
    for si, seq in enumerate(used):
        sup = make_supervision(seq.tokens, seq.prompt_len, ALWAYS_MASK_IDS)
        spans = block_spans(0, len(seq), mcfg.block_len)
        attn = build_block_causal_mask(len(seq), mcfg.block_len)
        total_nll = 0.0
        total_tokens = 0
        for ti, t in enumerate(t_values):
            for r in range(masks_per_t):
                rng = derive_rng(master_seed, STREAM_EVAL, si, ti, r)
                draws = make_noise_draws([rng] * len(spans), [t] * len(spans),
                                         spans, seq.tokens, sup)
                corrupted = apply_corruption(seq.tokens, draws, sup, MASK_ID)
                with T.no_grad():
                    logits = forward(model, corrupted, attn)
                for d in draws:
                    s, e = d.start, d.start + d.block_len
                    w = d.mask * sup.loss_weight[s:e]
                    n = int(np.count_nonzero(w))
                    if n == 0:
                        continue
                    nll = T.softmax_cross_entropy(T.slice_rows(logits, s, e),
                                                  seq.tokens[s:e], w)
                    total_nll += nll.item()
                    total_tokens += n
        per_sample[si] = total_nll / total_tokens if total_tokens else float("nan")
    valid = per_sample[np.isfinite(per_sample)]
    return float(valid.mean()) if valid.size else float("nan"), per_sample


def sweep_loss_vs_t(
    model: ModelParams,
    samples: list[TokenSequence],
    t_grid: list[float],
    masks_per_t: int,
    rng: np.random.Generator,
) -> tuple[list[tuple[float, float]], float]:
    """Mean unscaled per-token NLL at each t, plus the Spearman correlation."""
    if len(t_grid) < 20:
        raise ValueError(f"need at least 20 grid points, got {len(t_grid)}")
    if not all(0.0 < t <= 1.0 for t in t_grid):
        raise ValueError("t grid must lie in (0, 1]")
    mcfg = model.config
    rows: list[tuple[float, float]] = []
    for t in t_grid:
        total_nll = 0.0
        total_tokens = 0.0
        for seq in samples:
            sup = make_supervision(seq.tokens, seq.prompt_len, ALWAYS_MASK_IDS)
            spans = block_spans(0, len(seq), mcfg.block_len)
            attn = build_block_causal_mask(len(seq), mcfg.block_len)
            for _ in range(masks_per_t):
                draws = make_noise_draws([rng] * len(spans), [t] * len(spans),
                                         spans, seq.tokens, sup)
                corrupted = apply_corruption(seq.tokens, draws, sup, MASK_ID)
                with T.no_grad():
                    logits = forward(model, corrupted, attn)
                for d in draws:
                    s, e = d.start, d.start + d.block_len
                    w = d.mask * sup.loss_weight[s:e]
                    n = int(np.count_nonzero(w))
                    if n == 0:
                        continue
                    nll = T.softmax_cross_entropy(T.slice_rows(logits, s, e),
                                                  seq.tokens[s:e], w)
                    total_nll += nll.item()
                    total_tokens += n
        # Rounding to the accumulation noise floor lets an exactly uniform
        # predictor rank as all-ties instead of as last-ulp dust.
        mean = round(total_nll / total_tokens, 8) if total_tokens else float("nan")
        rows.append((t, mean))
    rho = spearman(np.array([r[0] for r in rows]), np.array([r[1] for r in rows]))
    return rows, rho


def run_ablation(cfg: RunConfig, arm_keys: list[str], out_dir: str | None = None) -> dict:
    """Train the requested arms under one budget and compare held-out NLL.

    Arms share the seed, the initialization, and the batch order. The
    consolidated report flags arm pairs whose held-out difference is within
    noise (|diff| <= 2 paired standard errors against the first arm).
    """
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    registry = arm_registry(cfg)
    unknown = [k for k in arm_keys if k not in registry]
    if unknown:
        raise ValueError(f"unknown arms {unknown}; known: {sorted(registry)}")

    mcfg = cfg.model_config()
    samples = ingest_corpus(cfg.corpus, max_len=mcfg.max_seq_len)
    train_samples, holdout = split_corpus(samples, cfg.holdout_frac)
    plan = make_batch_plan(cfg.seed, cfg.steps, cfg.batch_size, len(train_samples))

    results: list[TrainResult] = []
    all_rows: list[dict] = []
    for key in arm_keys:
        res = train_arm(cfg, registry[key], train_samples, plan, out_dir)
        results.append(res)
        all_rows.extend(res.metrics)
    write_metrics(os.path.join(out_dir, "metrics.csv"), all_rows)

    eval_set = holdout if holdout else train_samples
    t_values = cfg.eval_t_values()
    arm_rows = []
    per_sample_by_arm = {}
    for res in results:
        mean_nll, per_sample = evaluate_nll(res.model, eval_set, t_values,
                                            cfg.eval_masks_per_t, cfg.seed,
                                            cap=cfg.eval_samples)
        per_sample_by_arm[res.arm.name] = per_sample
        arm_rows.append({
            "arm": res.arm.name,
            "scheduler": res.arm.scheduler.describe(),
            "rule": res.arm.rule,
            "final_train_loss": float(np.mean(res.losses[-min(50, res.losses.size):])),
            "holdout_nll": mean_nll,
            "holdout_sem": float(np.std(per_sample, ddof=1) / np.sqrt(per_sample.size))
            if per_sample.size > 1 else float("nan"),
        })

    baseline = arm_rows[0]
    base_ps = per_sample_by_arm[baseline["arm"]]
    for row in arm_rows:
        ps = per_sample_by_arm[row["arm"]]
        diff = ps - base_ps
        diff_sem = float(np.std(diff, ddof=1) / np.sqrt(diff.size)) if diff.size > 1 else 0.0
        row["nll_vs_baseline"] = float(np.mean(diff))
        row["nll_vs_baseline_sem"] = diff_sem
        row["within_noise_of_baseline"] = bool(abs(np.mean(diff)) <= 2.0 * diff_sem)

    report = {
        "config": cfg.to_dict(),
        "arms": arm_rows,
        "num_train_samples": len(train_samples),
        "num_holdout_samples": len(holdout),
        "checkpoints": {r.arm.name: r.checkpoint_path for r in results},
    }
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(arm_rows[0].keys()))
        writer.writeheader()
        writer.writerows(arm_rows)
    return report


def train(cfg: RunConfig, out_dir: str | None = None) -> TrainResult:
    """Train the single arm described by the config; write metrics + checkpoint."""
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    mcfg = cfg.model_config()
    samples = ingest_corpus(cfg.corpus, max_len=mcfg.max_seq_len)
    train_samples, _ = split_corpus(samples, cfg.holdout_frac)
    plan = make_batch_plan(cfg.seed, cfg.steps, cfg.batch_size, len(train_samples))
    arm = ArmSpec("train", cfg.scheduler_kind_obj(), cfg.rule)
    res = train_arm(cfg, arm, train_samples, plan, out_dir)
    write_metrics(os.path.join(out_dir, "metrics.csv"), res.metrics)
    return res
