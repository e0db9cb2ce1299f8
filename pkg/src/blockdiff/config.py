"""Run configuration: flat key-value config files plus CLI overrides.

Config files hold one `section.key = value` per line; `#` starts a comment
(full-line or trailing) and blank lines are ignored. `--set section.key=value`
flags override file values, and the BLOCKDIFF_SEED environment variable
overrides `train.seed` last.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

from .model import ModelConfig
from .data import EOS_ID, MASK_ID, THINK_CLOSE_ID, THINK_OPEN_ID, VOCAB_SIZE
from .schedule import BetaSchedule, SchedulerKind

ENV_SEED = "BLOCKDIFF_SEED"


class ConfigError(ValueError):
    pass


def parse_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected 'section.key = value'")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if "." not in key or not value:
                raise ConfigError(f"{path}:{line_no}: expected 'section.key = value'")
            out[key] = value
    return out


def parse_overrides(pairs: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects section.key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        out[key.strip()] = value.strip()
    return out


def _coerce(value: str, like) -> object:
    if isinstance(like, bool):
        low = value.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


@dataclass
class RunConfig:
    # model
    embed_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    max_seq_len: int = 256
    block_len: int = 16
    # scheduler
    scheduler_kind: str = "abns-uniform"
    clamp_lo: float = 0.45
    clamp_hi: float = 0.95
    mu_start: float = 0.5
    mu_final: float = 0.8
    c_start: float = 2.0
    c_final: float = 25.0
    warmup_frac: float = 0.6
    # loss
    rule: str = "effective-ratio"
    skip_zero_mask_blocks: bool = True
    aggregation: str = "block-mean"
    # decode
    decode_block_len: int = 4
    decode_steps: int = 4
    decode_max_blocks: int = 16
    decode_eos_mode: str = "stop-at-eos-block"
    # train
    seed: int = 1234
    steps: int = 2000
    lr: float = 3e-4
    batch_size: int = 8
    corpus: str = ""
    out_dir: str = "runs/out"
    checkpoint_every: int = 500
    holdout_frac: float = 0.05
    variance_window: int = 100
    # eval
    eval_samples: int = 64
    eval_masks_per_t: int = 2
    eval_t_grid: str = "0.25,0.5,0.75,1.0"

    _KEYMAP = {
        "model.embed_dim": "embed_dim",
        "model.num_layers": "num_layers",
        "model.num_heads": "num_heads",
        "model.max_seq_len": "max_seq_len",
        "model.block_len": "block_len",
        "scheduler.kind": "scheduler_kind",
        "scheduler.clamp_lo": "clamp_lo",
        "scheduler.clamp_hi": "clamp_hi",
        "scheduler.mu_start": "mu_start",
        "scheduler.mu_final": "mu_final",
        "scheduler.c_start": "c_start",
        "scheduler.c_final": "c_final",
        "scheduler.warmup_frac": "warmup_frac",
        "loss.rule": "rule",
        "loss.skip_zero_mask_blocks": "skip_zero_mask_blocks",
        "loss.aggregation": "aggregation",
        "decode.block_len": "decode_block_len",
        "decode.steps": "decode_steps",
        "decode.max_blocks": "decode_max_blocks",
        "decode.eos_mode": "decode_eos_mode",
        "train.seed": "seed",
        "train.steps": "steps",
        "train.lr": "lr",
        "train.batch_size": "batch_size",
        "train.corpus": "corpus",
        "train.out_dir": "out_dir",
        "train.checkpoint_every": "checkpoint_every",
        "train.holdout_frac": "holdout_frac",
        "train.variance_window": "variance_window",
        "eval.samples": "eval_samples",
        "eval.masks_per_t": "eval_masks_per_t",
        "eval.t_grid": "eval_t_grid",
    }

    @classmethod
    def from_sources(cls, config_path: str | None = None,
                     overrides: list[str] | None = None) -> "RunConfig":
        cfg = cls()
        values: dict[str, str] = {}
        if config_path:
            values.update(parse_config_file(config_path))
        values.update(parse_overrides(overrides or []))
        for key, value in values.items():
            attr = cls._KEYMAP.get(key)
            if attr is None:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, attr, _coerce(value, getattr(cfg, attr)))
        env_seed = os.environ.get(ENV_SEED)
        if env_seed is not None:
            cfg.seed = int(env_seed)
        return cfg

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=VOCAB_SIZE,
            embed_dim=self.embed_dim,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            max_seq_len=self.max_seq_len,
            block_len=self.block_len,
            mask_token_id=MASK_ID,
            think_open_id=THINK_OPEN_ID,
            think_close_id=THINK_CLOSE_ID,
            eos_id=EOS_ID,
        )

    def scheduler_kind_obj(self, kind: str | None = None) -> SchedulerKind:
        kind = kind or self.scheduler_kind
        if kind == "abns-beta":
            warmup = max(1, int(round(self.warmup_frac * self.steps)))
            return SchedulerKind(kind, beta=BetaSchedule(
                mu_start=self.mu_start, mu_final=self.mu_final,
                c_start=self.c_start, c_final=self.c_final,
                warmup_steps=warmup,
            ))
        return SchedulerKind(kind, clamp_lo=self.clamp_lo, clamp_hi=self.clamp_hi)

    def eval_t_values(self) -> list[float]:
        return [float(x) for x in self.eval_t_grid.split(",") if x.strip()]

    def to_dict(self) -> dict:
        inverse = {attr: key for key, attr in self._KEYMAP.items()}
        return {inverse[f.name]: getattr(self, f.name)
                for f in fields(self) if f.name in inverse}
