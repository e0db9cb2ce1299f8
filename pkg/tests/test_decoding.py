import numpy as np
import pytest

from blockdiff.decoding import (
    DecodeConfig,
    decode_block,
    decode_sequence,
    reference_ar_greedy,
)
from blockdiff.model import ModelConfig, init_params
from blockdiff.schedule import derive_rng


def model_for(seed=0, vocab=16, max_seq_len=64, block_len=4, head_scale=0.1):
    cfg = ModelConfig(
        vocab_size=vocab, embed_dim=16, num_layers=1, num_heads=2,
        max_seq_len=max_seq_len, block_len=block_len,
        mask_token_id=1, think_open_id=2, think_close_id=3, eos_id=4,
    )
    return init_params(cfg, derive_rng(seed, 0), head_scale=head_scale)


def test_decode_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        DecodeConfig(block_len=4, denoise_steps=3)
    with pytest.raises(ValueError, match="steps"):
        DecodeConfig(block_len=4, denoise_steps=5)
    with pytest.raises(ValueError, match="eos_mode"):
        DecodeConfig(eos_mode="nope")


def test_single_step_fills_whole_block():
    model = model_for()
    ctx = np.array([5, 6, 7, 8], dtype=np.int64)
    block, trace = decode_block(model, ctx, DecodeConfig(block_len=4, denoise_steps=1))
    assert block.size == 4
    assert len(trace.steps) == 1
    assert sorted(trace.steps[0].positions) == [4, 5, 6, 7]


def test_one_commitment_per_step_when_steps_equal_block():
    model = model_for()
    ctx = np.array([5, 6, 7, 8], dtype=np.int64)
    block, trace = decode_block(model, ctx, DecodeConfig(block_len=4, denoise_steps=4))
    assert block.size == 4
    assert len(trace.steps) == 4
    committed = []
    for s in trace.steps:
        assert len(s.positions) == 1
        committed.extend(s.positions)
    assert sorted(committed) == [4, 5, 6, 7]


def test_decode_trace_is_deterministic():
    model = model_for(seed=2)
    ctx = np.array([5, 6, 7, 8], dtype=np.int64)
    cfg = DecodeConfig(block_len=4, denoise_steps=4)
    b1, t1 = decode_block(model, ctx, cfg)
    b2, t2 = decode_block(model, ctx, cfg)
    assert np.array_equal(b1, b2)
    assert t1.to_dict() == t2.to_dict()


def test_mask_token_is_never_emitted():
    for seed in range(5):
        model = model_for(seed=seed, head_scale=0.3)
        out, _ = decode_sequence(model, np.array([5, 6, 7, 8]),
                                 DecodeConfig(block_len=4, denoise_steps=2, max_new_blocks=4,
                                              eos_mode="fixed-length"))
        assert not np.any(out == model.config.mask_token_id)


def test_max_new_blocks_zero_returns_prompt():
    model = model_for()
    prompt = np.array([5, 6, 7, 8], dtype=np.int64)
    out, traces = decode_sequence(model, prompt, DecodeConfig(max_new_blocks=0))
    assert np.array_equal(out, prompt)
    assert traces == []


def test_stop_at_eos_truncates_after_eos():
    model = model_for(seed=3)
    # Bias the head so eos wins everywhere: decoding must stop after the
    # first block and cut right after the eos token.
    model["head.b"].values[model.config.eos_id] = 50.0
    prompt = np.array([5, 6, 7, 8], dtype=np.int64)
    out, _ = decode_sequence(model, prompt,
                             DecodeConfig(block_len=4, denoise_steps=4, max_new_blocks=8))
    assert out[-1] == model.config.eos_id
    assert out.size == prompt.size + 1


def test_fixed_length_mode_ignores_eos():
    model = model_for(seed=3)
    model["head.b"].values[model.config.eos_id] = 50.0
    prompt = np.array([5, 6, 7, 8], dtype=np.int64)
    out, _ = decode_sequence(model, prompt,
                             DecodeConfig(block_len=4, denoise_steps=4, max_new_blocks=3,
                                          eos_mode="fixed-length"))
    assert out.size == prompt.size + 3 * 4


def test_context_overflow_raises():
    model = model_for(max_seq_len=8)
    with pytest.raises(ValueError, match="max_seq_len"):
        decode_block(model, np.array([5] * 8), DecodeConfig(block_len=4, denoise_steps=1))


def test_decode_sequence_stops_before_overflow():
    model = model_for(max_seq_len=12)
    out, _ = decode_sequence(model, np.array([5, 6, 7, 8]),
                             DecodeConfig(block_len=4, denoise_steps=1, max_new_blocks=99,
                                          eos_mode="fixed-length"))
    assert out.size == 12


def test_unaligned_prompt_fills_to_grid_boundary():
    model = model_for()
    ctx = np.array([5, 6], dtype=np.int64)
    block, trace = decode_block(model, ctx, DecodeConfig(block_len=4, denoise_steps=4))
    assert block.size == 2  # completes the first grid block
    assert trace.block_start == 2


def test_degenerate_block_decoding_equals_ar_greedy():
    for seed in range(6):
        model = model_for(seed=seed, head_scale=0.2, block_len=1)
        prompt = derive_rng(seed, 7).integers(5, 16, size=4)
        blockwise, _ = decode_sequence(
            model, prompt,
            DecodeConfig(block_len=1, denoise_steps=1, max_new_blocks=12,
                         eos_mode="stop-at-eos-block"),
        )
        ar = reference_ar_greedy(model, prompt, max_new_tokens=12)
        assert np.array_equal(blockwise, ar)
