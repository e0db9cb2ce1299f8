import numpy as np
import pytest

from blockdiff import tensor as T
from blockdiff.model import (
    ModelConfig,
    build_block_causal_mask,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from fd import finite_difference_gradient, max_rel_error


def tiny_config(**overrides):
    base = dict(
        vocab_size=11,
        embed_dim=8,
        num_layers=1,
        num_heads=2,
        max_seq_len=16,
        block_len=2,
        mask_token_id=7,
        think_open_id=8,
        think_close_id=9,
        eos_id=10,
    )
    base.update(overrides)
    return ModelConfig(**base)


def test_mask_two_blocks_of_two():
    m = build_block_causal_mask(4, 2)
    assert np.array_equal(np.where(m.allowed[0])[0], [0, 1])
    assert np.array_equal(np.where(m.allowed[2])[0], [0, 1, 2, 3])


def test_mask_single_block_is_fully_bidirectional():
    m = build_block_causal_mask(4, 4)
    assert m.allowed.all()


def test_mask_block_len_one_is_strictly_causal():
    m = build_block_causal_mask(4, 1)
    assert np.array_equal(m.allowed, np.tril(np.ones((4, 4), dtype=bool)))


def test_mask_packing_boundaries_isolate_and_restart():
    m = build_block_causal_mask(7, 2, sample_boundaries=[3])
    assert not m.allowed[:3, 3:].any()
    assert not m.allowed[3:, :3].any()
    assert np.array_equal(m.positions, [0, 1, 2, 0, 1, 2, 3])
    assert np.array_equal(m.block_ids, [0, 0, 1, 0, 0, 1, 1])
    assert all(m.allowed[i, i] for i in range(7))


def test_mask_rejects_bad_block_len():
    with pytest.raises(ValueError):
        build_block_causal_mask(4, 0)


def test_forward_shape_and_finite():
    cfg = tiny_config()
    params = init_params(cfg, np.random.default_rng(0), head_scale=0.05)
    tokens = np.arange(6) % cfg.vocab_size
    mask = build_block_causal_mask(6, cfg.block_len)
    logits = forward(params, tokens, mask)
    assert logits.shape == (6, cfg.vocab_size)
    assert np.isfinite(logits.values).all()


def test_zero_head_init_is_uniform_predictor():
    cfg = tiny_config()
    params = init_params(cfg, np.random.default_rng(0))
    mask = build_block_causal_mask(4, cfg.block_len)
    logits = forward(params, np.array([1, 2, 3, 4]), mask)
    assert np.array_equal(logits.values, np.zeros((4, cfg.vocab_size)))


def test_causality_later_block_perturbation_is_invisible():
    cfg = tiny_config(block_len=2)
    params = init_params(cfg, np.random.default_rng(1), head_scale=0.05)
    mask = build_block_causal_mask(6, 2)
    tokens = np.array([1, 2, 3, 4, 5, 6])
    with T.no_grad():
        base = forward(params, tokens, mask).values
        poked = tokens.copy()
        poked[4] = 0  # block 2; blocks 0 and 1 must not move
        out = forward(params, poked, mask).values
    assert np.array_equal(base[:4], out[:4])
    assert not np.array_equal(base[4:], out[4:])


def test_within_block_perturbation_changes_whole_block():
    cfg = tiny_config(block_len=2)
    params = init_params(cfg, np.random.default_rng(1), head_scale=0.05)
    mask = build_block_causal_mask(4, 2)
    tokens = np.array([1, 2, 3, 4])
    with T.no_grad():
        base = forward(params, tokens, mask).values
        poked = tokens.copy()
        poked[3] = 0
        out = forward(params, poked, mask).values
    assert np.array_equal(base[:2], out[:2])
    assert not np.array_equal(base[2:4], out[2:4])


def test_packed_sample_logits_bit_identical_to_standalone():
    cfg = tiny_config(block_len=2, max_seq_len=32)
    params = init_params(cfg, np.random.default_rng(2), head_scale=0.05)
    rng = np.random.default_rng(9)
    a = rng.integers(0, cfg.vocab_size, size=5)
    b = rng.integers(0, cfg.vocab_size, size=7)
    with T.no_grad():
        alone_a = forward(params, a, build_block_causal_mask(5, 2)).values
        alone_b = forward(params, b, build_block_causal_mask(7, 2)).values
        packed = forward(
            params,
            np.concatenate([a, b]),
            build_block_causal_mask(12, 2, sample_boundaries=[5]),
        ).values
    assert np.array_equal(packed[:5], alone_a)
    assert np.array_equal(packed[5:], alone_b)
    # Perturbing sample A leaves sample B's logits unchanged.
    a2 = a.copy()
    a2[0] = (a2[0] + 1) % cfg.vocab_size
    with T.no_grad():
        packed2 = forward(
            params,
            np.concatenate([a2, b]),
            build_block_causal_mask(12, 2, sample_boundaries=[5]),
        ).values
    assert np.array_equal(packed2[5:], packed[5:])


def test_forward_rejects_overlong_sequence():
    cfg = tiny_config(max_seq_len=4)
    params = init_params(cfg, np.random.default_rng(0))
    with pytest.raises(ValueError, match="max_seq_len"):
        forward(params, np.zeros(5, dtype=int), build_block_causal_mask(5, 2))


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        tiny_config(embed_dim=9)
    with pytest.raises(ValueError, match="special token"):
        tiny_config(eos_id=7)  # collides with mask_token_id


def test_parameter_count_depends_only_on_config():
    cfg = tiny_config()
    p1 = init_params(cfg, np.random.default_rng(0))
    p2 = init_params(cfg, np.random.default_rng(99), head_scale=0.1)
    assert p1.num_parameters() == p2.num_parameters()


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = tiny_config()
    params = init_params(cfg, np.random.default_rng(4), head_scale=0.03)
    path = tmp_path / "model.ckpt"
    save_checkpoint(str(path), params)
    loaded = load_checkpoint(str(path))
    assert loaded.config == cfg
    assert set(loaded.params) == set(params.params)
    for name, p in params.params.items():
        assert np.array_equal(loaded[name].values, p.values)
    path2 = tmp_path / "model2.ckpt"
    save_checkpoint(str(path2), loaded)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="checkpoint"):
        load_checkpoint(str(path))


def test_forward_gradients_match_finite_differences():
    cfg = ModelConfig(
        vocab_size=7, embed_dim=4, num_layers=1, num_heads=2, max_seq_len=8,
        block_len=2, mask_token_id=3, think_open_id=4, think_close_id=5, eos_id=6,
    )
    params = init_params(cfg, np.random.default_rng(8), head_scale=0.2)
    tokens = np.array([1, 3, 2, 3])
    targets = np.array([1, 0, 2, 5])
    weights = np.array([0.0, 1.0, 0.0, 1.0])
    mask = build_block_causal_mask(4, 2)

    def loss_fn():
        logits = forward(params, tokens, mask)
        return T.softmax_cross_entropy(logits, targets, weights).item()

    loss = T.softmax_cross_entropy(forward(params, tokens, mask), targets, weights)
    T.backward(loss)
    for name, p in params.params.items():
        fd = finite_difference_gradient(loss_fn, p)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.values)
        assert max_rel_error(analytic, fd) < 1e-4, name
