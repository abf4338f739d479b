import math

import numpy as np
import pytest
import torch

from conftest import random_trajectory, tiny_config
from starformer.model import (
    VARIANTS,
    CheckpointError,
    ConfigError,
    Connectivity,
    FlatDecisionTransformer,
    ModelConfig,
    SelfAttention,
    StARformer,
    build_causal_mask,
    build_variant,
    collate,
    extract_attention,
    load_checkpoint,
    predict,
    save_checkpoint,
    sequence_mask,
    variant_config,
)
from starformer.trajectory import sample_window


def windows_for(cfg, rng, n=3, length=9):
    space = cfg.action_space
    out = []
    for i in range(n):
        traj = random_trajectory(rng, length, space, stack=cfg.frame_stack)
        out.append(sample_window(traj, int(rng.integers(0, length)), cfg.seq_len, cfg.reward_mode))
    return collate(out)


def np_layernorm(x, ln):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + ln.eps) * ln.weight.detach().double().numpy() + ln.bias.detach().double().numpy()


def np_linear(x, lin):
    return x @ lin.weight.detach().double().numpy().T + lin.bias.detach().double().numpy()


def np_softmax(s):
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(-1, keepdims=True)


def np_gelu(x):
    return 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))


def np_block(x, block, mask=None):
    """Single-head pre-norm block computed by hand."""
    a = np_layernorm(x, block.ln1)
    qkv = np_linear(a, block.attn.qkv)
    d = x.shape[-1]
    q, k, v = qkv[:, :d], qkv[:, d : 2 * d], qkv[:, 2 * d :]
    s = q @ k.T / math.sqrt(d)
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    x = x + np_linear(np_softmax(s) @ v, block.attn.proj)
    m = np_layernorm(x, block.ln2)
    return x + np_linear(np_gelu(np_linear(m, block.mlp[0])), block.mlp[2])


class TestAttention:
    def test_single_head_oracle(self, rng):
        attn = SelfAttention(8, 1, 0.0).eval()
        x = rng.normal(size=(2, 8))
        with torch.no_grad():
            got = attn(torch.tensor(x, dtype=torch.float32)).double().numpy()
        qkv = np_linear(x, attn.qkv)
        q, k, v = qkv[:, :8], qkv[:, 8:16], qkv[:, 16:]
        want = np_linear(np_softmax(q @ k.T / math.sqrt(8)) @ v, attn.proj)
        np.testing.assert_allclose(got, want, atol=1e-5, rtol=0)

    def test_recorded_and_fused_paths_agree(self, rng):
        attn = SelfAttention(16, 4, 0.0).eval()
        x = torch.tensor(rng.normal(size=(3, 5, 16)), dtype=torch.float32)
        mask = sequence_mask(torch.tensor([[False, True, True, True, True]] * 3))
        with torch.no_grad():
            fused = attn(x, mask)
            attn.record = True
            manual = attn(x, mask)
        torch.testing.assert_close(fused, manual, atol=1e-6, rtol=0)
        rows = attn.last_weights.sum(-1)
        torch.testing.assert_close(rows, torch.ones_like(rows), atol=1e-6, rtol=0)


class TestStepLayer:
    def test_group_oracle(self, rng):
        cfg = tiny_config(d_step=8, heads_step=1, dropout=0.0)
        model = StARformer(cfg).eval()
        z = rng.normal(size=(2, 8))
        with torch.no_grad():
            got = model.step_layer_forward(torch.tensor(z, dtype=torch.float32), 0).double().numpy()
        np.testing.assert_allclose(got, np_block(z, model.step_blocks[0]), atol=1e-5, rtol=0)

    def test_group_permutation(self, rng):
        cfg = tiny_config(dropout=0.0)
        model = StARformer(cfg).eval()
        z = torch.tensor(rng.normal(size=(2, 4, cfg.group_size, cfg.d_step)), dtype=torch.float32)
        perm = torch.tensor([2, 0, 3, 1])
        with torch.no_grad():
            a = model.step_layer_forward(z, 0)[:, perm]
            b = model.step_layer_forward(z[:, perm], 0)
        torch.testing.assert_close(a, b, atol=1e-6, rtol=0)

    def test_rows_sum_to_one(self, rng):
        cfg = tiny_config(dropout=0.0)
        model = StARformer(cfg).eval()
        attn = model.step_blocks[0].attn
        attn.record = True
        with torch.no_grad():
            model.step_layer_forward(torch.randn(3, cfg.group_size, cfg.d_step), 0)
        w = attn.last_weights
        assert w.shape[-1] == cfg.group_size
        torch.testing.assert_close(w.sum(-1), torch.ones(w.shape[:-1]), atol=1e-6, rtol=0)


class TestAggregate:
    def test_paper_dims(self):
        cfg = ModelConfig()
        assert cfg.num_patches == 144 and cfg.group_size == 146
        model = StARformer(cfg)
        assert model.aggregate[0].in_features == 146 * 64 == 9344
        assert model.aggregate[0].out_features == 192

    def test_zero_group_gives_temporal(self):
        cfg = tiny_config()
        model = StARformer(cfg)
        with torch.no_grad():
            model.aggregate[1].bias.zero_()
            g = model.aggregate_star(torch.zeros(cfg.group_size, cfg.d_step), torch.tensor(3), layer=1)
        torch.testing.assert_close(g, model.temporal.table[3], rtol=0, atol=0)

    def test_matmul_oracle(self, rng):
        cfg = tiny_config()
        model = StARformer(cfg)
        z = rng.normal(size=(cfg.group_size, cfg.d_step))
        with torch.no_grad():
            g = model.aggregate_star(torch.tensor(z, dtype=torch.float32), torch.tensor(5)).double().numpy()
        want = np_linear(z.reshape(-1), model.aggregate[0]) + model.temporal.table[5].detach().double().numpy()
        np.testing.assert_allclose(g, want, atol=1e-6, rtol=0)


class TestCausalMask:
    def test_small(self):
        assert build_causal_mask(1).int().tolist() == [[1, 0], [1, 1]]
        assert torch.equal(build_causal_mask(2), torch.ones(4, 4, dtype=torch.bool).tril())

    @pytest.mark.parametrize("t", [1, 3, 10, 30])
    def test_row_counts(self, t):
        m = build_causal_mask(t)
        assert m.shape == (2 * t, 2 * t)
        assert m.sum(1).tolist() == list(range(1, 2 * t + 1))
        # h_t (odd 0-based) sees g_t; g_t does not see h_t
        assert m[1, 0] and not m[0, 1]


class TestSequenceLayer:
    def test_masked_weights_zero(self):
        cfg = tiny_config(dropout=0.0)
        model = StARformer(cfg).eval()
        attn = model.seq_blocks[0].attn
        attn.record = True
        g, h = torch.randn(2, 4, cfg.d_seq), torch.randn(2, 4, cfg.d_seq)
        valid = torch.tensor([[False, True, True, True], [True] * 4])
        with torch.no_grad():
            model.sequence_layer_forward(g, h, valid, 0)
        w = attn.last_weights
        allowed = sequence_mask(valid.repeat_interleave(2, 1))
        assert torch.all(w.masked_select(~allowed.expand_as(w)) == 0)
        sums = w.sum(-1)
        torch.testing.assert_close(sums, torch.ones_like(sums), atol=1e-6, rtol=0)

    def test_t1_oracle(self, rng):
        cfg = tiny_config(seq_len=1, d_seq=8, heads_seq=1, dropout=0.0)
        model = StARformer(cfg).eval()
        g, h = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
        with torch.no_grad():
            got = model.sequence_layer_forward(
                torch.tensor(g[None], dtype=torch.float32), torch.tensor(h[None], dtype=torch.float32),
                torch.ones(1, 1, dtype=torch.bool), 0,
            )[0].double().numpy()
        y = np.concatenate([g, h])
        want = np_block(y, model.seq_blocks[0], mask=np.tril(np.ones((2, 2), dtype=bool)))[1:]
        np.testing.assert_allclose(got, want, atol=1e-5, rtol=0)

    def test_causality(self):
        cfg = tiny_config(dropout=0.0)
        model = StARformer(cfg).eval()
        g, h = torch.randn(1, 4, cfg.d_seq), torch.randn(1, 4, cfg.d_seq)
        valid = torch.ones(1, 4, dtype=torch.bool)
        with torch.no_grad():
            a = model.sequence_layer_forward(g, h, valid, 0)
            g[:, -1], h[:, -1] = 0, 0
            b = model.sequence_layer_forward(g, h, valid, 0)
        assert torch.equal(a[:, :-1], b[:, :-1])


def left_padded_prefix(window, t):
    """First ``t`` positions of ``window`` moved to the end, zero padding in front."""
    out = {}
    for name in ("states", "actions", "rewards", "prev_actions", "prev_rewards", "valid_mask", "timesteps"):
        arr = getattr(window, name)
        new = np.zeros_like(arr)
        new[len(arr) - t :] = arr[:t]
        out[name] = new
    return type(window)(reward_mode=window.reward_mode, **out)


def perturb_after(batch, t, gen):
    out = type(batch)(*(x.clone() for x in (
        batch.states, batch.actions, batch.rewards, batch.prev_actions,
        batch.prev_rewards, batch.valid_mask, batch.timesteps)))
    out.states[:, t + 1 :] = torch.rand(out.states[:, t + 1 :].shape, generator=gen)
    out.prev_rewards[:, t + 1 :] = torch.randn(out.prev_rewards[:, t + 1 :].shape, generator=gen)
    out.rewards[:, t + 1 :] = torch.randn(out.rewards[:, t + 1 :].shape, generator=gen)
    if out.actions.is_floating_point():
        out.actions[:, t + 1 :] = torch.rand(out.actions[:, t + 1 :].shape, generator=gen) * 2 - 1
        out.prev_actions[:, t + 1 :] = torch.rand(out.prev_actions[:, t + 1 :].shape, generator=gen) * 2 - 1
    else:
        out.actions[:, t + 1 :] = torch.randint(0, 3, out.actions[:, t + 1 :].shape, generator=gen)
        out.prev_actions[:, t + 1 :] = torch.randint(0, 3, out.prev_actions[:, t + 1 :].shape, generator=gen)
    return out


ALL_VARIANTS = list(VARIANTS) + ["fusion:C+C", "stack:C+P"]


class TestForward:
    @pytest.mark.parametrize("kind", ["discrete", "continuous"])
    def test_shapes(self, rng, kind):
        cfg = tiny_config(action_kind=kind, action_dim=3 if kind == "discrete" else 2)
        out = build_variant(cfg)(windows_for(cfg, rng))
        assert out.shape == (3, cfg.seq_len, cfg.action_dim)
        if kind == "continuous":
            assert out.abs().max() <= 1.0

    @pytest.mark.parametrize("name", ALL_VARIANTS)
    def test_causality_all_variants(self, rng, name):
        cfg = variant_config(name, tiny_config())
        model = build_variant(cfg).eval()
        batch = windows_for(cfg, rng, length=12)
        gen = torch.Generator().manual_seed(3)
        base = predict(model, batch)
        for t in range(cfg.seq_len - 1):
            out = predict(model, perturb_after(batch, t, gen))
            assert torch.equal(out[:, : t + 1], base[:, : t + 1])

    @pytest.mark.parametrize("name", ["P+C", "C+__", "dt"])
    def test_prefix_consistency(self, rng, name):
        cfg = variant_config(name, tiny_config(seq_len=5))
        model = build_variant(cfg).eval()
        traj = random_trajectory(rng, 8)
        window = sample_window(traj, 6, 5, cfg.reward_mode)
        full = predict(model, window)[0]
        for t in range(1, 5):
            prefix = predict(model, left_padded_prefix(window, t))[0]
            torch.testing.assert_close(prefix[-t:], full[:t], atol=1e-5, rtol=0)

    def test_padded_positions_ignored(self, rng):
        cfg = tiny_config(dropout=0.0)
        model = build_variant(cfg).eval()
        traj = random_trajectory(rng, 2)
        w = sample_window(traj, 1, cfg.seq_len, cfg.reward_mode)
        batch = collate([w])
        noisy = perturb_after(batch, -1, torch.Generator().manual_seed(0))
        noisy.valid_mask[:] = batch.valid_mask
        noisy.timesteps[:] = batch.timesteps
        for name in ("states", "actions", "prev_actions", "prev_rewards"):
            getattr(noisy, name)[:, 2:] = getattr(batch, name)[:, 2:]
        torch.testing.assert_close(predict(model, noisy)[:, 2:], predict(model, batch)[:, 2:], atol=1e-6, rtol=0)

    def test_determinism(self, rng):
        cfg = tiny_config()
        model = build_variant(cfg)
        batch = windows_for(cfg, rng)
        assert torch.equal(predict(model, batch), predict(model, batch))

    def test_window_mismatch(self, rng):
        cfg = tiny_config()
        other = tiny_config(seq_len=5)
        with pytest.raises(ConfigError):
            build_variant(cfg)(windows_for(other, rng))
        cont = tiny_config(action_kind="continuous", action_dim=2)
        with pytest.raises(ConfigError):
            build_variant(cfg)(windows_for(cont, rng))

    @pytest.mark.parametrize("name", ALL_VARIANTS)
    def test_gradient_flow(self, rng, name):
        cfg = variant_config(name, tiny_config())
        model = build_variant(cfg).train()
        traj = random_trajectory(rng, 10)
        batch = collate([sample_window(traj, t, cfg.seq_len, cfg.reward_mode) for t in (1, 5, 9)])
        out = model(batch)
        torch.nn.functional.cross_entropy(out.reshape(-1, 3), batch.actions.reshape(-1)).backward()
        dead = [n for n, p in model.named_parameters() if p.grad is None or not p.grad.abs().sum() > 0]
        assert not dead


class TestVariants:
    @pytest.mark.parametrize(
        "name, step, seq, conn",
        [
            ("P+C", "patch", "conv", "interleave"),
            ("P+P", "patch", "patch", "interleave"),
            ("P+__", "patch", "none", "interleave"),
            ("C+C", "conv", "conv", "interleave"),
            ("C+P", "conv", "patch", "interleave"),
            ("C+_", "conv", "none", "interleave"),
            ("fusion", "patch", "conv", "fusion_sum"),
            ("stack", "patch", "conv", "stack"),
        ],
    )
    def test_labels(self, name, step, seq, conn):
        cfg = variant_config(name)
        assert (cfg.step_embed_mode.value, cfg.seq_state_mode.value, cfg.connectivity.value) == (step, seq, conn)
        assert variant_config(cfg.variant) == cfg

    def test_conv_step_group_size(self):
        assert variant_config("C+C").group_size == 3
        assert variant_config("C+C", reward_mode="none").group_size == 2
        assert variant_config("P+C", reward_mode="none").group_size == 145

    def test_dt(self):
        cfg = variant_config("dt")
        assert cfg.connectivity is Connectivity.DT_FLAT
        assert isinstance(build_variant(tiny_config(connectivity="dt_flat")), FlatDecisionTransformer)

    @pytest.mark.parametrize("bad", ["fusion:P+__", "stack:C+__", "X+C", "P-C", "wat"])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            variant_config(bad)

    def test_invalid_direct(self):
        with pytest.raises(ConfigError):
            ModelConfig(connectivity="dt_flat", seq_state_mode="none")
        with pytest.raises(ConfigError):
            ModelConfig(d_step=30, heads_step=4)

    def test_param_count_exceeds_dt(self):
        base = tiny_config()
        star = build_variant(variant_config("P+C", base)).num_parameters()
        dt = build_variant(variant_config("dt", base)).num_parameters()
        assert star > dt

    def test_sequence_lengths(self, rng):
        for name, expected in (("P+C", 8), ("fusion", 4), ("P+__", 4), ("dt", 12)):
            cfg = variant_config(name, tiny_config(dropout=0.0))
            model = build_variant(cfg).eval()
            blocks = model.blocks if name == "dt" else model.seq_blocks
            blocks[0].attn.record = True
            predict(model, windows_for(cfg, rng))
            assert blocks[0].attn.last_weights.shape[-1] == expected

    def test_stack_only_final_g_matters(self, rng):
        cfg = variant_config("stack", tiny_config())
        model = build_variant(cfg).eval()
        assert len(model.aggregate) == 1
        batch = windows_for(cfg, rng)
        fixed = {}

        def pin(module, args, output):
            if "g" not in fixed:
                fixed["g"] = output.detach().clone()
            return fixed["g"]

        model.aggregate[0].register_forward_hook(pin)
        base = predict(model, batch)
        with torch.no_grad():
            for p in model.step_blocks[0].parameters():
                p.add_(torch.randn_like(p))
        assert torch.equal(predict(model, batch), base)


class TestExtractAttention:
    def test_maps(self, rng):
        cfg = tiny_config(patch_size=7)
        model = build_variant(cfg)
        traj = random_trajectory(rng, 6)
        maps = extract_attention(model, sample_window(traj, 5, cfg.seq_len, cfg.reward_mode), layer=1, head=1)
        assert maps.shape == (cfg.seq_len, 12, 12)
        np.testing.assert_allclose(maps.sum(axis=(1, 2)), 1.0, atol=1e-6)
        assert maps.min() >= 0

    def test_uniform_image_near_uniform(self):
        cfg = ModelConfig(n_layers=2, d_step=32, d_seq=64)
        model = build_variant(cfg)
        states = np.full((3, 84, 84, 4), 0.5)
        from starformer.trajectory import Trajectory

        traj = Trajectory(states, [0, 1, 2], [0.0, 0.0, 0.0], cfg.action_space)
        maps = extract_attention(model, sample_window(traj, 2, cfg.seq_len, cfg.reward_mode), 0, 0)
        valid = maps[-3:]
        assert (valid.max(axis=(1, 2)) - valid.min(axis=(1, 2))).max() < 0.1

    def test_conv_variant_rejected(self, rng):
        cfg = variant_config("C+C", tiny_config())
        w = sample_window(random_trajectory(rng, 3), 2, cfg.seq_len, cfg.reward_mode)
        with pytest.raises(ConfigError):
            extract_attention(build_variant(cfg), w, 0, 0)


class TestCheckpoint:
    def test_roundtrip(self, rng, tmp_path):
        cfg = variant_config("P+P", tiny_config(action_kind="continuous", action_dim=2))
        model = build_variant(cfg)
        save_checkpoint(model, tmp_path / "m.npz", {"step": 3})
        loaded, extra = load_checkpoint(tmp_path / "m.npz", expected=cfg)
        assert extra == {"step": 3} and loaded.cfg == cfg
        batch = windows_for(cfg, rng)
        assert torch.equal(predict(model, batch), predict(loaded, batch))

    def test_config_mismatch(self, tmp_path):
        cfg = tiny_config()
        save_checkpoint(build_variant(cfg), tmp_path / "m.npz")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m.npz", expected=tiny_config(seq_len=5))
