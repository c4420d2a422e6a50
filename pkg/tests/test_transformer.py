import math

import numpy as np
import pytest

from peftlab import tensor as tn
from peftlab.errors import ConfigError, LengthError, ShapeError
from peftlab.tensor import Tensor, grad_check
from peftlab.train import PretrainConfig, pretrain_upstream
from peftlab.transformer import (EncoderConfig, EncoderParams, LayerHooks, choose_mask,
                                 count_encoder_params, embed, encoder_forward, encoder_shapes,
                                 ffn_forward, init_encoder, init_recon_head, masked_pretrain_loss,
                                 mha_forward)


def small_config(**kw):
    base = dict(n_layers=2, d_model=8, n_heads=2, d_ffn=16, d_input=3, max_len=8)
    base.update(kw)
    return EncoderConfig(**base)


def layer_params(d, d_ffn, rng=None, zero=False):
    def w(*shape):
        if zero:
            return Tensor(np.zeros(shape))
        return Tensor(rng.normal(size=shape) / math.sqrt(shape[0]))

    lp = {}
    for t in "qkvo":
        lp[f"attn.{t}.weight"] = w(d, d)
        lp[f"attn.{t}.bias"] = Tensor(np.zeros(d) if zero else rng.normal(size=d) * 0.1)
    lp["ffn.fc1.weight"] = w(d, d_ffn)
    lp["ffn.fc1.bias"] = Tensor(np.zeros(d_ffn))
    lp["ffn.fc2.weight"] = w(d_ffn, d)
    lp["ffn.fc2.bias"] = Tensor(np.zeros(d))
    for n in ("attn_norm", "ffn_norm"):
        lp[f"{n}.gain"] = Tensor(np.ones(d))
        lp[f"{n}.bias"] = Tensor(np.zeros(d))
    return lp


def attention_oracle(x, lp, n_heads, prefix=None):
    """Explicit per-head, per-query loops over Q K^T, softmax and the weighted sum of V."""
    t, d = x.shape
    dh = d // n_heads
    q = x @ lp["attn.q.weight"].data + lp["attn.q.bias"].data
    k = x @ lp["attn.k.weight"].data + lp["attn.k.bias"].data
    v = x @ lp["attn.v.weight"].data + lp["attn.v.bias"].data
    if prefix is not None:
        k = np.vstack([prefix[0], k])
        v = np.vstack([prefix[1], v])
    ctx = np.zeros((t, d))
    for h in range(n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        for i in range(t):
            scores = [sum(q[i, cols][c] * k[j, cols][c] for c in range(dh)) / math.sqrt(dh)
                      for j in range(k.shape[0])]
            m = max(scores)
            e = [math.exp(s - m) for s in scores]
            z = sum(e)
            for j in range(k.shape[0]):
                ctx[i, cols] += (e[j] / z) * v[j, cols]
    return ctx @ lp["attn.o.weight"].data + lp["attn.o.bias"].data


class TestEncoderConfig:
    def test_heads_must_divide_model_dim(self):
        with pytest.raises(ConfigError, match="divisible"):
            EncoderConfig(d_model=10, n_heads=4)

    @pytest.mark.parametrize("field", ["n_layers", "d_model", "n_heads", "d_ffn", "d_input", "max_len"])
    def test_fields_positive(self, field):
        with pytest.raises(ConfigError, match=field):
            EncoderConfig(**{field: 0})

    def test_inventory_names_unique_and_count_pure(self):
        cfg = small_config()
        shapes = encoder_shapes(cfg)
        assert len(shapes) == len(set(shapes))
        assert count_encoder_params(cfg) == sum(
            p.size for p in init_encoder(cfg, 3).values())


class TestMHA:
    def test_single_position_identity_projections(self):
        rng = np.random.default_rng(0)
        d = 4
        lp = layer_params(d, 8, rng)
        for t in "qkv":
            lp[f"attn.{t}.weight"] = Tensor(np.eye(d))
            lp[f"attn.{t}.bias"] = Tensor(np.zeros(d))
        r = rng.normal(size=(1, d))
        out = mha_forward(Tensor(r), lp, n_heads=1)
        expected = r @ lp["attn.o.weight"].data + lp["attn.o.bias"].data
        np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-15)

    def test_two_positions_hand_set_against_stepwise_oracle(self):
        lp = layer_params(2, 4, zero=True)
        lp["attn.q.weight"] = Tensor([[1.0, 0.5], [-0.3, 2.0]])
        lp["attn.k.weight"] = Tensor([[0.2, -1.0], [1.5, 0.4]])
        lp["attn.v.weight"] = Tensor([[2.0, 0.0], [1.0, -1.0]])
        lp["attn.o.weight"] = Tensor([[0.5, 1.0], [1.0, -0.5]])
        lp["attn.q.bias"] = Tensor([0.1, -0.2])
        x = np.array([[0.3, -1.2], [1.1, 0.4]])
        out = mha_forward(Tensor(x), lp, n_heads=1)
        assert np.max(np.abs(out.data - attention_oracle(x, lp, 1))) < 1e-12

    @pytest.mark.parametrize("n_heads,prefix_len", [(2, 0), (4, 0), (2, 3)])
    def test_multihead_against_oracle(self, n_heads, prefix_len):
        rng = np.random.default_rng(n_heads + prefix_len)
        lp = layer_params(8, 16, rng)
        x = rng.normal(size=(5, 8))
        prefix = None
        hooks = None
        if prefix_len:
            prefix = (rng.normal(size=(prefix_len, 8)), rng.normal(size=(prefix_len, 8)))
            hooks = LayerHooks(prefix=(Tensor(prefix[0]), Tensor(prefix[1])))
        out = mha_forward(Tensor(x), lp, n_heads, hooks)
        assert np.max(np.abs(out.data - attention_oracle(x, lp, n_heads, prefix))) < 1e-12

    def test_prefix_shapes_and_row_normalisation(self):
        rng = np.random.default_rng(1)
        lp = layer_params(8, 16, rng)
        x = Tensor(rng.normal(size=(2, 5, 8)))
        pk, pv = Tensor(rng.normal(size=(4, 8))), Tensor(rng.normal(size=(4, 8)))
        out, att = mha_forward(x, lp, 2, LayerHooks(prefix=(pk, pv)), return_attention=True)
        assert out.shape == (2, 5, 8)
        assert att.shape == (2, 2, 5, 9)
        assert np.all(att.data >= 0)
        assert np.max(np.abs(att.data.sum(axis=-1) - 1.0)) < 1e-12

    def test_prefix_dimension_mismatch(self):
        rng = np.random.default_rng(2)
        lp = layer_params(8, 16, rng)
        bad = Tensor(np.zeros((3, 6)))
        with pytest.raises(ShapeError):
            mha_forward(Tensor(rng.normal(size=(4, 8))), lp, 2, LayerHooks(prefix=(bad, bad)))

    def test_empty_prefix_is_bitwise_no_prefix(self):
        rng = np.random.default_rng(3)
        lp = layer_params(8, 16, rng)
        x = Tensor(rng.normal(size=(3, 5, 8)))
        empty = Tensor(np.zeros((0, 8)))
        a = mha_forward(x, lp, 2)
        b = mha_forward(x, lp, 2, LayerHooks(prefix=(empty, empty)))
        np.testing.assert_array_equal(a.data, b.data)


class TestFFN:
    def test_zero_ffn_is_layer_norm(self):
        lp = layer_params(6, 12, zero=True)
        x = np.random.default_rng(4).normal(size=(4, 6))
        expected = tn.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
        np.testing.assert_array_equal(ffn_forward(Tensor(x), lp).data, expected)

    def test_identity_hook_bitwise(self):
        rng = np.random.default_rng(5)
        lp = layer_params(6, 12, rng)
        x = Tensor(rng.normal(size=(4, 6)))
        np.testing.assert_array_equal(ffn_forward(x, lp).data, ffn_forward(x, lp, lambda h: h).data)

    def test_constant_shift_hook(self):
        lp = layer_params(6, 12, zero=True)
        x = np.random.default_rng(6).normal(size=(4, 6))
        c = np.linspace(-1, 1, 6)
        out = ffn_forward(Tensor(x), lp, lambda h: h + c).data
        xc = x + c
        mu = xc.mean(axis=-1, keepdims=True)
        var = ((xc - mu) ** 2).mean(axis=-1, keepdims=True)
        np.testing.assert_allclose(out, (xc - mu) / np.sqrt(var + 1e-5), rtol=0, atol=1e-14)


class TestEncoder:
    def test_zero_weight_collapse(self):
        cfg = small_config(n_layers=1)
        params = init_encoder(cfg, 0)
        for name, p in params.items():
            if name.startswith("layers.") and not name.endswith(".gain"):
                p.data[...] = 0.0
        params["embed.pos"].data[...] = 0.0
        x = np.random.default_rng(7).normal(size=(5, 3))
        proj = x @ params["embed.proj.weight"].data + params["embed.proj.bias"].data
        ones, zeros = Tensor(np.ones(8)), Tensor(np.zeros(8))
        expected = tn.layer_norm(tn.layer_norm(Tensor(proj), ones, zeros), ones, zeros).data
        np.testing.assert_array_equal(encoder_forward(x, params)[0].data, expected)

    def test_deterministic(self):
        cfg = small_config()
        x = np.random.default_rng(8).normal(size=(2, 6, 3))
        a = encoder_forward(x, init_encoder(cfg, 42))
        b = encoder_forward(x, init_encoder(cfg, 42))
        c = encoder_forward(x, init_encoder(cfg, 42))
        for sa, sb, sc in zip(a, b, c):
            np.testing.assert_array_equal(sa.data, sb.data)
            np.testing.assert_array_equal(sa.data, sc.data)

    def test_hidden_state_shapes(self):
        cfg = small_config(n_layers=3)
        states = encoder_forward(np.zeros((2, 7, 3)), init_encoder(cfg, 0))
        assert len(states) == 3
        assert all(s.shape == (2, 7, 8) for s in states)

    def test_too_long(self):
        cfg = small_config(max_len=4)
        with pytest.raises(LengthError):
            encoder_forward(np.zeros((5, 3)), init_encoder(cfg, 0))

    def test_identity_hooks_bitwise(self):
        cfg = small_config()
        params = init_encoder(cfg, 1)
        x = np.random.default_rng(9).normal(size=(3, 6, 3))
        zero = lambda x: Tensor(np.zeros(x.shape[:-1] + (cfg.d_model,)))  # noqa: E731
        hooks = [LayerHooks(q_delta=zero, v_delta=zero, ffn_adapter=lambda h: h)
                 for _ in range(cfg.n_layers)]
        for a, b in zip(encoder_forward(x, params), encoder_forward(x, params, hooks)):
            np.testing.assert_array_equal(a.data, b.data)

    def test_gradients_through_full_encoder(self):
        cfg = small_config(n_layers=2, d_model=8, n_heads=2, d_ffn=8, d_input=3, max_len=5)
        params = init_encoder(cfg, 3)
        for p in params.values():  # move off the exact-zero / unit initial values
            p.data += np.random.default_rng(p.size).normal(scale=0.1, size=p.shape)
        rng = np.random.default_rng(10)
        x = rng.normal(size=(5, 3))
        weights = [rng.normal(size=(5, 8)) for _ in range(2)]

        def objective():
            states = encoder_forward(x, params)
            return sum((s * w).sum() for s, w in zip(states, weights))

        used = [p for n, p in params.items() if n != "embed.mask"]
        assert grad_check(objective, used) < 1e-5


class TestMaskedPretrain:
    def test_mask_count(self):
        mask = choose_mask((4,), 0.5, np.random.default_rng(0))
        assert mask.sum() == 2
        mask = choose_mask((3, 10), 0.25, np.random.default_rng(1))
        assert list(mask.sum(axis=1)) == [3, 3, 3]

    def test_mask_frac_range(self):
        with pytest.raises(ConfigError):
            choose_mask((4,), 1.5, np.random.default_rng(0))

    def test_empty_input(self):
        cfg = small_config()
        params = init_encoder(cfg, 0)
        with pytest.raises(LengthError):
            masked_pretrain_loss(np.zeros((0, 3)), params, init_recon_head(cfg, 0), 0.5, 0)

    def test_only_masked_frames_count(self):
        # Layer weights zero: each output frame depends on its own input frame only,
        # and masked frames see the mask embedding instead of their features.
        cfg = small_config(d_input=8, d_model=8)
        params = init_encoder(cfg, 0)
        for name, p in params.items():
            if name.startswith("layers.") and not name.endswith(".gain"):
                p.data[...] = 0.0
        params["embed.proj.weight"].data[...] = np.eye(8)
        recon = init_recon_head(cfg, 0)
        recon["ssl.recon.weight"].data[...] = np.eye(8)
        rng = np.random.default_rng(11)
        x = rng.normal(size=(6, 8))
        mask = choose_mask((6,), 0.5, np.random.default_rng(5))
        base = masked_pretrain_loss(x, params, recon, 0.5, 5).item()
        y = x.copy()
        y[~mask] += rng.normal(size=((~mask).sum(), 8))
        assert masked_pretrain_loss(y, params, recon, 0.5, 5).item() == base
        z = x.copy()
        z[mask] += 1.0
        assert masked_pretrain_loss(z, params, recon, 0.5, 5).item() != base

    def test_loss_halves_within_200_steps(self):
        result = pretrain_upstream(EncoderConfig(), PretrainConfig(steps=200))
        assert result.final_loss < 0.5 * result.initial_loss
