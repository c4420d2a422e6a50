import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peftlab import peft
from peftlab.errors import ConfigError, InventoryError, ShapeError
from peftlab.peft import (AdapterBias, BitFit, FreezePlan, FullFT, HeadOnly, Houlsby, LoRA, Prefix,
                          WeightedSum, adapterbias_forward, count_trainable, count_upstream,
                          freeze_plan, houlsby_forward, inject, lora_delta, prefix_init_from_batch,
                          upstream_inventory, weighted_sum_combine, weighted_sum_weights)
from peftlab.tensor import Tensor, grad_check
from peftlab.transformer import EncoderConfig, encoder_forward, encoder_shapes, init_encoder, layer_inputs

BASE = EncoderConfig(n_layers=12, d_model=768, n_heads=12, d_ffn=3072, d_input=80, max_len=64)
TINY = EncoderConfig(n_layers=2, d_model=8, n_heads=2, d_ffn=16, d_input=3, max_len=8)


class TestMethodConfig:
    @pytest.mark.parametrize("build", [lambda: Houlsby(0), lambda: LoRA(0), lambda: Prefix(0),
                                       lambda: LoRA(4, ("k",)), lambda: LoRA(4, ())])
    def test_invalid(self, build):
        with pytest.raises(ConfigError):
            build()

    @pytest.mark.parametrize("method", peft.all_methods())
    def test_dict_round_trip(self, method):
        assert peft.method_from_dict(peft.method_to_dict(method)) == method

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="rank"):
            peft.method_from_dict({"name": "houlsby", "rank": 3})
        with pytest.raises(ConfigError):
            peft.method_from_dict({"name": "adapters"})


class TestInject:
    def test_headonly_has_no_state(self):
        state, plan = inject(HeadOnly(), BASE)
        assert len(state) == 0
        assert plan.trainable == frozenset(peft.HEAD_PARAMS)
        assert count_trainable(plan, upstream_inventory(HeadOnly(), BASE)) == 0

    def test_fullft_trains_everything(self):
        state, plan = inject(FullFT(), TINY)
        assert len(state) == 0
        assert plan.upstream() == frozenset(encoder_shapes(TINY))

    def test_zero_initialised_tensors(self):
        state, _ = inject(Houlsby(4), TINY)
        for i in range(TINY.n_layers):
            lp = state.layer(i)
            assert not lp["houlsby.up.weight"].data.any()
            assert not lp["houlsby.up.bias"].data.any()
            assert lp["houlsby.down.weight"].data.any()
            assert np.abs(lp["houlsby.down.weight"].data).max() <= 0.01
        state, _ = inject(LoRA(2), TINY)
        assert all(not state[n].data.any() for n in state if n.endswith(".B"))
        state, _ = inject(AdapterBias(), TINY)
        assert all(not state[n].data.any() for n in state if n.endswith(".v"))
        state, _ = inject(WeightedSum(), TINY)
        assert not state["peft.weighted_sum.w"].data.any()

    def test_prefix_too_long(self):
        with pytest.raises(ConfigError, match="max_len"):
            inject(Prefix(8), TINY)

    def test_inject_is_deterministic(self):
        a, _ = inject(LoRA(2), TINY, seed=3)
        b, _ = inject(LoRA(2), TINY, seed=3)
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    @pytest.mark.parametrize("method", [Houlsby(4), LoRA(2), AdapterBias()])
    def test_identity_at_init(self, method):
        params = init_encoder(TINY, 0)
        state, _ = inject(method, TINY, seed=1)
        x = np.random.default_rng(2).normal(size=(4, 6, 3))
        frozen = encoder_forward(x, params)
        tuned = encoder_forward(x, params, peft.build_hooks(state))
        for a, b in zip(frozen, tuned):
            np.testing.assert_array_equal(a.data, b.data)


class TestCounts:
    @pytest.mark.parametrize("method,expected", [
        (Houlsby(32), 599_424),
        (AdapterBias(), 18_444),
        (BitFit(), 101_376),
        (LoRA(8), 294_912),
        (Prefix(5), 92_160),
        (WeightedSum(), 12),
        (HeadOnly(), 0),
    ])
    def test_base_scale(self, method, expected):
        assert count_upstream(method, BASE) == expected

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 40), st.integers(1, 9), st.integers(1, 5))
    def test_closed_forms(self, n_layers, heads, d_ffn, r, l):
        d = 4 * heads
        enc = EncoderConfig(n_layers=n_layers, d_model=d, n_heads=heads, d_ffn=d_ffn, max_len=l + 1)
        L = n_layers
        assert count_upstream(Houlsby(r), enc) == L * (2 * d * r + r + d)
        assert count_upstream(LoRA(r), enc) == L * 2 * 2 * d * r
        assert count_upstream(LoRA(r, ("v",)), enc) == L * 2 * d * r
        assert count_upstream(AdapterBias(), enc) == L * (2 * d + 1)
        assert count_upstream(Prefix(l), enc) == L * 2 * l * d
        assert count_upstream(BitFit(), enc) == L * (4 * d + d_ffn + d + 2 * d)
        assert count_upstream(WeightedSum(), enc) == L

    def test_shapes_match_allocated_tensors(self):
        for method in peft.all_methods(houlsby_r=3, lora_rank=2, prefix_len=2):
            state, _ = inject(method, TINY)
            for name, shape in peft.method_shapes(method, TINY).items():
                assert state[name].shape == shape

    def test_head_scope(self):
        plan = freeze_plan(WeightedSum(), TINY)
        inv = {**upstream_inventory(WeightedSum(), TINY), "head.weight": (8, 4), "head.bias": (4,)}
        assert count_trainable(plan, inv, scope="upstream") == 2
        assert count_trainable(plan, inv, scope="all") == 2 + 36

    def test_unknown_name(self):
        plan = FreezePlan(frozenset({"layers.0.ffn.fc9.weight"}))
        with pytest.raises(InventoryError, match="fc9"):
            count_trainable(plan, encoder_shapes(TINY))


class TestFreezePlans:
    @pytest.mark.parametrize("method", [m for m in peft.all_methods(3, 2, 2) if m.name not in ("fullft", "bitfit")])
    def test_no_encoder_parameter_trainable(self, method):
        plan = freeze_plan(method, TINY)
        assert not plan.trainable & set(encoder_shapes(TINY))
        assert set(peft.HEAD_PARAMS) <= plan.trainable

    def test_bitfit_is_exactly_the_biases(self):
        plan = freeze_plan(BitFit(), TINY)
        upstream = plan.upstream()
        assert all(n.endswith(".bias") and n.startswith("layers.") for n in upstream)
        assert not any(n.endswith((".weight", ".gain")) for n in upstream)
        assert len(upstream) == TINY.n_layers * 8
        assert "embed.proj.bias" not in upstream


class TestHoulsby:
    def test_zero_up_is_identity(self):
        rng = np.random.default_rng(0)
        h = Tensor(rng.normal(size=(3, 4)))
        out = houlsby_forward(h, Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=2)),
                              Tensor(np.zeros((2, 4))), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, h.data)

    def test_rank_one_closed_form(self):
        h = np.array([[0.7, -0.2, 1.5], [-1.1, 0.4, 0.0]])
        down = np.array([[1.0], [0.0], [0.0]])
        up = np.array([[0.5, -2.0, 1.0]])
        out = houlsby_forward(Tensor(h), Tensor(down), Tensor(np.zeros(1)), Tensor(up), Tensor(np.zeros(3)))
        phi = lambda z: 0.5 * (1 + math.erf(z / math.sqrt(2)))  # noqa: E731
        for t in range(2):
            g = h[t, 0] * phi(h[t, 0])
            np.testing.assert_allclose(out.data[t], h[t] + g * up[0], rtol=0, atol=1e-15)

    def test_gradients(self):
        rng = np.random.default_rng(1)
        leaves = [Tensor(rng.normal(size=s)) for s in [(5, 8), (8, 2), (2,), (2, 8), (8,)]]
        w = rng.normal(size=(5, 8))
        assert grad_check(lambda: (houlsby_forward(*leaves) * w).sum(), leaves) < 1e-5


class TestLoRA:
    def test_zero_b(self):
        rng = np.random.default_rng(2)
        out = lora_delta(Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=(2, 6))), Tensor(np.zeros((6, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((3, 6)))

    def test_full_rank_identity(self):
        x = np.random.default_rng(3).normal(size=(4, 5))
        out = lora_delta(Tensor(x), Tensor(np.eye(5)), Tensor(np.eye(5)))
        np.testing.assert_array_equal(out.data, x)

    def test_dense_product_oracle(self):
        rng = np.random.default_rng(4)
        x, a, b = rng.normal(size=(7, 6)), rng.normal(size=(2, 6)), rng.normal(size=(6, 2))
        dense = b @ a
        expected = np.array([dense @ row for row in x])
        assert np.max(np.abs(lora_delta(Tensor(x), Tensor(a), Tensor(b)).data - expected)) < 1e-12


class TestAdapterBias:
    def test_zero_shift_identity(self):
        rng = np.random.default_rng(5)
        h = Tensor(rng.normal(size=(3, 4)))
        out = adapterbias_forward(h, Tensor(np.zeros(4)), Tensor(rng.normal(size=4)), Tensor([0.3]))
        np.testing.assert_array_equal(out.data, h.data)

    def test_constant_alpha(self):
        h = np.random.default_rng(6).normal(size=(5, 4))
        e1 = np.eye(4)[0]
        out = adapterbias_forward(Tensor(h), Tensor(e1), Tensor(np.zeros(4)), Tensor([1.0]))
        np.testing.assert_array_equal(out.data, h + e1)

    def test_frame_dependent_alpha(self):
        h = np.array([[1.0, 0.0, 2.0], [-1.0, 3.0, 0.5]])
        v = np.array([0.2, -0.1, 0.4])
        aw, ab = np.array([0.5, -1.0, 0.25]), 0.1
        out = adapterbias_forward(Tensor(h), Tensor(v), Tensor(aw), Tensor([ab])).data
        alphas = [sum(h[t, i] * aw[i] for i in range(3)) + ab for t in range(2)]
        assert alphas[0] != alphas[1]
        for t in range(2):
            np.testing.assert_allclose(out[t], h[t] + alphas[t] * v, rtol=0, atol=1e-15)


class TestPrefixInit:
    def test_constant_frames(self):
        c = np.array([0.5, -1.0, 2.0])
        (pk, pv), = prefix_init_from_batch([np.tile(c, (2, 4, 1))], 3)
        np.testing.assert_array_equal(pk, np.tile(c, (3, 1)))
        np.testing.assert_array_equal(pv, np.tile(c, (3, 1)))

    def test_two_frames(self):
        a, b = np.array([1.0, 2.0]), np.array([3.0, -6.0])
        (pk, _), = prefix_init_from_batch([np.stack([a, b])], 2)
        np.testing.assert_array_equal(pk, np.tile((a + b) / 2, (2, 1)))

    def test_running_mean_oracle(self):
        rng = np.random.default_rng(7)
        batch = rng.normal(size=(3, 5, 4))
        mean, n = np.zeros(4), 0
        for seq in batch:
            for frame in seq:
                n += 1
                mean += (frame - mean) / n
        (pk, pv), = prefix_init_from_batch([batch], 5)
        assert np.max(np.abs(pk - mean)) < 1e-12 and np.max(np.abs(pv - mean)) < 1e-12

    def test_per_layer_inputs(self):
        params = init_encoder(TINY, 0)
        x = np.random.default_rng(8).normal(size=(2, 5, 3))
        ins = layer_inputs(x, params)
        rows = prefix_init_from_batch(ins, 2)
        assert len(rows) == TINY.n_layers
        np.testing.assert_allclose(rows[1][0][0], ins[1].data.reshape(-1, 8).mean(axis=0), atol=1e-15)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            prefix_init_from_batch([np.zeros((0, 5, 4))], 2)


class TestWeightedSum:
    def _states(self, n, seed=9):
        rng = np.random.default_rng(seed)
        return [Tensor(rng.normal(size=(3, 4))) for _ in range(n)]

    def test_zero_weights_uniform(self):
        hs = self._states(12)
        out = weighted_sum_combine(hs, Tensor(np.zeros(12)))
        expected = sum(h.data for h in hs) / 12
        np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-14)

    def test_saturation(self):
        hs = self._states(12)
        w = np.full(12, -20.0)
        w[0] = 20.0
        out = weighted_sum_combine(hs, Tensor(w))
        assert np.linalg.norm(out.data - hs[0].data) < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=16))
    def test_weights_sum_to_one(self, values):
        assert abs(weighted_sum_weights(Tensor(np.array(values))).data.sum() - 1.0) < 1e-12

    def test_permutation_equivariant(self):
        hs = self._states(5)
        w = np.random.default_rng(10).normal(size=5)
        perm = [3, 0, 4, 1, 2]
        a = weighted_sum_combine(hs, Tensor(w))
        b = weighted_sum_combine([hs[p] for p in perm], Tensor(w[perm]))
        np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-14)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            weighted_sum_combine(self._states(3), Tensor(np.zeros(4)))

    def test_count_is_layer_count(self):
        assert count_upstream(WeightedSum(), BASE) == 12


@pytest.mark.parametrize("method", [Houlsby(2), LoRA(2), AdapterBias(), Prefix(2), WeightedSum()],
                         ids=lambda m: m.name)
def test_injected_gradients_through_encoder(method):
    enc = EncoderConfig(n_layers=2, d_model=8, n_heads=2, d_ffn=8, d_input=3, max_len=8)
    params = init_encoder(enc, 0)
    state, _ = inject(method, enc, seed=1)
    rng = np.random.default_rng(11)
    for t in state.values():  # leave the exact-zero init so every path carries gradient
        t.data += rng.normal(scale=0.3, size=t.shape)
    x = rng.normal(size=(5, 3))
    w = rng.normal(size=(5, 8))
    hooks = peft.build_hooks(state)

    def objective():
        return (peft.represent(encoder_forward(x, params, hooks), state) * w).sum()

    assert grad_check(objective, list(state.values())) < 1e-5
