"""Tests for the gated low-rank layers, the dual-branch attention block,
and the trainable-parameter partitioning.

Attention outputs are checked against a dense einsum re-implementation;
the low-rank conv path is checked against an explicit dense kernel built
from the factors.
"""

import numpy as np
import pytest

from garmentgen.autodiff import Tape, Tensor, mean_all, mul, precision, sum_all
from garmentgen.conditioning import (
    MODE_GROUPS,
    AdaptiveAttentionBlock,
    GatedLoraLayer,
    InputTag,
    adaptive_attention,
    attend,
    enumerate_trainable,
    partition_by_groups,
)
from garmentgen.errors import ConfigError, DimensionError, IntegrityError


REF = InputTag.REFERENCE_FEATURE
LAT = InputTag.LATENT_NOISE


def linear_layer(d_in, d_out, seed=0):
    return GatedLoraLayer.linear(d_in, d_out, np.random.default_rng(seed))


# ----------------------------------------------------------------------
# gated low-rank linear layers


def test_linear_forward_hand_example():
    layer = GatedLoraLayer("linear", Tensor(np.eye(2)), Tensor(np.zeros(2)))
    layer.rank = 1
    layer.lora_A = Tensor([[1.0, 0.0]])
    layer.lora_B = Tensor([[1.0], [2.0]])
    x = Tensor([[3.0, 4.0]])
    # Gate open: y = x @ I + (x @ A^T) @ B^T = [3,4] + 3*[1,2] = [6,10]
    np.testing.assert_allclose(layer.forward(x, REF).data, [[6.0, 10.0]])
    # Gate closed: base path only.
    np.testing.assert_allclose(layer.forward(x, LAT).data, [[3.0, 4.0]])


def test_attach_is_transparent_at_init():
    rng = np.random.default_rng(1)
    layer = linear_layer(6, 10, seed=1)
    x = Tensor(rng.standard_normal((4, 6)).astype(np.float32))
    before = layer.forward(x, REF).data.copy()
    layer.attach_lora(rank=3, rng=rng)
    after = layer.forward(x, REF).data
    # Zero-initialized up-projection: bitwise identical output.
    assert np.array_equal(before, after)


def test_gate_closed_ignores_trained_factors():
    rng = np.random.default_rng(2)
    layer = linear_layer(5, 5, seed=2)
    x = Tensor(rng.standard_normal((3, 5)).astype(np.float32))
    base = layer.forward(x, LAT).data.copy()
    layer.attach_lora(rank=2, rng=rng)
    layer.lora_A.data[:] = rng.standard_normal(layer.lora_A.shape)
    layer.lora_B.data[:] = rng.standard_normal(layer.lora_B.shape)
    assert np.array_equal(layer.forward(x, LAT).data, base)
    assert not np.allclose(layer.forward(x, REF).data, base)


def test_lora_init_shapes_and_distribution():
    rng = np.random.default_rng(3)
    layer = linear_layer(40, 30, seed=3)
    layer.attach_lora(rank=4, rng=rng)
    assert layer.lora_A.shape == (4, 40)
    assert layer.lora_B.shape == (30, 4)
    assert np.array_equal(layer.lora_B.data, np.zeros((30, 4)))
    assert 0.01 < layer.lora_A.data.std() < 0.03
    # Attaching freezes the base weight and bias.
    assert not layer.weight.requires_grad
    assert not layer.bias.requires_grad
    assert layer.lora_A.requires_grad and layer.lora_B.requires_grad


def test_double_attach_rejected():
    rng = np.random.default_rng(4)
    layer = linear_layer(4, 4, seed=4)
    layer.attach_lora(rank=1, rng=rng)
    with pytest.raises(IntegrityError):
        layer.attach_lora(rank=1, rng=rng)


def test_attach_rejects_bad_rank():
    layer = linear_layer(4, 4)
    with pytest.raises(ConfigError):
        layer.attach_lora(rank=0, rng=np.random.default_rng(0))


def test_linear_lora_matches_dense_delta():
    rng = np.random.default_rng(5)
    layer = linear_layer(8, 6, seed=5)
    layer.attach_lora(rank=2, rng=rng)
    layer.lora_A.data[:] = rng.standard_normal((2, 8)) * 0.3
    layer.lora_B.data[:] = rng.standard_normal((6, 2)) * 0.3
    x = rng.standard_normal((5, 8)).astype(np.float32)
    out = layer.forward(Tensor(x), REF).data
    w_eff = layer.weight.data + layer.lora_B.data @ layer.lora_A.data
    want = x @ w_eff.T + layer.bias.data
    np.testing.assert_allclose(out, want, rtol=1e-5, atol=1e-6)


def test_forward_requires_tag():
    layer = linear_layer(3, 3)
    with pytest.raises(ConfigError):
        layer.forward(Tensor(np.zeros((1, 3))), "reference")


# ----------------------------------------------------------------------
# gated low-rank conv layers


def test_conv_lora_matches_dense_kernel_delta():
    rng = np.random.default_rng(6)
    layer = GatedLoraLayer.conv(3, 5, 3, rng)
    layer.attach_lora(rank=2, rng=rng)
    layer.lora_A.data[:] = rng.standard_normal(layer.lora_A.shape) * 0.2
    layer.lora_B.data[:] = rng.standard_normal(layer.lora_B.shape) * 0.2
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)

    out = layer.forward(Tensor(x), REF).data

    # Oracle: dense convolution with kernel W + (B @ A) reshaped.
    from garmentgen.autodiff import conv2d
    delta = (layer.lora_B.data @ layer.lora_A.data).reshape(5, 3, 3, 3)
    dense = conv2d(Tensor(x), Tensor(layer.weight.data + delta),
                   stride=1, padding=1, bias=Tensor(layer.bias.data)).data
    np.testing.assert_allclose(out, dense, rtol=1e-4, atol=1e-5)


def test_conv_lora_factor_shapes_cover_unfolded_patches():
    rng = np.random.default_rng(7)
    layer = GatedLoraLayer.conv(4, 6, 3, rng)
    layer.attach_lora(rank=2, rng=rng)
    assert layer.lora_A.shape == (2, 4 * 3 * 3)
    assert layer.lora_B.shape == (6, 2)


def test_conv_gate_closed_is_base_conv():
    rng = np.random.default_rng(8)
    layer = GatedLoraLayer.conv(2, 2, 3, rng)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)).astype(np.float32))
    base = layer.forward(x, LAT).data.copy()
    layer.attach_lora(rank=1, rng=rng)
    layer.lora_B.data[:] = 1.0
    assert np.array_equal(layer.forward(x, LAT).data, base)
    assert not np.allclose(layer.forward(x, REF).data, base)


def test_strided_conv_lora_shapes():
    rng = np.random.default_rng(9)
    layer = GatedLoraLayer.conv(2, 4, 3, rng, stride=2)
    layer.attach_lora(rank=1, rng=rng)
    out = layer.forward(Tensor(rng.standard_normal((1, 2, 8, 8)).astype(np.float32)), REF)
    assert out.shape == (1, 4, 4, 4)


def test_lora_gradients_flow_only_through_open_gate():
    rng = np.random.default_rng(10)
    layer = linear_layer(4, 4, seed=10)
    layer.attach_lora(rank=2, rng=rng)
    layer.lora_B.data[:] = 0.1  # make the A path live
    x = Tensor(rng.standard_normal((2, 4)).astype(np.float32))

    with Tape() as tape:
        tape.backward(sum_all(layer.forward(x, REF)))
    assert layer.lora_A.grad is not None
    assert layer.lora_B.grad is not None
    assert layer.weight.grad is None  # frozen by attach

    from garmentgen.autodiff import zero_grads
    zero_grads([layer.lora_A, layer.lora_B])
    with Tape() as tape:
        tape.backward(sum_all(layer.forward(x, LAT)))
    assert layer.lora_A.grad is None
    assert layer.lora_B.grad is None


# ----------------------------------------------------------------------
# attention


def dense_attention_oracle(q, k, v, heads):
    """Straightforward per-head softmax attention in numpy."""
    b, n, d = q.shape
    m = k.shape[1]
    hd = d // heads
    out = np.zeros((b, n, d), dtype=np.float64)
    for bi in range(b):
        for h in range(heads):
            qs = q[bi, :, h * hd : (h + 1) * hd]
            ks = k[bi, :, h * hd : (h + 1) * hd]
            vs = v[bi, :, h * hd : (h + 1) * hd]
            s = qs @ ks.T / np.sqrt(hd)
            e = np.exp(s - s.max(axis=-1, keepdims=True))
            p = e / e.sum(axis=-1, keepdims=True)
            out[bi, :, h * hd : (h + 1) * hd] = p @ vs
    return out


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_attend_matches_dense_oracle(heads):
    rng = np.random.default_rng(11 + heads)
    b, n, m, d = 2, 3, 5, 8
    q = rng.standard_normal((b, n, d))
    k = rng.standard_normal((b, m, d))
    v = rng.standard_normal((b, m, d))
    out = attend(Tensor(q, dtype=np.float64), Tensor(k, dtype=np.float64),
                 Tensor(v, dtype=np.float64), heads)
    np.testing.assert_allclose(out.data, dense_attention_oracle(q, k, v, heads), rtol=1e-10)


def test_block_self_plus_reference_matches_oracle():
    rng = np.random.default_rng(12)
    d, heads = 8, 2
    block = AdaptiveAttentionBlock(d, heads, rng)
    # Perturb adapters away from the key/value copies so both branches differ.
    block.adapter_k.data[:] += rng.standard_normal((d, d)) * 0.1
    block.adapter_v.data[:] += rng.standard_normal((d, d)) * 0.1

    hidden = rng.standard_normal((2, 4, d))
    refs = rng.standard_normal((2, 6, d))
    with precision("float64"):
        out = block.forward(Tensor(hidden, dtype=np.float64),
                            Tensor(refs, dtype=np.float64), LAT).data

    def lin(x, layer):
        return x @ layer.weight.data.T

    q = lin(hidden, block.w_q)
    k = lin(hidden, block.w_k)
    v = lin(hidden, block.w_v)
    kp = refs @ block.adapter_k.data.T
    vp = refs @ block.adapter_v.data.T
    want = lin(dense_attention_oracle(q, k, v, heads)
               + dense_attention_oracle(q, kp, vp, heads), block.w_o)
    np.testing.assert_allclose(out, want, rtol=1e-9)


def test_block_without_refs_is_pure_self_attention():
    rng = np.random.default_rng(13)
    d, heads = 8, 2
    block = AdaptiveAttentionBlock(d, heads, rng)
    hidden = rng.standard_normal((1, 5, d))
    with precision("float64"):
        out = block.forward(Tensor(hidden, dtype=np.float64), None, LAT).data

    def lin(x, layer):
        return x @ layer.weight.data.T

    want = lin(dense_attention_oracle(lin(hidden, block.w_q), lin(hidden, block.w_k),
                                      lin(hidden, block.w_v), heads), block.w_o)
    np.testing.assert_allclose(out, want, rtol=1e-9)


def test_missing_refs_skip_adapters_structurally():
    # With refs=None the adapters must not appear in the graph at all:
    # no gradient buffers after backward.
    rng = np.random.default_rng(14)
    block = AdaptiveAttentionBlock(8, 2, rng)
    hidden = Tensor(rng.standard_normal((1, 3, 8)).astype(np.float32))
    with Tape() as tape:
        tape.backward(sum_all(block.forward(hidden, None, LAT)))
    assert block.adapter_k.grad is None
    assert block.adapter_v.grad is None
    assert block.w_q.weight.grad is not None

    with Tape() as tape:
        refs = Tensor(rng.standard_normal((1, 2, 8)).astype(np.float32))
        tape.backward(sum_all(block.forward(hidden, refs, LAT)))
    assert block.adapter_k.grad is not None
    assert block.adapter_v.grad is not None


def test_adapters_start_as_copies_of_base_projections():
    block = AdaptiveAttentionBlock(8, 2, np.random.default_rng(15))
    assert np.array_equal(block.adapter_k.data, block.w_k.weight.data)
    assert np.array_equal(block.adapter_v.data, block.w_v.weight.data)
    assert block.adapter_k.data is not block.w_k.weight.data


def test_init_adapters_restores_copies_after_drift():
    rng = np.random.default_rng(16)
    block = AdaptiveAttentionBlock(8, 2, rng)
    block.adapter_k.data[:] += 1.0
    block.w_v.weight.data[:] += 0.5
    block.init_adapters_from_base()
    assert np.array_equal(block.adapter_k.data, block.w_k.weight.data)
    assert np.array_equal(block.adapter_v.data, block.w_v.weight.data)


def test_reference_equal_to_hidden_doubles_attention_output():
    # With adapters freshly copied from the base projections, an identity
    # output map, and refs == hidden, both branches compute the same
    # attention, so the block output is exactly twice the self-only output.
    rng = np.random.default_rng(17)
    d, heads = 8, 2
    block = AdaptiveAttentionBlock(d, heads, rng)
    block.w_o.weight.data[:] = np.eye(d)
    block.init_adapters_from_base()
    hidden = rng.standard_normal((2, 5, d)).astype(np.float32)
    solo = block.forward(Tensor(hidden), None, LAT).data
    both = block.forward(Tensor(hidden), Tensor(hidden.copy()), LAT).data
    np.testing.assert_allclose(both, 2.0 * solo, rtol=1e-6, atol=1e-7)


def test_block_validates_shapes():
    rng = np.random.default_rng(18)
    block = AdaptiveAttentionBlock(8, 2, rng)
    with pytest.raises(DimensionError):
        block.forward(Tensor(np.zeros((2, 3, 7))), None, LAT)
    with pytest.raises(DimensionError):
        block.forward(Tensor(np.zeros((2, 3, 8))), Tensor(np.zeros((1, 2, 8))), LAT)
    with pytest.raises(DimensionError):
        block.forward(Tensor(np.zeros((2, 3, 8))), Tensor(np.zeros((2, 2, 7))), LAT)


def test_block_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        AdaptiveAttentionBlock(8, 3, np.random.default_rng(0))


def test_adaptive_attention_helper_uses_closed_gate():
    rng = np.random.default_rng(19)
    block = AdaptiveAttentionBlock(8, 2, rng)
    block.w_q.attach_lora(rank=1, rng=rng)
    block.w_q.lora_B.data[:] = 5.0  # would change output if the gate opened
    hidden = Tensor(rng.standard_normal((1, 3, 8)).astype(np.float32))
    refs = Tensor(rng.standard_normal((1, 2, 8)).astype(np.float32))
    out = adaptive_attention(block, hidden, refs)
    want = block.forward(hidden, refs, LAT)
    assert np.array_equal(out.data, want.data)


def test_attention_gradients_reach_all_branches():
    rng = np.random.default_rng(20)
    block = AdaptiveAttentionBlock(8, 2, rng)
    with precision("float64"):
        hidden = Tensor(rng.standard_normal((1, 3, 8)), requires_grad=True)
        refs = Tensor(rng.standard_normal((1, 4, 8)), requires_grad=True)
        from garmentgen.autodiff import grad_check
        params = {
            "hidden": hidden,
            "refs": refs,
            "adapter_k": block.adapter_k,
            "adapter_v": block.adapter_v,
            "w_q": block.w_q.weight,
        }
        # Rebuild the f64 view of the block's params for checking.
        for layer in (block.w_q, block.w_k, block.w_v, block.w_o):
            layer.weight.data = layer.weight.data.astype(np.float64)
        block.adapter_k.data = block.adapter_k.data.astype(np.float64)
        block.adapter_v.data = block.adapter_v.data.astype(np.float64)
        err = grad_check(lambda: mean_all(block.forward(hidden, refs, LAT)), params)
    assert err < 1e-6


# ----------------------------------------------------------------------
# parameter partitioning


class _TinyModel:
    """Minimal object exposing named_parameters() for partition tests."""

    def __init__(self, entries):
        self.entries = entries

    def named_parameters(self):
        return list(self.entries)


def test_partition_by_groups_splits_and_flags():
    a = Tensor([1.0], requires_grad=False)
    b = Tensor([2.0], requires_grad=True)
    c = Tensor([3.0], requires_grad=True)
    model = _TinyModel([("x.base", a, "base"), ("x.lora", b, "lora"), ("x.adapter", c, "adapter")])
    part = partition_by_groups(model, {"lora", "adapter"})
    assert [n for n, _ in part.trainable] == ["x.lora", "x.adapter"]
    assert [n for n, _ in part.frozen] == ["x.base"]
    assert part.group_counts == {"base": 1, "lora": 1, "adapter": 1}
    assert b.requires_grad and c.requires_grad and not a.requires_grad


def test_partition_clears_stale_grads_on_frozen():
    a = Tensor([1.0], requires_grad=True)
    a.grad = np.array([9.0], dtype=np.float32)
    model = _TinyModel([("p", a, "base")])
    part = partition_by_groups(model, {"lora"})
    assert part.trainable == []
    assert not a.requires_grad
    assert a.grad is None


def test_partition_rejects_duplicate_names_and_tensors():
    t = Tensor([1.0])
    with pytest.raises(IntegrityError):
        partition_by_groups(_TinyModel([("p", t, "base"), ("p", Tensor([2.0]), "base")]), {"base"})
    with pytest.raises(IntegrityError):
        partition_by_groups(_TinyModel([("p", t, "base"), ("q", t, "base")]), {"base"})


def test_partition_rejects_unknown_group():
    with pytest.raises(IntegrityError):
        partition_by_groups(_TinyModel([("p", Tensor([1.0]), "other")]), {"base"})


def test_mode_groups_table():
    assert MODE_GROUPS["finetuning"] == {"base", "lora", "adapter"}
    assert MODE_GROUPS["only_lora"] == {"lora"}
    assert MODE_GROUPS["only_adapter"] == {"adapter"}
    assert MODE_GROUPS["full"] == {"lora", "adapter"}


def test_enumerate_trainable_rejects_unknown_mode():
    with pytest.raises(ConfigError):
        enumerate_trainable(_TinyModel([]), "everything")


def test_enumerate_trainable_mode_counts_nest():
    entries = []
    for i in range(4):
        entries.append((f"b{i}", Tensor([float(i)]), "base"))
    for i in range(3):
        entries.append((f"l{i}", Tensor([float(i)]), "lora"))
    for i in range(2):
        entries.append((f"a{i}", Tensor([float(i)]), "adapter"))
    model = _TinyModel(entries)
    sizes = {m: enumerate_trainable(model, m).trainable_count for m in MODE_GROUPS}
    assert sizes["finetuning"] == 9
    assert sizes["full"] == 5
    assert sizes["only_lora"] == 3
    assert sizes["only_adapter"] == 2
    assert sizes["full"] == sizes["only_lora"] + sizes["only_adapter"]
    assert sizes["finetuning"] > sizes["full"] > sizes["only_lora"] > sizes["only_adapter"]
