"""Reference conditioning primitives.

Two mechanisms live here:

* GatedLoraLayer — a linear or conv layer whose low-rank update (B @ A)
  is added to the frozen base output only when the input is tagged as
  reference content.  With the gate closed the layer is byte-for-byte
  the base layer, so one parameter store can serve both as a reference
  encoder (gates open) and as a denoiser (gates closed).

* AdaptiveAttentionBlock — self-attention plus a second read-only
  attention branch over injected reference features, through trainable
  key/value adapters that start as copies of the frozen projections.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, IntegrityError


class InputTag(Enum):
    LATENT_NOISE = "latent_noise"
    REFERENCE_FEATURE = "reference_feature"


class GatedLoraLayer:
    """y = base(x) + gate(tag) * (x @ A^T) @ B^T.

    The base transform is a dense linear map ([d_out, d_in] weight, input
    applied on the right) or a 2-d conv ([O, C, k, k] kernel, low-rank
    factors acting on the unfolded C*k*k patch rows).  `attach_lora`
    zero-initializes B, so a freshly attached layer is transparent, and
    freezes the base parameters from that point on.
    """

    def __init__(self, kind: str, weight: Tensor, bias: Tensor | None = None,
                 stride: int = 1, padding: int | None = None):
        if kind not in ("linear", "conv"):
            raise ConfigError(f"unknown layer kind {kind!r}")
        if kind == "linear" and weight.ndim != 2:
            raise DimensionError(f"linear weight must be [d_out, d_in], got {weight.shape}")
        if kind == "conv":
            if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
                raise DimensionError(f"conv kernel must be [O,C,k,k], got {weight.shape}")
            if padding is None:
                padding = (weight.shape[2] - 1) // 2
        self.kind = kind
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding
        self.rank = 0
        self.lora_A: Tensor | None = None
        self.lora_B: Tensor | None = None

    @classmethod
    def linear(cls, d_in: int, d_out: int, rng: np.random.Generator,
               bias: bool = True, scale: float | None = None) -> "GatedLoraLayer":
        std = scale if scale is not None else 1.0 / np.sqrt(d_in)
        w = Tensor(rng.normal(0.0, std, size=(d_out, d_in)), requires_grad=True)
        b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None
        return cls("linear", w, b)

    @classmethod
    def conv(cls, c_in: int, c_out: int, k: int, rng: np.random.Generator,
             stride: int = 1, bias: bool = True) -> "GatedLoraLayer":
        std = 1.0 / np.sqrt(c_in * k * k)
        w = Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)), requires_grad=True)
        b = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        return cls("conv", w, b, stride=stride)

    @property
    def fan_in(self) -> int:
        if self.kind == "linear":
            return self.weight.shape[1]
        _, c, k, _ = self.weight.shape
        return c * k * k

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]

    def attach_lora(self, rank: int, rng: np.random.Generator) -> None:
        if rank < 1:
            raise ConfigError(f"low-rank update needs rank >= 1, got {rank}")
        if self.lora_A is not None:
            raise IntegrityError("low-rank factors already attached")
        self.rank = rank
        self.lora_A = Tensor(rng.normal(0.0, 0.02, size=(rank, self.fan_in)), requires_grad=True)
        self.lora_B = Tensor(np.zeros((self.fan_out, rank)), requires_grad=True)
        self.weight.requires_grad = False
        if self.bias is not None:
            self.bias.requires_grad = False

    def gate(self, tag: InputTag) -> bool:
        return self.lora_A is not None and tag is InputTag.REFERENCE_FEATURE

    def forward(self, x: Tensor, tag: InputTag) -> Tensor:
        if not isinstance(tag, InputTag):
            raise ConfigError(f"forward needs an InputTag, got {tag!r}")
        if self.kind == "linear":
            return self._forward_linear(x, tag)
        return self._forward_conv(x, tag)

    def _forward_linear(self, x: Tensor, tag: InputTag) -> Tensor:
        if x.shape[-1] != self.weight.shape[1]:
            raise DimensionError(
                f"linear input {x.shape} does not match weight {self.weight.shape}")
        y = ad.matmul(x, ad.transpose(self.weight))
        if self.gate(tag):
            y = ad.add(y, ad.matmul(ad.matmul(x, ad.transpose(self.lora_A)),
                                    ad.transpose(self.lora_B)))
        if self.bias is not None:
            y = ad.add(y, self.bias)
        return y

    def _forward_conv(self, x: Tensor, tag: InputTag) -> Tensor:
        unbatched = x.ndim == 3
        x4 = ad.reshape(x, (1,) + x.shape) if unbatched else x
        if x4.ndim != 4 or x4.shape[1] != self.weight.shape[1]:
            raise DimensionError(
                f"conv input {x.shape} does not match kernel {self.weight.shape}")
        o, _, k, _ = self.weight.shape
        n, _, h, w = x4.shape
        ho, wo = ad.conv_output_hw(h, w, k, self.stride, self.padding)
        # One unfold serves both the base kernel and the low-rank update.
        cols = ad.im2col(x4, k, self.stride, self.padding)
        y = ad.matmul(cols, ad.transpose(ad.reshape(self.weight, (o, self.fan_in))))
        if self.gate(tag):
            y = ad.add(y, ad.matmul(ad.matmul(cols, ad.transpose(self.lora_A)),
                                    ad.transpose(self.lora_B)))
        y = ad.transpose(ad.reshape(y, (n, ho, wo, o)), (0, 3, 1, 2))
        if self.bias is not None:
            y = ad.add(y, ad.reshape(self.bias, (1, o, 1, 1)))
        return ad.reshape(y, (o, ho, wo)) if unbatched else y

    def named_params(self, prefix: str):
        """(name, tensor, group) triples; base params first, factors after."""
        out = [(f"{prefix}.weight", self.weight, "base")]
        if self.bias is not None:
            out.append((f"{prefix}.bias", self.bias, "base"))
        if self.lora_A is not None:
            out.append((f"{prefix}.lora_A", self.lora_A, "lora"))
            out.append((f"{prefix}.lora_B", self.lora_B, "lora"))
        return out


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, hd = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * hd))


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    hd = qh.shape[-1]
    # 1/sqrt(d) applied to Q, the small operand, rather than the scores.
    scores = ad.matmul(ad.scale(qh, 1.0 / np.sqrt(hd)), ad.transpose(kh, (0, 1, 3, 2)))
    return _merge_heads(ad.matmul(ad.softmax_lastdim(scores), vh))


class AdaptiveAttentionBlock:
    """Softmax(Q K^T / sqrt(d)) V  +  Softmax(Q K'^T / sqrt(d)) V'.

    Q, K, V come from the running hidden state through gate-able
    projections; K', V' come from injected reference features through the
    trainable adapters.  The reference branch is skipped entirely when no
    features are supplied — absent conditioning is structural, not a
    zero tensor.
    """

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads != 0:
            raise ConfigError(f"{heads} heads do not divide d_model={d_model}")
        self.d_model = d_model
        self.heads = heads
        self.w_q = GatedLoraLayer.linear(d_model, d_model, rng, bias=False)
        self.w_k = GatedLoraLayer.linear(d_model, d_model, rng, bias=False)
        self.w_v = GatedLoraLayer.linear(d_model, d_model, rng, bias=False)
        self.w_o = GatedLoraLayer.linear(d_model, d_model, rng, bias=False)
        self.adapter_k = Tensor(self.w_k.weight.data.copy(), requires_grad=True)
        self.adapter_v = Tensor(self.w_v.weight.data.copy(), requires_grad=True)

    def init_adapters_from_base(self) -> None:
        """Reset K'/V' adapters to bitwise copies of the (frozen) K/V
        projections — the warm start used when adapter training begins."""
        self.adapter_k.data[...] = self.w_k.weight.data
        self.adapter_v.data[...] = self.w_v.weight.data

    def forward(self, hidden: Tensor, refs: Tensor | None, tag: InputTag) -> Tensor:
        if hidden.ndim != 3 or hidden.shape[-1] != self.d_model:
            raise DimensionError(f"attention input must be [B,n,{self.d_model}], got {hidden.shape}")
        q = self.w_q.forward(hidden, tag)
        k = self.w_k.forward(hidden, tag)
        v = self.w_v.forward(hidden, tag)
        out = attend(q, k, v, self.heads)
        if refs is not None:
            if refs.ndim != 3 or refs.shape[-1] != self.d_model or refs.shape[0] != hidden.shape[0]:
                raise DimensionError(
                    f"reference features must be [B,m,{self.d_model}] with matching batch, "
                    f"got {refs.shape} vs hidden {hidden.shape}")
            kp = ad.matmul(refs, ad.transpose(self.adapter_k))
            vp = ad.matmul(refs, ad.transpose(self.adapter_v))
            out = ad.add(out, attend(q, kp, vp, self.heads))
        return self.w_o.forward(out, tag)

    def named_params(self, prefix: str):
        out = []
        for sub, layer in (("w_q", self.w_q), ("w_k", self.w_k),
                           ("w_v", self.w_v), ("w_o", self.w_o)):
            out.extend(layer.named_params(f"{prefix}.{sub}"))
        out.append((f"{prefix}.adapter_k", self.adapter_k, "adapter"))
        out.append((f"{prefix}.adapter_v", self.adapter_v, "adapter"))
        return out


def adaptive_attention(block: AdaptiveAttentionBlock, hidden: Tensor,
                       refs: Tensor | None) -> Tensor:
    """Denoising-path attention: gates closed, reference branch active
    whenever features are supplied."""
    return block.forward(hidden, refs, InputTag.LATENT_NOISE)


@dataclass
class ParamPartition:
    """Disjoint trainable/frozen split of a model's parameters."""

    trainable: list = field(default_factory=list)   # (name, Tensor)
    frozen: list = field(default_factory=list)
    group_counts: dict = field(default_factory=dict)  # group -> scalar param count

    @property
    def trainable_count(self) -> int:
        return sum(t.size for _, t in self.trainable)

    @property
    def frozen_count(self) -> int:
        return sum(t.size for _, t in self.frozen)


# Every parameter a model registers belongs to exactly one of these groups.
PARAM_GROUPS = {"base", "lora", "adapter"}

# Which parameter groups train under each ablation mode.
MODE_GROUPS = {
    "finetuning": {"base", "lora", "adapter"},
    "only_lora": {"lora"},
    "only_adapter": {"adapter"},
    "full": {"lora", "adapter"},
}


def partition_by_groups(model, wanted: set[str]) -> ParamPartition:
    """Split `model.named_parameters()` into trainable (groups in
    `wanted`) and frozen, setting requires_grad flags to match.  Verifies
    the partition is exact: no duplicate tensors or names, every
    parameter lands on exactly one side."""
    part = ParamPartition()
    seen: set[int] = set()
    names: set[str] = set()
    for name, tensor, group in model.named_parameters():
        if id(tensor) in seen:
            raise IntegrityError(f"parameter {name!r} appears twice in the registry")
        if name in names:
            raise IntegrityError(f"duplicate parameter name {name!r}")
        if group not in PARAM_GROUPS:
            raise IntegrityError(f"parameter {name!r} has unknown group {group!r}")
        seen.add(id(tensor))
        names.add(name)
        part.group_counts[group] = part.group_counts.get(group, 0) + tensor.size
        if group in wanted:
            tensor.requires_grad = True
            part.trainable.append((name, tensor))
        else:
            tensor.requires_grad = False
            tensor.grad = None
            part.frozen.append((name, tensor))
    if part.trainable_count + part.frozen_count != sum(part.group_counts.values()):
        raise IntegrityError("trainable/frozen split does not cover the parameter registry")
    return part


def enumerate_trainable(model, mode: str) -> ParamPartition:
    """Partition for one ablation mode: finetuning trains everything,
    only_lora / only_adapter train one mechanism, full trains both
    mechanisms on a frozen base."""
    if mode not in MODE_GROUPS:
        raise ConfigError(f"unknown ablation mode {mode!r}; expected one of {sorted(MODE_GROUPS)}")
    return partition_by_groups(model, MODE_GROUPS[mode])
