"""
Parameter-efficient tuning methods.

Each method is described by three things: the tensors it injects, the exact set
of trainable parameter names (its freeze plan) and the forward hooks that splice
the injected tensors into the encoder. Full fine-tuning and head-only training
are expressed the same way so every run goes through one code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import ClassVar, Iterator, Mapping, Sequence, Union

import numpy as np

from . import tensor as tn
from .errors import ConfigError, InventoryError, ShapeError
from .tensor import Tensor
from .transformer import ATTN_PROJECTIONS, EncoderConfig, HiddenStates, LayerHooks, encoder_shapes

HEAD_PARAMS = ("head.weight", "head.bias")
INIT_SCALE = 0.01


@dataclass(frozen=True)
class FullFT:
    name: ClassVar[str] = "fullft"
    label: ClassVar[str] = "FT"


@dataclass(frozen=True)
class HeadOnly:
    name: ClassVar[str] = "headonly"
    label: ClassVar[str] = "Baseline"


@dataclass(frozen=True)
class Houlsby:
    bottleneck: int = 32
    name: ClassVar[str] = "houlsby"
    label: ClassVar[str] = "Houlsby"

    def __post_init__(self):
        _positive("bottleneck", self.bottleneck)


@dataclass(frozen=True)
class LoRA:
    rank: int = 8
    targets: tuple[str, ...] = ("q", "v")
    name: ClassVar[str] = "lora"
    label: ClassVar[str] = "LoRA"

    def __post_init__(self):
        _positive("rank", self.rank)
        object.__setattr__(self, "targets", tuple(self.targets))
        if not self.targets or not set(self.targets) <= {"q", "v"} or len(set(self.targets)) != len(self.targets):
            raise ConfigError(f"method.targets must be a non-empty subset of ['q', 'v'], got {list(self.targets)}")


@dataclass(frozen=True)
class AdapterBias:
    name: ClassVar[str] = "adapterbias"
    label: ClassVar[str] = "AdapterBias"


@dataclass(frozen=True)
class BitFit:
    name: ClassVar[str] = "bitfit"
    label: ClassVar[str] = "BitFit"


@dataclass(frozen=True)
class Prefix:
    length: int = 5
    name: ClassVar[str] = "prefix"
    label: ClassVar[str] = "Prefix"

    def __post_init__(self):
        _positive("length", self.length)


@dataclass(frozen=True)
class WeightedSum:
    name: ClassVar[str] = "weightedsum"
    label: ClassVar[str] = "Weighted-sum"


MethodConfig = Union[FullFT, HeadOnly, Houlsby, LoRA, AdapterBias, BitFit, Prefix, WeightedSum]
METHODS: dict[str, type] = {
    cls.name: cls for cls in (FullFT, HeadOnly, Houlsby, AdapterBias, BitFit, LoRA, Prefix, WeightedSum)
}


def _positive(key: str, value) -> None:
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigError(f"method.{key} must be a positive integer, got {value!r}")


def method_from_dict(d: Mapping) -> MethodConfig:
    d = dict(d)
    name = d.pop("name", None)
    if name not in METHODS:
        raise ConfigError(f"method.name must be one of {sorted(METHODS)}, got {name!r}")
    cls = METHODS[name]
    allowed = {f.name for f in fields(cls)}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key method.{sorted(unknown)[0]} for method {name!r}")
    return cls(**d)


def method_to_dict(m: MethodConfig) -> dict:
    out = {"name": m.name}
    for f in fields(m):
        value = getattr(m, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def all_methods(houlsby_r: int = 32, lora_rank: int = 8, prefix_len: int = 5) -> list[MethodConfig]:
    return [FullFT(), HeadOnly(), Houlsby(houlsby_r), AdapterBias(), BitFit(),
            LoRA(lora_rank), Prefix(prefix_len), WeightedSum()]


# -- inventories -------------------------------------------------------------------

def method_shapes(method: MethodConfig, enc: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Shapes of the tensors a method injects into the encoder."""
    d, n = enc.d_model, enc.n_layers
    shapes: dict[str, tuple[int, ...]] = {}
    if isinstance(method, WeightedSum):
        return {"peft.weighted_sum.w": (n,)}
    for i in range(n):
        p = f"peft.layers.{i}."
        if isinstance(method, Houlsby):
            r = method.bottleneck
            shapes.update({p + "houlsby.down.weight": (d, r), p + "houlsby.down.bias": (r,),
                           p + "houlsby.up.weight": (r, d), p + "houlsby.up.bias": (d,)})
        elif isinstance(method, LoRA):
            for t in method.targets:
                shapes[p + f"lora.{t}.A"] = (method.rank, d)
                shapes[p + f"lora.{t}.B"] = (d, method.rank)
        elif isinstance(method, AdapterBias):
            shapes.update({p + "adapterbias.v": (d,), p + "adapterbias.alpha.weight": (d,),
                           p + "adapterbias.alpha.bias": (1,)})
        elif isinstance(method, Prefix):
            shapes.update({p + "prefix.k": (method.length, d), p + "prefix.v": (method.length, d)})
    return shapes


def bitfit_names(enc: EncoderConfig) -> list[str]:
    names = []
    for i in range(enc.n_layers):
        p = f"layers.{i}."
        names += [p + f"attn.{t}.bias" for t in ATTN_PROJECTIONS]
        names += [p + "ffn.fc1.bias", p + "ffn.fc2.bias", p + "attn_norm.bias", p + "ffn_norm.bias"]
    return names


@dataclass(frozen=True)
class FreezePlan:
    trainable: frozenset

    def __contains__(self, name: str) -> bool:
        return name in self.trainable

    def upstream(self) -> frozenset:
        return frozenset(n for n in self.trainable if n not in HEAD_PARAMS)


def freeze_plan(method: MethodConfig, enc: EncoderConfig) -> FreezePlan:
    if isinstance(method, FullFT):
        names = list(encoder_shapes(enc))
    elif isinstance(method, BitFit):
        names = bitfit_names(enc)
    else:
        names = list(method_shapes(method, enc))
    return FreezePlan(frozenset(names) | frozenset(HEAD_PARAMS))


class MethodState(Mapping[str, Tensor]):
    """Injected tensors for one run, keyed by their inventory names."""

    def __init__(self, method: MethodConfig, enc: EncoderConfig, tensors: Mapping[str, Tensor]):
        expected = method_shapes(method, enc)
        if set(expected) != set(tensors):
            raise ShapeError(f"injected tensors do not match {method.name} inventory")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        self.method = method
        self.config = enc
        self._tensors = {name: tensors[name] for name in expected}

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def layer(self, i: int) -> dict[str, Tensor]:
        prefix = f"peft.layers.{i}."
        return {k[len(prefix):]: v for k, v in self._tensors.items() if k.startswith(prefix)}


def inject(method: MethodConfig, enc: EncoderConfig, seed: int = 0) -> tuple[MethodState, FreezePlan]:
    """
    Create the injected tensors and the freeze plan for ``method``.

    Up-projections, LoRA ``B``, the AdapterBias shift and the layer weights start
    at zero so the tuned encoder computes exactly the frozen function. Prefix
    tensors are zero placeholders until :func:`prefix_init_from_batch` fills them.
    """
    if isinstance(method, Prefix) and method.length >= enc.max_len:
        raise ConfigError(f"prefix length {method.length} must be below max_len {enc.max_len}")
    rng = np.random.default_rng([seed, 11])
    tensors = {}
    for name, shape in method_shapes(method, enc).items():
        if name.endswith(("down.weight", ".A", "alpha.weight", "alpha.bias")):
            data = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data)
    return MethodState(method, enc, tensors), freeze_plan(method, enc)


def count_trainable(plan: FreezePlan, inventory: Mapping[str, tuple[int, ...]],
                    scope: str = "upstream") -> int:
    """Exact element count over the plan; ``scope="upstream"`` leaves out the head."""
    if scope not in ("upstream", "all"):
        raise ValueError(f"scope must be 'upstream' or 'all', got {scope!r}")
    names = plan.upstream() if scope == "upstream" else plan.trainable
    total = 0
    for name in names:
        if name not in inventory:
            raise InventoryError(f"trainable parameter {name!r} is not in the inventory")
        total += math.prod(inventory[name])
    return total


def upstream_inventory(method: MethodConfig, enc: EncoderConfig) -> dict[str, tuple[int, ...]]:
    return {**encoder_shapes(enc), **method_shapes(method, enc)}


def count_upstream(method: MethodConfig, enc: EncoderConfig) -> int:
    """Trainable upstream parameters without allocating any tensor."""
    return count_trainable(freeze_plan(method, enc), upstream_inventory(method, enc))


# -- forward computations --------------------------------------------------------

def houlsby_forward(h: Tensor, down_w: Tensor, down_b: Tensor, up_w: Tensor, up_b: Tensor) -> Tensor:
    return h + (tn.gelu(h @ down_w + down_b) @ up_w + up_b)


def lora_delta(x: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """``x A^T B^T``: the low-rank update added to a frozen projection's output."""
    return (x @ a.swapaxes(0, 1)) @ b.swapaxes(0, 1)


def adapterbias_forward(h: Tensor, v: Tensor, alpha_w: Tensor, alpha_b: Tensor) -> Tensor:
    alpha = h @ alpha_w.reshape(-1, 1) + alpha_b  # (..., T, 1): one weight per frame
    return h + alpha * v


def weighted_sum_weights(w: Tensor) -> Tensor:
    return tn.softmax(w, axis=-1)


def weighted_sum_combine(hs: Sequence[Tensor], w: Tensor) -> Tensor:
    if w.ndim != 1 or len(hs) != w.shape[0]:
        raise ShapeError(f"weighted sum needs one weight per layer: {len(hs)} layers, weights {w.shape}")
    stacked = tn.stack(list(hs), axis=0)
    weights = weighted_sum_weights(w).reshape((len(hs),) + (1,) * (stacked.ndim - 1))
    return (stacked * weights).sum(axis=0)


def prefix_init_from_batch(layer_inputs: Sequence, length: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """
    Prefix rows for every layer, all equal to the mean over batch and time of
    that layer's input hidden states.
    """
    if not layer_inputs:
        raise ValueError("prefix initialisation needs at least one layer")
    out = []
    for x in layer_inputs:
        x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        frames = x.reshape(-1, x.shape[-1])
        if frames.shape[0] == 0:
            raise ValueError("prefix initialisation needs a non-empty batch")
        row = frames.mean(axis=0)
        rows = np.tile(row, (length, 1))
        out.append((rows, rows.copy()))
    return out


def apply_prefix_init(state: MethodState, layer_inputs: Sequence) -> None:
    rows = prefix_init_from_batch(layer_inputs, state.method.length)
    for i, (pk, pv) in enumerate(rows):
        state[f"peft.layers.{i}.prefix.k"].data[...] = pk
        state[f"peft.layers.{i}.prefix.v"].data[...] = pv


def build_hooks(state: MethodState) -> list[LayerHooks] | None:
    method = state.method
    if not isinstance(method, (Houlsby, LoRA, AdapterBias, Prefix)):
        return None
    hooks = []
    for i in range(state.config.n_layers):
        lp = state.layer(i)
        hk = LayerHooks()
        if isinstance(method, Houlsby):
            hk.ffn_adapter = (lambda h, lp=lp: houlsby_forward(
                h, lp["houlsby.down.weight"], lp["houlsby.down.bias"],
                lp["houlsby.up.weight"], lp["houlsby.up.bias"]))
        elif isinstance(method, AdapterBias):
            hk.ffn_adapter = (lambda h, lp=lp: adapterbias_forward(
                h, lp["adapterbias.v"], lp["adapterbias.alpha.weight"], lp["adapterbias.alpha.bias"]))
        elif isinstance(method, LoRA):
            if "q" in method.targets:
                hk.q_delta = lambda x, lp=lp: lora_delta(x, lp["lora.q.A"], lp["lora.q.B"])
            if "v" in method.targets:
                hk.v_delta = lambda x, lp=lp: lora_delta(x, lp["lora.v.A"], lp["lora.v.B"])
        else:
            hk.prefix = (lp["prefix.k"], lp["prefix.v"])
        hooks.append(hk)
    return hooks


def represent(states: HiddenStates, state: MethodState) -> Tensor:
    """The representation handed to the downstream head."""
    if isinstance(state.method, WeightedSum):
        return weighted_sum_combine(states, state["peft.weighted_sum.w"])
    return states[-1]
