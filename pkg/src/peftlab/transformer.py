"""Post-LayerNorm transformer encoder with attachment points for tuning methods."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterator, Mapping

import numpy as np

from . import tensor as tn
from .errors import ConfigError, LengthError, ShapeError
from .tensor import Tensor

ATTN_PROJECTIONS = ("q", "k", "v", "o")


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 256
    d_input: int = 16
    max_len: int = 64

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"encoder.{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"encoder.d_model ({self.d_model}) must be divisible by encoder.n_heads ({self.n_heads})")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def encoder_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every encoder parameter, in a stable order."""
    d, f = cfg.d_model, cfg.d_ffn
    shapes: dict[str, tuple[int, ...]] = {
        "embed.proj.weight": (cfg.d_input, d),
        "embed.proj.bias": (d,),
        "embed.pos": (cfg.max_len, d),
        "embed.mask": (cfg.d_input,),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        for name in ATTN_PROJECTIONS:
            shapes[p + f"attn.{name}.weight"] = (d, d)
            shapes[p + f"attn.{name}.bias"] = (d,)
        shapes[p + "attn_norm.gain"] = (d,)
        shapes[p + "attn_norm.bias"] = (d,)
        shapes[p + "ffn.fc1.weight"] = (d, f)
        shapes[p + "ffn.fc1.bias"] = (f,)
        shapes[p + "ffn.fc2.weight"] = (f, d)
        shapes[p + "ffn.fc2.bias"] = (d,)
        shapes[p + "ffn_norm.gain"] = (d,)
        shapes[p + "ffn_norm.bias"] = (d,)
    return shapes


def count_encoder_params(cfg: EncoderConfig) -> int:
    return sum(math.prod(s) for s in encoder_shapes(cfg).values())


class EncoderParams(Mapping[str, Tensor]):
    """Named encoder tensors bound to the configuration that produced them."""

    def __init__(self, config: EncoderConfig, tensors: Mapping[str, Tensor]):
        expected = encoder_shapes(config)
        missing = set(expected) - set(tensors)
        if missing:
            raise ShapeError(f"encoder parameters missing: {sorted(missing)[:5]}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        self.config = config
        self._tensors = {name: tensors[name] for name in expected}

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def layer(self, i: int) -> dict[str, Tensor]:
        prefix = f"layers.{i}."
        return {k[len(prefix):]: v for k, v in self._tensors.items() if k.startswith(prefix)}

    def clone(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: Tensor(v.data.copy()) for k, v in self._tensors.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._tensors.items()}


def init_encoder(cfg: EncoderConfig, seed: int) -> EncoderParams:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in encoder_shapes(cfg).items():
        if name.endswith(".weight"):
            data = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        elif name.endswith(".gain"):
            data = np.ones(shape)
        elif name == "embed.pos":
            data = rng.normal(0.0, 0.1, size=shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data)
    return EncoderParams(cfg, tensors)


@dataclass
class LayerHooks:
    """Per-layer attachment points. ``None`` means the frozen computation is used as is."""

    q_delta: Callable[[Tensor], Tensor] | None = None
    v_delta: Callable[[Tensor], Tensor] | None = None
    prefix: tuple[Tensor, Tensor] | None = None
    ffn_adapter: Callable[[Tensor], Tensor] | None = None


HiddenStates = list  # list[Tensor], one (..., T, d) tensor per layer in depth order


def _linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return x @ weight + bias


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, t, d = x.shape
    return x.reshape(*lead, t, n_heads, d // n_heads).swapaxes(-2, -3)


def mha_forward(x: Tensor, lp: Mapping[str, Tensor], n_heads: int,
                hooks: LayerHooks | None = None, return_attention: bool = False):
    """
    Multi-head scaled dot-product self-attention over the second-to-last axis.

    With a prefix ``(P_k, P_v)`` of shape ``(l, d)``, the prefix rows are
    prepended to the projected keys and values so each query attends over
    ``l + T`` positions.
    """
    hooks = hooks or LayerHooks()
    *lead, t, d = x.shape
    q = _linear(x, lp["attn.q.weight"], lp["attn.q.bias"])
    k = _linear(x, lp["attn.k.weight"], lp["attn.k.bias"])
    v = _linear(x, lp["attn.v.weight"], lp["attn.v.bias"])
    if hooks.q_delta is not None:
        q = q + hooks.q_delta(x)
    if hooks.v_delta is not None:
        v = v + hooks.v_delta(x)
    if hooks.prefix is not None:
        pk, pv = hooks.prefix
        if pk.ndim != 2 or pk.shape[1] != d or pv.shape != pk.shape:
            raise ShapeError(f"prefix shapes {pk.shape}/{pv.shape} do not match model dim {d}")
        l = pk.shape[0]
        k = tn.concat([tn.broadcast_to(pk, (*lead, l, d)), k], axis=-2)
        v = tn.concat([tn.broadcast_to(pv, (*lead, l, d)), v], axis=-2)

    qh, kh, vh = (_split_heads(z, n_heads) for z in (q, k, v))
    scores = (qh @ kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(d // n_heads))
    att = tn.softmax(scores, axis=-1)
    ctx = (att @ vh).swapaxes(-2, -3).reshape(*lead, t, d)
    out = _linear(ctx, lp["attn.o.weight"], lp["attn.o.bias"])
    if return_attention:
        return out, att
    return out


def ffn_forward(x: Tensor, lp: Mapping[str, Tensor],
                adapter_hook: Callable[[Tensor], Tensor] | None = None) -> Tensor:
    h = _linear(tn.gelu(_linear(x, lp["ffn.fc1.weight"], lp["ffn.fc1.bias"])),
                lp["ffn.fc2.weight"], lp["ffn.fc2.bias"])
    if adapter_hook is not None:
        h = adapter_hook(h)
    return tn.layer_norm(x + h, lp["ffn_norm.gain"], lp["ffn_norm.bias"])


def embed(features, params: EncoderParams) -> Tensor:
    """Input projection plus the learned position table."""
    features = tn.as_tensor(features)
    t = features.shape[-2]
    if t > params.config.max_len:
        raise LengthError(f"sequence length {t} exceeds max_len {params.config.max_len}")
    return (_linear(features, params["embed.proj.weight"], params["embed.proj.bias"])
            + params["embed.pos"][:t])


def encoder_forward(features, params: EncoderParams,
                    hooks: list[LayerHooks] | None = None) -> HiddenStates:
    """Run every layer and return all layer outputs (each ``(..., T, d)``)."""
    cfg = params.config
    features = tn.as_tensor(features)
    if features.shape[-2] == 0:
        raise LengthError("empty input sequence")
    x = embed(features, params)
    states: HiddenStates = []
    for i in range(cfg.n_layers):
        lp = params.layer(i)
        hk = hooks[i] if hooks is not None else None
        x = tn.layer_norm(x + mha_forward(x, lp, cfg.n_heads, hk),
                          lp["attn_norm.gain"], lp["attn_norm.bias"])
        x = ffn_forward(x, lp, hk.ffn_adapter if hk is not None else None)
        states.append(x)
    return states


def layer_inputs(features, params: EncoderParams,
                 hooks: list[LayerHooks] | None = None) -> list[Tensor]:
    """The tensor entering each layer: the embedding, then every output but the last."""
    states = encoder_forward(features, params, hooks)
    return [embed(features, params)] + states[:-1]


# -- masked-frame pretraining -------------------------------------------------------

def init_recon_head(cfg: EncoderConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng([seed, 7])
    return {
        "ssl.recon.weight": Tensor(rng.normal(0.0, 1.0 / math.sqrt(cfg.d_model),
                                              size=(cfg.d_model, cfg.d_input))),
        "ssl.recon.bias": Tensor(np.zeros(cfg.d_input)),
    }


def n_masked(t: int, mask_frac: float) -> int:
    return math.ceil(mask_frac * t - 1e-9)


def choose_mask(shape: tuple[int, ...], mask_frac: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of shape ``(..., T)`` with exactly ``ceil(mask_frac*T)`` frames set per row."""
    if not 0.0 < mask_frac < 1.0:
        raise ConfigError(f"mask_frac must lie in (0, 1), got {mask_frac}")
    *lead, t = shape
    if t == 0:
        raise LengthError("empty input sequence")
    k = n_masked(t, mask_frac)
    mask = np.zeros((int(np.prod(lead, dtype=np.int64)), t), dtype=bool)
    for row in mask:
        row[rng.choice(t, size=k, replace=False)] = True
    return mask.reshape(shape)


def masked_pretrain_loss(features, params: EncoderParams, recon: Mapping[str, Tensor],
                         mask_frac: float, seed) -> Tensor:
    """
    Replace a seeded subset of frames with the mask embedding, encode, project the
    top layer back to the input space and return the mean squared error on the
    masked frames only.
    """
    features = tn.as_tensor(features)
    if features.ndim < 2 or features.shape[-2] == 0:
        raise LengthError("empty input sequence")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mask = choose_mask(features.shape[:-1], mask_frac, rng)
    x = tn.where(mask[..., None], params["embed.mask"], features)
    top = encoder_forward(x, params)[-1]
    pred = _linear(top, recon["ssl.recon.weight"], recon["ssl.recon.bias"])
    diff = (pred - features.data)[mask]
    return (diff * diff).mean()
