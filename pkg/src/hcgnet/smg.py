"""SMG module: squeeze cell, multi-scale excitation cell, gated fusion.

Dataflow for one module (all convolutions pre-activated with BN-ReLU)::

    x --1x1 conv--> mid --3x3 group conv (stride S)--> X'
    X' --3x3 dw conv--------------> X33 \\
    X' --3x3 dw conv, dilation 2--> X55 -- update gate --> v
    X' --------------------------------- forget gate --> f
    O = f * X' + v          (f, v broadcast over spatial positions)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .gates import ForgetGateParams, UpdateGateParams, forget_gate, hidden_width, update_gate
from .init import fan_out_normal
from .ops import BNState, ConvSpec
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SMGConfig:
    in_channels: int
    out_channels: int
    alpha: float = 4
    groups: int = 4
    stride: int = 1
    r_u: float = 2
    r_f: float = 2

    def __post_init__(self):
        c, g = self.out_channels, self.groups
        if self.in_channels < 1 or c < 1:
            raise ConfigError(f"channel counts must be positive: {self}")
        if self.alpha <= 0:
            raise ConfigError(f"width multiplier must be positive, got {self.alpha}")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if g < 1 or c < g:
            raise ConfigError(f"out_channels={c} smaller than groups={g}")
        if c % g:
            raise ConfigError(f"out_channels={c} not divisible by groups={g}")
        mid = self.mid_channels
        if mid < 1:
            raise ConfigError(f"floor(alpha * C) = {mid} must be >= 1")
        if mid % g:
            raise ConfigError(f"squeeze width floor({self.alpha} * {c}) = {mid} not divisible by groups={g}")

    @property
    def mid_channels(self) -> int:
        return math.floor(self.alpha * self.out_channels)

    @property
    def update_hidden(self) -> int:
        return hidden_width(2 * self.out_channels, self.r_u)

    @property
    def forget_hidden(self) -> int:
        return hidden_width(self.out_channels, self.r_f)

    def conv_specs(self) -> dict[str, ConvSpec]:
        c, mid = self.out_channels, self.mid_channels
        return {
            "squeeze.conv1": ConvSpec(self.in_channels, mid, (1, 1)),
            "squeeze.conv2": ConvSpec(mid, c, (3, 3), self.stride, 1, groups=self.groups),
            "excite.conv33": ConvSpec(c, c, (3, 3), 1, 1, groups=c),
            "excite.conv55": ConvSpec(c, c, (3, 3), 1, 2, dilation=2, groups=c),
        }

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        if self.stride == 2 and (h % 2 or w % 2):
            raise ConfigError(f"stride-2 SMG needs even spatial dims, got {h}x{w}")
        return self.conv_specs()["squeeze.conv2"].output_hw(h, w)


@dataclass
class SMGParams:
    bn1: BNState
    conv1: Tensor
    bn2: BNState
    conv2: Tensor
    bn33: BNState
    conv33: Tensor
    bn55: BNState
    conv55: Tensor
    update: UpdateGateParams
    forget: ForgetGateParams

    @classmethod
    def init(cls, cfg: SMGConfig, rng: np.random.Generator, dtype=np.float32) -> "SMGParams":
        specs = cfg.conv_specs()
        c = cfg.out_channels
        return cls(
            bn1=BNState.create(cfg.in_channels, dtype),
            conv1=fan_out_normal(specs["squeeze.conv1"].weight_shape, rng, dtype),
            bn2=BNState.create(cfg.mid_channels, dtype),
            conv2=fan_out_normal(specs["squeeze.conv2"].weight_shape, rng, dtype),
            bn33=BNState.create(c, dtype),
            conv33=fan_out_normal(specs["excite.conv33"].weight_shape, rng, dtype),
            bn55=BNState.create(c, dtype),
            conv55=fan_out_normal(specs["excite.conv55"].weight_shape, rng, dtype),
            update=UpdateGateParams.init(c, cfg.r_u, rng, dtype),
            forget=ForgetGateParams.init(c, cfg.r_f, rng, dtype),
        )

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, bn, conv in (
            ("squeeze.bn1", self.bn1, None),
            ("squeeze.conv1", None, self.conv1),
            ("squeeze.bn2", self.bn2, None),
            ("squeeze.conv2", None, self.conv2),
            ("excite.bn33", self.bn33, None),
            ("excite.conv33", None, self.conv33),
            ("excite.bn55", self.bn55, None),
            ("excite.conv55", None, self.conv55),
        ):
            if bn is not None:
                out[f"{name}.gamma"] = bn.gamma
                out[f"{name}.beta"] = bn.beta
            else:
                out[f"{name}.weight"] = conv
        out.update({f"update.{k}": v for k, v in self.update.named().items()})
        out.update({f"forget.{k}": v for k, v in self.forget.named().items()})
        return out

    def bn_states(self) -> dict[str, BNState]:
        return {
            "squeeze.bn1": self.bn1,
            "squeeze.bn2": self.bn2,
            "excite.bn33": self.bn33,
            "excite.bn55": self.bn55,
            "update.bn": self.update.bn,
            "forget.bn": self.forget.bn,
        }


def _preact_conv(x: Tensor, bn: BNState, w: Tensor, spec: ConvSpec, train) -> Tensor:
    return ops.conv2d(ops.relu(ops.batch_norm(x, bn, train)), w, spec=spec)


def squeeze_cell(x: Tensor, cfg: SMGConfig, params: SMGParams, train: Optional[bool] = None) -> Tensor:
    if x.channels != cfg.in_channels:
        raise ConfigError(f"SMG expects {cfg.in_channels} input channels, got {x.channels}")
    cfg.output_hw(x.shape[2], x.shape[3])
    specs = cfg.conv_specs()
    mid = _preact_conv(x, params.bn1, params.conv1, specs["squeeze.conv1"], train)
    return _preact_conv(mid, params.bn2, params.conv2, specs["squeeze.conv2"], train)


def multiscale_excitation(
    xp: Tensor, cfg: SMGConfig, params: SMGParams, train: Optional[bool] = None
) -> tuple[Tensor, Tensor]:
    specs = cfg.conv_specs()
    x33 = _preact_conv(xp, params.bn33, params.conv33, specs["excite.conv33"], train)
    x55 = _preact_conv(xp, params.bn55, params.conv55, specs["excite.conv55"], train)
    return x33, x55


def fuse(xp: Tensor, f: Tensor, v: Tensor) -> Tensor:
    """``O = f * X' + v`` with both descriptors broadcast over every position."""
    return ops.add(ops.broadcast_mul(xp, f), v)


def smg_forward(
    x: Tensor,
    cfg: SMGConfig,
    params: SMGParams,
    train: Optional[bool] = None,
    return_parts: bool = False,
):
    xp = squeeze_cell(x, cfg, params, train)
    x33, x55 = multiscale_excitation(xp, cfg, params, train)
    v, (u33, u55) = update_gate(x33, x55, params.update, train, return_weights=True)
    f = forget_gate(xp, params.forget, train)
    out = fuse(xp, f, v)
    if return_parts:
        return out, {"x_reused": xp, "x33": x33, "x55": x55, "v": v, "f": f, "u33": u33, "u55": u55}
    return out


@dataclass(frozen=True)
class SMGCost:
    params: int
    macs: int
    non_mac_ops: int


def smg_cost(cfg: SMGConfig, h: int, w: int) -> SMGCost:
    """Exact parameter and multiply-accumulate counts for one module at ``h x w`` input.

    Convolution and FC layers (including the 1x1 spatial attention convs)
    contribute MACs.  BN, activations, softmaxes, attention-weighted sums and
    the fusion are tallied as ``non_mac_ops`` (one per elementwise result).
    """
    specs = cfg.conv_specs()
    c, mid = cfg.out_channels, cfg.mid_channels
    hu, hf = cfg.update_hidden, cfg.forget_hidden
    ho, wo = cfg.output_hw(h, w)
    p_out = ho * wo

    params = sum(s.num_params for s in specs.values())
    params += 2 * (cfg.in_channels + mid + c + c)  # BN affine pairs
    # update gate: two spatial attention convs, W (no bias in FC, b after BN), BN, two heads
    params += 2 * c + 2 * c * hu + hu + 2 * hu + 2 * (hu * c + c)
    # forget gate
    params += c + (c * hf + hf) + 2 * hf + (hf * c + c)

    macs = specs["squeeze.conv1"].macs(h, w) + specs["squeeze.conv2"].macs(h, w)
    macs += specs["excite.conv33"].macs(ho, wo) + specs["excite.conv55"].macs(ho, wo)
    macs += 3 * c * p_out  # spatial attention 1x1 convs
    macs += 2 * c * hu + 2 * hu * c  # update FCs
    macs += c * hf + hf * c  # forget FCs

    non_mac = 2 * cfg.in_channels * h * w  # bn1 + relu
    non_mac += 2 * mid * h * w  # bn2 + relu
    non_mac += 2 * 2 * c * p_out  # excite bn + relu
    non_mac += 3 * (p_out + c * p_out)  # softmax over positions + weighted sums
    non_mac += 2 * hu + 2 * c + 2 * c  # bn+tanh, branch softmax, weighted fusion
    non_mac += 2 * hf + c  # bn+tanh, sigmoid
    non_mac += 2 * c * p_out  # f * X' + v
    return SMGCost(params=params, macs=macs, non_mac_ops=non_mac)
