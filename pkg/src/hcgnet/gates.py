"""Update and forget gates.

Both gates start from global attention pooling: a 1x1 convolution squeezes the
feature map to a single-channel logit map, a softmax over all spatial
positions turns it into weights, and the channel descriptor is the weighted
sum of the feature map under those weights.

The update gate pools the two excitation branches, mixes the concatenated
descriptors through a tanh bottleneck, and blends the pooled descriptors with
per-channel two-way softmax weights.  The forget gate pools the reused map and
emits sigmoid decay factors through an SE-style bottleneck.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .init import fan_out_normal, zeros
from .ops import BNState, ConvSpec, ShapeError
from .tensor import Tensor


def hidden_width(channels: int, ratio: float) -> int:
    """Bottleneck width ``floor(channels / ratio)``, at least 1."""
    return max(1, int(channels // ratio))


@dataclass
class UpdateGateParams:
    ws33: Tensor  # (1, C, 1, 1) 1x1 conv C -> 1
    ws55: Tensor
    W: Tensor  # (hidden, 2C, 1, 1)
    b: Tensor  # (1, hidden, 1, 1), added after BN
    bn: BNState  # over the hidden descriptor
    W33: Tensor  # (C, hidden, 1, 1)
    b33: Tensor
    W55: Tensor
    b55: Tensor
    r_u: float = 2

    @classmethod
    def init(cls, channels: int, r_u: float, rng: np.random.Generator, dtype=np.float32):
        hid = hidden_width(2 * channels, r_u)
        return cls(
            ws33=fan_out_normal((1, channels, 1, 1), rng, dtype),
            ws55=fan_out_normal((1, channels, 1, 1), rng, dtype),
            W=fan_out_normal((hid, 2 * channels, 1, 1), rng, dtype),
            b=zeros(hid, dtype),
            bn=BNState.create(hid, dtype),
            W33=fan_out_normal((channels, hid, 1, 1), rng, dtype),
            b33=zeros(channels, dtype),
            W55=fan_out_normal((channels, hid, 1, 1), rng, dtype),
            b55=zeros(channels, dtype),
            r_u=r_u,
        )

    @property
    def channels(self) -> int:
        return self.ws33.shape[1]

    @property
    def hidden(self) -> int:
        return self.W.shape[0]

    def named(self) -> dict[str, Tensor]:
        return {
            "ws33": self.ws33,
            "ws55": self.ws55,
            "W": self.W,
            "b": self.b,
            "bn.gamma": self.bn.gamma,
            "bn.beta": self.bn.beta,
            "W33": self.W33,
            "b33": self.b33,
            "W55": self.W55,
            "b55": self.b55,
        }


@dataclass
class ForgetGateParams:
    wsf: Tensor  # (1, C, 1, 1)
    W1: Tensor  # (hidden, C, 1, 1)
    b1: Tensor  # added before BN
    bn: BNState
    W2: Tensor  # (C, hidden, 1, 1)
    b2: Tensor
    r_f: float = 2

    @classmethod
    def init(cls, channels: int, r_f: float, rng: np.random.Generator, dtype=np.float32):
        hid = hidden_width(channels, r_f)
        return cls(
            wsf=fan_out_normal((1, channels, 1, 1), rng, dtype),
            W1=fan_out_normal((hid, channels, 1, 1), rng, dtype),
            b1=zeros(hid, dtype),
            bn=BNState.create(hid, dtype),
            W2=fan_out_normal((channels, hid, 1, 1), rng, dtype),
            b2=zeros(channels, dtype),
            r_f=r_f,
        )

    @property
    def channels(self) -> int:
        return self.wsf.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def named(self) -> dict[str, Tensor]:
        return {
            "wsf": self.wsf,
            "W1": self.W1,
            "b1": self.b1,
            "bn.gamma": self.bn.gamma,
            "bn.beta": self.bn.beta,
            "W2": self.W2,
            "b2": self.b2,
        }


def spatial_attention_pool(x: Tensor, w_s: Tensor) -> Tensor:
    """Attention-weighted spatial pooling of ``x`` to an ``(N, C, 1, 1)`` descriptor."""
    c = x.channels
    if w_s.shape != (1, c, 1, 1):
        raise ShapeError(f"spatial attention weight {w_s.shape} must map {c} -> 1 channels")
    logits = ops.conv2d(x, w_s, spec=ConvSpec(c, 1, (1, 1)))
    weights = ops.softmax_over(logits, {"height", "width"})
    return ops.spatial_weighted_sum(x, weights)


def _branch_softmax(u33: Tensor, u55: Tensor) -> tuple[Tensor, Tensor]:
    # module-level so verification tests can swap it for a broken version
    a, b = ops.softmax_over([u33, u55], {"branch"})
    return a, b


def update_gate(
    x33: Tensor,
    x55: Tensor,
    params: UpdateGateParams,
    train: Optional[bool] = None,
    return_weights: bool = False,
):
    """Fuse the two excitation branches into a context descriptor ``v``.

    With ``return_weights=True`` also returns the per-channel branch weights
    ``(u33, u55)``.
    """
    if x33.shape != x55.shape:
        raise ShapeError(f"update gate branches differ: {x33.shape} vs {x55.shape}")
    if x33.channels != params.channels:
        raise ShapeError(f"update gate built for {params.channels} channels, got {x33.channels}")
    z33 = spatial_attention_pool(x33, params.ws33)
    z55 = spatial_attention_pool(x55, params.ws55)
    z = ops.concat_channels([z33, z55])
    h = ops.fully_connected(z, params.W)
    h = ops.tanh(ops.add(ops.batch_norm(h, params.bn, train), params.b))
    u33 = ops.fully_connected(h, params.W33, params.b33)
    u55 = ops.fully_connected(h, params.W55, params.b55)
    u33, u55 = _branch_softmax(u33, u55)
    v = ops.add(ops.broadcast_mul(u33, z33), ops.broadcast_mul(u55, z55))
    if return_weights:
        return v, (u33, u55)
    return v


def forget_gate(x: Tensor, params: ForgetGateParams, train: Optional[bool] = None) -> Tensor:
    """Per-channel decay factors in (0, 1) for the reused feature map."""
    if x.channels != params.channels:
        raise ShapeError(f"forget gate built for {params.channels} channels, got {x.channels}")
    z = spatial_attention_pool(x, params.wsf)
    h = ops.batch_norm(ops.fully_connected(z, params.W1, params.b1), params.bn, train)
    return ops.sigmoid(ops.fully_connected(ops.tanh(h), params.W2, params.b2))
