"""BatchNorm with a learnable channel-pruning threshold.

A channel is kept while ``|gamma_i| - tau >= 0``. The hard indicator has no
useful derivative, so the backward pass uses a straight-through estimate that
is only non-zero inside the band ``|z_i| <= epsilon_band``:

    dm_i/dgamma_i = sign(gamma_i),  dm_i/dtau = -1   (inside the band)

Both the scale and the shift are multiplied by the mask, so a masked channel
emits an exact zero plane. The product-rule terms through ``gamma * m`` and
``beta * m`` come from ordinary autodiff over :func:`channel_mask`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dualprune import functional as F
from dualprune.tensor import Tensor

DEFAULT_TAU = 0.1
DEFAULT_EPSILON_BAND = 1.0


@dataclass
class MaskedBNState:
    gamma: Tensor
    beta: Tensor
    tau: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    epsilon_band: float = DEFAULT_EPSILON_BAND
    masked: bool = True

    @classmethod
    def create(
        cls,
        channels: int,
        gamma: np.ndarray | None = None,
        tau: float = DEFAULT_TAU,
        epsilon_band: float = DEFAULT_EPSILON_BAND,
        masked: bool = True,
        dtype=np.float32,
    ) -> MaskedBNState:
        if gamma is None:
            gamma = np.ones(channels)
        return cls(
            gamma=Tensor(np.asarray(gamma), requires_grad=True, dtype=dtype),
            beta=Tensor(np.zeros(channels), requires_grad=True, dtype=dtype),
            tau=Tensor(np.array([tau]), requires_grad=masked, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            epsilon_band=epsilon_band,
            masked=masked,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def clamp_threshold(self) -> None:
        np.maximum(self.tau.data, 0, out=self.tau.data)


def compute_mask(state: MaskedBNState) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(m, z)`` with ``z = |gamma| - tau`` and ``m = 1[z >= 0]``.

    A plain (unmasked) layer reports all ones.
    """
    gamma = state.gamma.data
    z = np.abs(gamma) - state.tau.data[0]
    if not state.masked:
        return np.ones_like(gamma), z
    return (z >= 0).astype(gamma.dtype), z


def ste_mask_grads(gamma, tau: float, epsilon_band: float) -> tuple[np.ndarray, np.ndarray]:
    """Straight-through derivatives ``(dm/dgamma, dm/dtau)`` per channel."""
    gamma = np.asarray(gamma)
    z = np.abs(gamma) - tau
    band = np.abs(z) <= epsilon_band
    dm_dgamma = np.where(band, np.sign(gamma), 0.0).astype(gamma.dtype)
    dm_dtau = np.where(band, -1.0, 0.0).astype(gamma.dtype)
    return dm_dgamma, dm_dtau


def mask_tensor(state: MaskedBNState) -> Tensor:
    return F.channel_mask(state.gamma, state.tau, state.epsilon_band)


def masked_bn_forward(x: Tensor, state: MaskedBNState, training: bool) -> Tensor:
    if state.masked:
        m = mask_tensor(state)
        scale, shift = F.mul(state.gamma, m), F.mul(state.beta, m)
    else:
        scale, shift = state.gamma, state.beta
    return F.batch_norm2d(
        x,
        scale,
        shift,
        state.running_mean,
        state.running_var,
        training=training,
        momentum=state.momentum,
        eps=state.eps,
    )
