"""Temporal Gaussian Mixture layers.

A layer owns M Gaussian components over an odd temporal window of length L.
Centers are tanh-squashed into the window, widths are softplus-positive, and
each component is normalized over the L taps. Every output channel mixes the
shared components with its own softmax weights, so each kernel row is a convex
combination of normalized Gaussians: nonnegative with unit sum. A second
softmax mixes input channel-groups into output channel-groups.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

SIGMA_FLOOR = 1e-3


class TGMConfigError(ValueError):
    pass


@dataclass
class TGMLayerParams:
    mu_hat: torch.Tensor       # (M,)
    sigma_hat: torch.Tensor    # (M,)
    mix_logits: torch.Tensor   # (C_out, M)
    attn_logits: torch.Tensor  # (C_out, C_in)
    L: int

    def __post_init__(self):
        for name in ("mu_hat", "sigma_hat", "mix_logits", "attn_logits"):
            value = getattr(self, name)
            if not isinstance(value, torch.Tensor):
                setattr(self, name, torch.as_tensor(value, dtype=torch.float64))
        if self.L < 3 or self.L % 2 == 0:
            raise TGMConfigError(f"kernel length must be odd and >= 3, got {self.L}")
        M = self.mu_hat.shape[0]
        if M < 1 or self.sigma_hat.shape != (M,):
            raise TGMConfigError("mu_hat and sigma_hat must both have shape (M,), M >= 1")
        if self.mix_logits.ndim != 2 or self.mix_logits.shape[1] != M or self.mix_logits.shape[0] < 1:
            raise TGMConfigError(f"mix_logits must be (C_out, {M}), got {tuple(self.mix_logits.shape)}")
        if self.attn_logits.ndim != 2 or self.attn_logits.shape[0] != self.mix_logits.shape[0]:
            raise TGMConfigError("attn_logits must be (C_out, C_in)")

    @property
    def M(self) -> int:
        return self.mu_hat.shape[0]

    @property
    def C_out(self) -> int:
        return self.mix_logits.shape[0]

    @property
    def C_in(self) -> int:
        return self.attn_logits.shape[1]


@dataclass
class KernelBank:
    kernels: torch.Tensor    # (C_out, L), rows nonnegative, unit sum
    attention: torch.Tensor  # (C_out, C_in), row-stochastic

    @property
    def L(self) -> int:
        return self.kernels.shape[1]


def gaussian_components(mu_hat: torch.Tensor, sigma_hat: torch.Tensor, L: int) -> torch.Tensor:
    """(M, L) matrix of per-component Gaussians, each normalized over its L taps."""
    centers = (L - 1) / 2.0 * (torch.tanh(mu_hat) + 1.0)
    widths = F.softplus(sigma_hat) + SIGMA_FLOOR
    taps = torch.arange(L, dtype=mu_hat.dtype, device=mu_hat.device)
    logits = -((taps[None, :] - centers[:, None]) ** 2) / (2.0 * widths[:, None] ** 2)
    # softmax == exp / sum(exp) but immune to underflow of narrow components
    return torch.softmax(logits, dim=1)


def compute_kernels(params: TGMLayerParams) -> KernelBank:
    if not all(torch.isfinite(t).all() for t in (params.mu_hat, params.sigma_hat,
                                                  params.mix_logits, params.attn_logits)):
        raise TGMConfigError("TGM parameters must be finite")
    comps = gaussian_components(params.mu_hat, params.sigma_hat, params.L)
    kernels = torch.softmax(params.mix_logits, dim=1) @ comps
    attention = torch.softmax(params.attn_logits, dim=1)
    return KernelBank(kernels, attention)


def tgm_forward(x: torch.Tensor, bank: KernelBank) -> torch.Tensor:
    """Mix channel-groups, then convolve each with its kernel (zero padded).

    ``x`` is (C_in, T, D'); the result is (C_out, T, D').
    """
    if x.ndim != 3:
        raise TGMConfigError(f"expected C_in x T x D' input, got shape {tuple(x.shape)}")
    c_in, T, d = x.shape
    if c_in != bank.attention.shape[1]:
        raise TGMConfigError(f"input has {c_in} channel-groups, layer expects {bank.attention.shape[1]}")
    if T < 1:
        raise TGMConfigError("sequence must have at least one timestep")
    c_out, L = bank.kernels.shape
    mixed = torch.einsum("oj,jtd->otd", bank.attention, x)
    # batch over feature dims: (D', C_out, T), depthwise conv per output group
    y = F.conv1d(mixed.permute(2, 0, 1), bank.kernels[:, None, :], padding=(L - 1) // 2, groups=c_out)
    return y.permute(1, 2, 0)


class TGMLayer(nn.Module):
    def __init__(self, c_in: int, c_out: int, L: int = 9, M: int = 16, dtype=torch.float64):
        super().__init__()
        if L < 3 or L % 2 == 0:
            raise TGMConfigError(f"kernel length must be odd and >= 3, got {L}")
        if M < 1 or c_out < 1 or c_in < 1:
            raise TGMConfigError("M, C_in and C_out must be >= 1")
        self.L, self.M, self.c_in, self.c_out = L, M, c_in, c_out
        self.mu_hat = nn.Parameter(torch.empty(M, dtype=dtype).uniform_(-1.0, 1.0))
        self.sigma_hat = nn.Parameter(torch.zeros(M, dtype=dtype))
        self.mix_logits = nn.Parameter(torch.zeros(c_out, M, dtype=dtype))
        self.attn_logits = nn.Parameter(torch.zeros(c_out, c_in, dtype=dtype))

    def params(self) -> TGMLayerParams:
        return TGMLayerParams(self.mu_hat, self.sigma_hat, self.mix_logits, self.attn_logits, self.L)

    def kernels(self) -> KernelBank:
        return compute_kernels(self.params())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return tgm_forward(x, self.kernels())


def tgm_stack_forward(f: torch.Tensor, layers, proj) -> torch.Tensor:
    """Project T x D features to T x D', run the layers, flatten to T x (C_out * D')."""
    if f.ndim != 2:
        raise TGMConfigError(f"expected T x D features, got shape {tuple(f.shape)}")
    x = proj(f)[None]
    expected_in = 1
    for i, layer in enumerate(layers):
        bank = compute_kernels(layer) if isinstance(layer, TGMLayerParams) else layer.kernels()
        if bank.attention.shape[1] != expected_in:
            raise TGMConfigError(
                f"TGM layer {i} expects C_in={bank.attention.shape[1]}, previous stage gives {expected_in}"
            )
        x = tgm_forward(x, bank)
        expected_in = x.shape[0]
    T = f.shape[0]
    return x.permute(1, 0, 2).reshape(T, -1)


def receptive_half_width(layers) -> int:
    return sum((layer.L - 1) // 2 for layer in layers)
