"""Glow-style affine coupling flow applied to each step's spectral latent.

Each coupling is written in the density direction ``f`` (flowed sample -> base
sample).  ``forward`` applies ``f^{-1}`` to a base draw and returns the
accumulated ``log|det df/de_K|``, which is exactly the correction that turns
the base log-density into the flowed one::

    log q_K(e_K) = log q_0(e_0) + log_det
"""
from __future__ import annotations

import torch
from torch import nn

from .errors import NumericalError


class AffineCoupling(nn.Module):
    def __init__(self, dim: int, hidden: int, flip: bool):
        super().__init__()
        self.split = dim // 2
        # ``flip`` swaps which half conditions the other
        self.flip = flip
        n_cond = dim - self.split if flip else self.split
        self.net = nn.Sequential(
            nn.Linear(n_cond, hidden),
            nn.ReLU(),
            nn.Linear(hidden, 2 * (dim - n_cond)),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def _halves(self, u):
        lo, hi = u[..., : self.split], u[..., self.split:]
        return (hi, lo) if self.flip else (lo, hi)

    def _join(self, cond, free):
        return torch.cat((free, cond) if self.flip else (cond, free), dim=-1)

    def _scale_shift(self, cond):
        raw_s, t = self.net(cond).chunk(2, dim=-1)
        return torch.tanh(raw_s), t

    def f(self, u):
        """Density direction: returns (v, log|det dv/du|)."""
        cond, free = self._halves(u)
        s, t = self._scale_shift(cond)
        return self._join(cond, free * torch.exp(s) + t), s.sum(-1)

    def f_inverse(self, v):
        """Sampling direction: returns (u, log|det df/du| evaluated at u)."""
        cond, free = self._halves(v)
        s, t = self._scale_shift(cond)
        return self._join(cond, (free - t) * torch.exp(-s)), s.sum(-1)


class ElementwiseAffine(nn.Module):
    """Degenerate coupling for one-dimensional latents."""

    def __init__(self, dim: int):
        super().__init__()
        self.log_scale = nn.Parameter(torch.zeros(dim))
        self.shift = nn.Parameter(torch.zeros(dim))

    def f(self, u):
        return u * torch.exp(self.log_scale) + self.shift, self.log_scale.sum().expand(u.shape[:-1])

    def f_inverse(self, v):
        return (v - self.shift) * torch.exp(-self.log_scale), self.log_scale.sum().expand(v.shape[:-1])


class CouplingFlow(nn.Module):
    """K invertible layers with alternating masks; identity at initialization."""

    def __init__(self, dim: int, n_layers: int = 4, hidden: int = 16):
        super().__init__()
        self.dim = dim
        if dim == 1:
            layers = [ElementwiseAffine(dim) for _ in range(n_layers)]
        else:
            layers = [AffineCoupling(dim, hidden, flip=bool(k % 2)) for k in range(n_layers)]
        self.layers = nn.ModuleList(layers)

    def forward(self, e0):
        """Map a base draw to the flowed latent; returns ``(e_K, log_det)``."""
        e = e0
        log_det = torch.zeros(e0.shape[:-1], dtype=e0.dtype, device=e0.device)
        for k, layer in enumerate(self.layers):
            e, ld = layer.f_inverse(e)
            if not torch.isfinite(ld).all():
                raise NumericalError(f"non-finite coupling scale in flow layer {k}")
            log_det = log_det + ld
        return e, log_det

    def inverse(self, eK):
        """Map a flowed latent back to the base space; returns ``(e_0, log_det)``."""
        e = eK
        log_det = torch.zeros(eK.shape[:-1], dtype=eK.dtype, device=eK.device)
        for layer in reversed(self.layers):
            e, ld = layer.f(e)
            log_det = log_det + ld
        return e, log_det


def flow_forward(flow: CouplingFlow, e0: torch.Tensor):
    return flow(e0)


def flow_inverse(flow: CouplingFlow, eK: torch.Tensor):
    return flow.inverse(eK)
