"""Dual-dimension embedding: temporal compression, curated reconstruction, spectral recurrence."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .config import TrainingHyper
from .errors import TrainingError, ValidationError
from .nn_utils import (
    batch_indices,
    clamp_logvar,
    gaussian_log_density,
    kl_to_standard_normal,
    make_generator,
    make_optimizer,
    parameter_norm,
    sgd_step,
    to_tensor,
)

logger = logging.getLogger(__name__)


class TemporalEncoder(nn.Module):
    """Conv1D stack along time: (B, C, W) -> Gaussian over e_t of shape (B, D_t, W/2)."""

    def __init__(self, n_bands: int, latent: int, hidden: int = 32):
        super().__init__()
        self.n_bands = n_bands
        self.body = nn.Sequential(
            nn.Conv1d(n_bands, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv1d(hidden, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv1d(hidden, hidden, 4, stride=2, padding=1),
            nn.ReLU(),
        )
        self.mean = nn.Conv1d(hidden, latent, 1)
        self.logvar = nn.Conv1d(hidden, latent, 1)
        # per-band centering, fitted from the pretraining windows
        self.register_buffer("center", torch.zeros(n_bands))

    def forward(self, x):
        if x.dim() != 3 or x.shape[1] != self.n_bands:
            raise ValidationError(f"expected (batch, {self.n_bands}, W) input, got {tuple(x.shape)}")
        if x.shape[-1] % 2:
            raise ValidationError("window length must be even")
        h = self.body(x - self.center[:, None])
        return self.mean(h), clamp_logvar(self.logvar(h))


class TemporalDecoder(nn.Module):
    """Transposed-conv mirror of the encoder: (B, D_t, W/2) -> (B, C, W)."""

    def __init__(self, n_bands: int, latent: int, hidden: int = 32):
        super().__init__()
        self.latent = latent
        self.net = nn.Sequential(
            nn.ConvTranspose1d(latent, hidden, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose1d(hidden, hidden, 3, padding=1),
            nn.ReLU(),
            nn.ConvTranspose1d(hidden, n_bands, 3, padding=1),
        )
        self.register_buffer("center", torch.zeros(n_bands))

    def forward(self, e_t):
        if e_t.dim() != 3 or e_t.shape[1] != self.latent:
            raise ValidationError(f"expected (batch, {self.latent}, W/2) input, got {tuple(e_t.shape)}")
        return self.net(e_t) + self.center[:, None]


class SpectralEncoder(nn.Module):
    """Recurrent spectral posterior over the curated reconstruction.

    A backward GRU summarizes the future of the curated signal into ``a_t``;
    the forward direction is the stochastic chain
    ``q(e_s_t | e_s_{t-1}, a_t)``, optionally pushed through a coupling flow.
    """

    def __init__(self, n_bands: int, latent: int, hidden: int = 32):
        super().__init__()
        self.n_bands = n_bands
        self.latent = latent
        self.backward_gru = nn.GRU(n_bands, hidden, batch_first=True)
        self.step = nn.Sequential(nn.Linear(latent + hidden, hidden), nn.Tanh(), nn.Linear(hidden, 2 * latent))

    def backward_states(self, d):
        if d.dim() != 3 or d.shape[1] != self.n_bands:
            raise ValidationError(f"expected (batch, {self.n_bands}, W) input, got {tuple(d.shape)}")
        seq = torch.flip(d.transpose(1, 2), dims=[1])
        out, _ = self.backward_gru(seq)
        return torch.flip(out, dims=[1])

    def step_params(self, e_prev, a_t):
        mean, logvar = self.step(torch.cat([e_prev, a_t], dim=-1)).chunk(2, dim=-1)
        return mean, clamp_logvar(logvar)

    def forward(self, d, flow=None, noise=None):
        """Run the chain; ``noise`` of shape (B, W, D_s) draws samples, ``None`` follows the means.

        Returns a dict of (B, W, D_s) tensors ``mean``, ``logvar``, ``base``,
        ``sample`` and (B, W) tensors ``log_q`` (flow-corrected), ``log_det``,
        plus the backward states ``a`` of shape (B, W, H).
        """
        a = self.backward_states(d)
        B, W = d.shape[0], d.shape[2]
        e_prev = d.new_zeros(B, self.latent)
        means, logvars, bases, samples, log_qs, log_dets = [], [], [], [], [], []
        for t in range(W):
            mean, logvar = self.step_params(e_prev, a[:, t])
            base = mean if noise is None else mean + torch.exp(0.5 * logvar) * noise[:, t]
            if flow is not None:
                sample, log_det = flow(base)
            else:
                sample, log_det = base, base.new_zeros(B)
            log_q = gaussian_log_density(base, mean, logvar).sum(-1) + log_det
            means.append(mean)
            logvars.append(logvar)
            bases.append(base)
            samples.append(sample)
            log_qs.append(log_q)
            log_dets.append(log_det)
            e_prev = sample
        stack = lambda xs: torch.stack(xs, dim=1)
        return {
            "mean": stack(means),
            "logvar": stack(logvars),
            "base": stack(bases),
            "sample": stack(samples),
            "log_q": stack(log_qs),
            "log_det": stack(log_dets),
            "a": a,
        }


class CurationPath(nn.Module):
    """Temporal encoder/decoder pair plus the observation noise used during pretraining."""

    def __init__(self, n_bands: int, latent: int, hidden: int = 32):
        super().__init__()
        self.encoder = TemporalEncoder(n_bands, latent, hidden)
        self.decoder = TemporalDecoder(n_bands, latent, hidden)
        self.obs_logvar = nn.Parameter(torch.full((n_bands,), -4.0))

    def negative_elbo(self, x, eps, kl_weight: float = 1.0):
        """Per-window negative ELBO and reconstruction; ``kl_weight`` < 1 only during warm-up."""
        mean, logvar = self.encoder(x)
        e_t = mean + torch.exp(0.5 * logvar) * eps
        recon = self.decoder(e_t)
        obs_logvar = clamp_logvar(self.obs_logvar)[None, :, None]
        rec = gaussian_log_density(x, recon, obs_logvar).sum(dim=(1, 2))
        kl = kl_to_standard_normal(mean, logvar).sum(dim=(1, 2))
        return -(rec - kl_weight * kl), recon

    def fit_centering(self, windows: torch.Tensor):
        """Set the per-band center of encoder and decoder from (N, C, W) windows.

        Only the mean is removed.  Dividing by the per-band spread as well puts
        out-of-class values many units away for low-variance classes, and the
        encoder then follows them instead of pulling them back to the class.
        """
        center = windows.mean(dim=(0, 2))
        for module in (self.encoder, self.decoder):
            module.center.copy_(center)


def encode_temporal(encoder: TemporalEncoder, x):
    """Gaussian (mean, variance) over e_t for a single (C, W) window or a batch."""
    x = to_tensor(x, next(encoder.parameters()).dtype)
    single = x.dim() == 2
    with torch.no_grad():
        mean, logvar = encoder(x[None] if single else x)
    var = torch.exp(logvar)
    return (mean[0], var[0]) if single else (mean, var)


def decode_temporal(decoder: TemporalDecoder, e_t):
    e_t = to_tensor(e_t, next(decoder.parameters()).dtype)
    single = e_t.dim() == 2
    with torch.no_grad():
        out = decoder(e_t[None] if single else e_t)
    return out[0] if single else out


def encode_spectral(encoder: SpectralEncoder, e_prime, flow=None):
    """Deterministic (mean-following) pass: per-step Gaussians over e_s and backward states."""
    e_prime = to_tensor(e_prime, next(encoder.parameters()).dtype)
    single = e_prime.dim() == 2
    with torch.no_grad():
        out = encoder(e_prime[None] if single else e_prime, flow=flow)
    res = {
        "mean": out["mean"].transpose(1, 2),
        "var": torch.exp(out["logvar"]).transpose(1, 2),
        "a": out["a"],
    }
    return {k: v[0] for k, v in res.items()} if single else res


@dataclass
class CurationCheckpoint:
    state: dict
    loss_trace: list = field(default_factory=list)
    converged: bool = True


def _converged(trace, tail: int = 5, tol: float = 0.05) -> bool:
    if len(trace) < 2:
        return True
    tail_vals = trace[-tail:]
    for a, b in zip(tail_vals, tail_vals[1:]):
        if b > a + tol * abs(a):
            return False
    return True


def pretrain_curation(path: CurationPath, train_windows, hyper: TrainingHyper) -> CurationCheckpoint:
    """Fit the temporal path alone as a single-latent VAE; mutates ``path`` in place."""
    windows = to_tensor(train_windows, next(path.parameters()).dtype)
    if windows.dim() != 3 or windows.shape[0] == 0:
        raise ValidationError("pretraining needs at least one (C, W) window")
    path.fit_centering(windows)
    params = list(path.parameters())
    opt, sched = make_optimizer(params, hyper)
    rng = np.random.default_rng(hyper.seed)
    gen = make_generator(hyper.seed + 1)
    latent_shape = path.encoder.mean.out_channels, windows.shape[-1] // 2
    trace = []
    path.train()
    for epoch in range(hyper.epochs):
        # a KL ramp keeps the decoder from settling on the noise-only solution early
        beta = min(1.0, (epoch + 1) / (hyper.kl_warmup + 1))
        total, count = 0.0, 0
        for b, idx in enumerate(batch_indices(len(windows), hyper.batch_size, rng)):
            x = windows[idx]
            eps = torch.randn((len(idx), *latent_shape), generator=gen, dtype=x.dtype)
            loss_per, _ = path.negative_elbo(x, eps, beta)
            loss = loss_per.mean() / x[0].numel()
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite pretraining loss at epoch {epoch}, batch {b}, "
                    f"parameter norm {parameter_norm(path):.4g}"
                )
            sgd_step(opt, loss, params, hyper.grad_clip)
            total += float(loss_per.detach().sum())
            count += len(idx)
        sched.step()
        trace.append(total / count)
        logger.debug("curation epoch %d loss %.4f", epoch, trace[-1])
    path.eval()
    converged = _converged(trace)
    if not converged:
        logger.warning("curation pretraining did not settle over the final epochs")
    return CurationCheckpoint(copy.deepcopy(path.state_dict()), trace, converged)
