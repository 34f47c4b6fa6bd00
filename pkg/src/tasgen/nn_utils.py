from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
import torch

LOGVAR_MIN, LOGVAR_MAX = -10.0, 4.0
_LOG_2PI = math.log(2.0 * math.pi)


def clamp_logvar(logvar: torch.Tensor) -> torch.Tensor:
    return torch.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)


def gaussian_log_density(x, mean, logvar):
    """Element-wise log N(x; mean, exp(logvar))."""
    return -0.5 * (_LOG_2PI + logvar + (x - mean) ** 2 * torch.exp(-logvar))


def standard_normal_log_density(x):
    return -0.5 * (_LOG_2PI + x**2)


def kl_to_standard_normal(mean, logvar):
    return 0.5 * (torch.exp(logvar) + mean**2 - 1.0 - logvar)


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & 0x7FFF_FFFF_FFFF_FFFF)
    return g


@contextmanager
def seeded(seed: int):
    """Seed torch's global RNG for parameter initialization without leaking state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


def make_optimizer(params, hyper):
    if hyper.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=hyper.lr, weight_decay=hyper.weight_decay)
    else:
        opt = torch.optim.SGD(
            params, lr=hyper.lr, momentum=hyper.momentum, weight_decay=hyper.weight_decay
        )
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=hyper.decay_every, gamma=hyper.lr_decay)
    return opt, sched


def sgd_step(opt, loss, params, clip: float | None):
    """Backward + optional global-norm clipping + step; returns the pre-clip gradient norm."""
    opt.zero_grad()
    loss.backward()
    norm = torch.nn.utils.clip_grad_norm_(params, clip if clip else float("inf"))
    opt.step()
    return float(norm)


def batch_indices(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def parameter_norm(module: torch.nn.Module) -> float:
    with torch.no_grad():
        return float(torch.sqrt(sum((p.double() ** 2).sum() for p in module.parameters())))


def to_tensor(x, dtype=torch.float32) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)
