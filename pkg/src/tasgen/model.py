"""Hierarchical temporal-spectral VAE: generative model, structured posterior, SGVB training."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import ModelConfig, TrainingHyper
from .data import MinMaxScaler
from .embedding import CurationCheckpoint, CurationPath, SpectralEncoder
from .errors import NumericalError, TrainingError, ValidationError
from .flow import CouplingFlow
from .nn_utils import (
    batch_indices,
    clamp_logvar,
    gaussian_log_density,
    make_generator,
    make_optimizer,
    parameter_norm,
    seeded,
    sgd_step,
    standard_normal_log_density,
    to_tensor,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tasgen-ckpt-v1"
# bandwidth of the Gaussian stand-in for the deterministic d/z delta densities
DELTA_BANDWIDTH_LOGVAR = -20.0


class SpectralPrior(nn.Module):
    """p(e_s_t | e_s_{t-1}, z_t): one GRU layer plus an affine Gaussian head."""

    def __init__(self, n_bands: int, latent: int, hidden: int = 32):
        super().__init__()
        self.latent = latent
        self.gru = nn.GRU(latent + n_bands, hidden, batch_first=True)
        self.head = nn.Linear(hidden, 2 * latent)

    def forward(self, e_s, z):
        """e_s: (B, W, D_s) latent path, z: (B, C, W) decoded temporal signal."""
        prev = torch.cat([e_s.new_zeros(e_s.shape[0], 1, self.latent), e_s[:, :-1]], dim=1)
        h, _ = self.gru(torch.cat([prev, z.transpose(1, 2)], dim=-1))
        mean, logvar = self.head(h).chunk(2, dim=-1)
        return mean, clamp_logvar(logvar)


class OutputHead(nn.Module):
    """Per-step diagonal Gaussian over x_t given (e_s_t, z_t); the mean is residual on z_t.

    With ``conditional=False`` the log-variance is a learned per-band constant, which
    keeps the head from explaining unfamiliar inputs away by inflating its variance.
    """

    def __init__(self, n_bands: int, latent: int, hidden: int = 32, conditional: bool = False):
        super().__init__()
        self.conditional = conditional
        n_out = 2 * n_bands if conditional else n_bands
        self.net = nn.Sequential(
            nn.Conv1d(latent + n_bands, hidden, 1),
            nn.Tanh(),
            nn.Conv1d(hidden, n_out, 1),
        )
        # zero residual at start: the head begins as the decoded temporal signal
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)
        if conditional:
            with torch.no_grad():
                self.net[-1].bias[n_bands:].fill_(-4.0)
        else:
            self.logvar = nn.Parameter(torch.full((n_bands,), -4.0))

    def forward(self, e_s, z):
        out = self.net(torch.cat([e_s.transpose(1, 2), z], dim=1))
        if self.conditional:
            res, logvar = out.chunk(2, dim=1)
        else:
            res, logvar = out, self.logvar[None, :, None].expand_as(out)
        return z + res, clamp_logvar(logvar)


class HtsVae(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        self.scaler: MinMaxScaler | None = None
        with seeded(seed):
            self.curation = CurationPath(cfg.n_bands, cfg.latent_t, cfg.conv_hidden)
            self.spectral = SpectralEncoder(cfg.n_bands, cfg.latent_s, cfg.gru_hidden)
            self.flow = (
                CouplingFlow(cfg.latent_s, cfg.flow_layers, cfg.flow_hidden)
                if cfg.use_flow and cfg.flow_layers > 0
                else None
            )
            self.prior = SpectralPrior(cfg.n_bands, cfg.latent_s, cfg.prior_hidden)
            self.head = OutputHead(
                cfg.n_bands, cfg.latent_s, cfg.head_hidden, conditional=cfg.head_logvar == "conditional"
            )
        self.training_trace: list[float] = []
        self.curation_trace: list[float] = []
        self.eval()

    @property
    def temporal_encoder(self):
        return self.curation.encoder

    @property
    def decoder(self):
        return self.curation.decoder

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def load_curation(self, ckpt: CurationCheckpoint) -> None:
        self.curation.load_state_dict(ckpt.state)
        self.curation_trace = list(ckpt.loss_trace)

    def init_output_variance(self, windows) -> None:
        """Data-dependent start for the per-band output variance: the mean-pass residual."""
        if self.head.conditional:
            return
        x = to_tensor(windows, self.dtype)
        with torch.no_grad():
            mean_x, _, _ = self.likelihood(x)
            resid = x - mean_x
            self.head.logvar.copy_(clamp_logvar(torch.log(resid.pow(2).mean(dim=(0, 2)) + 1e-12)))

    def draw_noise(self, batch: int, generator: torch.Generator):
        cfg = self.cfg
        eps_t = torch.randn((batch, cfg.latent_t, cfg.window // 2), generator=generator, dtype=self.dtype)
        eps_s = torch.randn((batch, cfg.window, cfg.latent_s), generator=generator, dtype=self.dtype)
        return eps_t, eps_s

    def check_input(self, x):
        if x.dim() != 3 or tuple(x.shape[1:]) != (self.cfg.n_bands, self.cfg.window):
            raise ValidationError(
                f"expected windows of shape ({self.cfg.n_bands}, {self.cfg.window}), got {tuple(x.shape[1:])}"
            )

    def posterior(self, x, eps_t=None, eps_s=None):
        """Two-step draw: e_t ~ q(e_t|x), d = D(e_t), then e_s ~ q(e_s|d) through the flow.

        With ``eps_t``/``eps_s`` set to ``None`` the pass follows posterior means.
        """
        self.check_input(x)
        mean_t, logvar_t = self.temporal_encoder(x)
        e_t = mean_t if eps_t is None else mean_t + torch.exp(0.5 * logvar_t) * eps_t
        d = self.decoder(e_t)
        spec = self.spectral(d, flow=self.flow, noise=eps_s)
        return {"mean_t": mean_t, "logvar_t": logvar_t, "e_t": e_t, "d": d, **{f"s_{k}": v for k, v in spec.items()}}

    def terms(self, x, eps_t, eps_s, explicit_delta: bool = False):
        """Per-window ELBO terms (each a (B,) tensor) for one reparameterized draw."""
        post = self.posterior(x, eps_t, eps_s)
        e_t, d, e_s = post["e_t"], post["d"], post["s_sample"]
        # shared decoder weights: the generative z = D(e_t) is the same tensor as d
        z = d
        mean_x, logvar_x = self.head(e_s, z)
        prior_mean, prior_logvar = self.prior(e_s, z)
        out = {
            "log_px": gaussian_log_density(x, mean_x, logvar_x).sum(dim=(1, 2)),
            "log_p_es": gaussian_log_density(e_s, prior_mean, prior_logvar).sum(dim=(1, 2)),
            "log_p_et": standard_normal_log_density(e_t).sum(dim=(1, 2)),
            "log_q_es": post["s_log_q"].sum(dim=1),
            "log_q_et": gaussian_log_density(e_t, post["mean_t"], post["logvar_t"]).sum(dim=(1, 2)),
        }
        elbo = out["log_px"] + out["log_p_es"] + out["log_p_et"] - out["log_q_es"] - out["log_q_et"]
        if explicit_delta:
            z_gen = self.decoder(e_t)
            bw = torch.full_like(d, DELTA_BANDWIDTH_LOGVAR)
            out["log_q_d"] = gaussian_log_density(d, self.decoder(e_t), bw).sum(dim=(1, 2))
            out["log_p_z"] = gaussian_log_density(d, z_gen, bw).sum(dim=(1, 2))
            elbo = (
                out["log_px"] + out["log_p_es"] + out["log_p_z"] + out["log_p_et"]
                - out["log_q_es"] - out["log_q_d"] - out["log_q_et"]
            )
        out["elbo"] = elbo
        return out

    def likelihood(self, x, eps_t=None, eps_s=None):
        """Output-head mean and per-cell log-likelihood for one draw (or the mean pass)."""
        post = self.posterior(x, eps_t, eps_s)
        mean_x, logvar_x = self.head(post["s_sample"], post["d"])
        return mean_x, gaussian_log_density(x, mean_x, logvar_x), post


@dataclass
class PosteriorDraw:
    e_t: torch.Tensor
    d: torch.Tensor
    e_s: torch.Tensor
    log_det: torch.Tensor
    log_q_et: float
    log_q_es: float


def _as_batch(model, x):
    x = to_tensor(x, model.dtype)
    single = x.dim() == 2
    return (x[None] if single else x), single


def _repeat(x, L):
    return x.repeat_interleave(L, dim=0)


def sample_posterior(model: HtsVae, x, L: int, seed: int) -> list[PosteriorDraw]:
    xb, single = _as_batch(model, x)
    if not single:
        raise ValidationError("sample_posterior takes a single (C, W) window")
    if L < 1:
        raise ValidationError("L must be >= 1")
    gen = make_generator(seed)
    eps_t, eps_s = model.draw_noise(L, gen)
    with torch.no_grad():
        post = model.posterior(xb.expand(L, -1, -1), eps_t, eps_s)
        log_q_et = gaussian_log_density(post["e_t"], post["mean_t"], post["logvar_t"]).sum(dim=(1, 2))
    draws = []
    for l in range(L):
        e_s = post["s_sample"][l].T
        if not (torch.isfinite(e_s).all() and torch.isfinite(post["e_t"][l]).all()):
            bad = int(torch.nonzero(~torch.isfinite(e_s).all(0))[0]) if not torch.isfinite(e_s).all() else -1
            raise NumericalError(f"non-finite posterior sample in draw {l}, step {bad}")
        draws.append(
            PosteriorDraw(
                e_t=post["e_t"][l],
                d=post["d"][l],
                e_s=e_s,
                log_det=post["s_log_det"][l],
                log_q_et=float(log_q_et[l]),
                log_q_es=float(post["s_log_q"][l].sum()),
            )
        )
    return draws


def elbo(model: HtsVae, x, L: int, seed: int, explicit_delta: bool = False, chunk: int = 4096):
    """Monte Carlo ELBO of a single window with a per-term breakdown (means over draws)."""
    xb, single = _as_batch(model, x)
    if not single:
        raise ValidationError("elbo takes a single (C, W) window")
    gen = make_generator(seed)
    sums: dict[str, float] = {}
    with torch.no_grad():
        done = 0
        while done < L:
            n = min(chunk, L - done)
            eps_t, eps_s = model.draw_noise(n, gen)
            terms = model.terms(xb.expand(n, -1, -1), eps_t, eps_s, explicit_delta=explicit_delta)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + float(v.double().sum())
            done += n
    breakdown = {k: v / L for k, v in sums.items()}
    for k, v in breakdown.items():
        if not np.isfinite(v):
            raise NumericalError(f"non-finite ELBO term {k}")
    return breakdown["elbo"], breakdown


def train(model_init: HtsVae, train_windows, hyper: TrainingHyper, metrics_path=None) -> HtsVae:
    """Maximize the ELBO by SGVB with the step-decay schedule; returns a new model."""
    model = copy.deepcopy(model_init)
    if hyper.epochs == 0:
        return model
    windows = to_tensor(train_windows, model.dtype)
    if windows.dim() != 3 or len(windows) == 0:
        raise ValidationError("training needs at least one window")
    model.check_input(windows[:1])
    params = list(model.parameters())
    opt, sched = make_optimizer(params, hyper)
    rng = np.random.default_rng(hyper.seed)
    gen = make_generator(hyper.seed + 17)
    trace = list(model.training_trace)
    rows = []
    model.train()
    initial = None
    for epoch in range(hyper.epochs):
        total, count = 0.0, 0
        lr = opt.param_groups[0]["lr"]
        for b, idx in enumerate(batch_indices(len(windows), hyper.batch_size, rng)):
            x = windows[idx]
            losses = []
            for _ in range(hyper.mc_train):
                eps_t, eps_s = model.draw_noise(len(idx), gen)
                losses.append(-model.terms(x, eps_t, eps_s)["elbo"])
            loss_per = torch.stack(losses).mean(0)
            loss = loss_per.mean() / x[0].numel()
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite objective at epoch {epoch}, batch {b}, "
                    f"parameter norm {parameter_norm(model):.4g}; trace={trace}"
                )
            sgd_step(opt, loss, params, hyper.grad_clip)
            total += float(loss_per.detach().sum())
            count += len(idx)
        sched.step()
        objective = total / count
        trace.append(objective)
        rows.append((epoch, objective, lr))
        if initial is None:
            initial = objective
        elif objective > initial + 10.0 * abs(initial):
            raise TrainingError(f"training diverged at epoch {epoch}; trace={trace}")
        logger.info("hts-vae epoch %d  -elbo %.4f  lr %.2g", epoch, objective, lr)
    model.eval()
    model.training_trace = trace
    if metrics_path is not None:
        write_training_metrics(rows, metrics_path)
    with torch.no_grad():
        _, ll, _ = model.likelihood(windows)
        if not torch.isfinite(ll).all():
            raise TrainingError("trained model produces non-finite outputs on training windows")
    return model


def write_training_metrics(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write("epoch,objective,lr\n")
        for epoch, obj, lr in rows:
            fh.write(f"{epoch},{float(obj)!r},{float(lr)!r}\n")


def reconstruct(model: HtsVae, x, L: int = 40, seed: int = 0, chunk: int = 2048):
    """Mean reconstruction and mean per-cell log-likelihood over ``L`` posterior draws.

    Accepts one (C, W) window or a (B, C, W) batch; returns numpy arrays of the same shape.
    """
    xb, single = _as_batch(model, x)
    model.check_input(xb)
    if not all(torch.isfinite(p).all() for p in model.parameters()):
        raise NumericalError("model parameters contain NaN/inf")
    gen = make_generator(seed)
    B = xb.shape[0]
    x_hat = torch.zeros_like(xb, dtype=torch.float64)
    loglik = torch.zeros_like(xb, dtype=torch.float64)
    rows_per_chunk = max(1, chunk // L)
    with torch.no_grad():
        for start in range(0, B, rows_per_chunk):
            xs = xb[start:start + rows_per_chunk]
            n = xs.shape[0]
            eps_t, eps_s = model.draw_noise(n * L, gen)
            mean_x, ll, _ = model.likelihood(_repeat(xs, L), eps_t, eps_s)
            x_hat[start:start + n] = mean_x.double().view(n, L, *xs.shape[1:]).mean(1)
            loglik[start:start + n] = ll.double().view(n, L, *xs.shape[1:]).mean(1)
    x_hat, loglik = x_hat.numpy(), loglik.numpy()
    return (x_hat[0], loglik[0]) if single else (x_hat, loglik)


def posterior_means(model: HtsVae, x, chunk: int = 4096):
    """Mean-following posterior pass: returns (e_t means (B, D_t, W/2), e_s (B, D_s, W), d)."""
    xb, _ = _as_batch(model, x)
    outs_t, outs_s, outs_d = [], [], []
    with torch.no_grad():
        for start in range(0, xb.shape[0], chunk):
            post = model.posterior(xb[start:start + chunk])
            outs_t.append(post["mean_t"].double())
            outs_s.append(post["s_sample"].transpose(1, 2).double())
            outs_d.append(post["d"].double())
    return torch.cat(outs_t).numpy(), torch.cat(outs_s).numpy(), torch.cat(outs_d).numpy()


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(model: HtsVae, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": model.cfg.to_dict(),
        "seed": model.seed,
        "dtype": str(model.dtype).replace("torch.", ""),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "scaler": model.scaler.to_dict() if model.scaler is not None else None,
        "training_trace": list(model.training_trace),
        "curation_trace": list(model.curation_trace),
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> tuple[HtsVae, dict]:
    payload = torch.load(Path(path), weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    model = HtsVae(ModelConfig.from_dict(payload["config"]), seed=payload["seed"])
    if payload.get("dtype") == "float64":
        model.double()
    model.load_state_dict(payload["state_dict"])
    if payload.get("scaler"):
        model.scaler = MinMaxScaler.from_dict(payload["scaler"])
    model.training_trace = list(payload.get("training_trace", []))
    model.curation_trace = list(payload.get("curation_trace", []))
    model.eval()
    return model, payload.get("extra", {})
