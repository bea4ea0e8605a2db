"""Fusion deep variational Bayes filter adapted for FEMIN force prediction.

The encoder never sees the true force.  Instead the transition estimate of
the next latent state is decoded first and the force part of that
preliminary likelihood (mean and standard deviation, gradient-stopped)
takes the force slot of the encoder input.  Windows are started from an
initial network fed with the first ``K`` true observations.

Array conventions: a batch of windows is ``[B, T, n_B]`` per quantity,
observations are laid out as ``(d, v, f)`` with width ``k = 3 n_B``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import SIGMA_FLOOR, ConfigError, MlpSpec, ParamStore, forward_mlp, init_mlp

__all__ = [
    "GaussianDiag",
    "DvbfConfig",
    "NormStats",
    "DvbfModel",
    "WindowResult",
    "fuse_posterior",
    "sample",
    "recon_nll",
    "kl_divergence",
    "standard_normal",
    "elbo_loss",
    "forward_window",
]

LOG_2PI = math.log(2.0 * math.pi)
MODES = ("train", "eval", "mean")


@dataclass
class GaussianDiag:
    mu: Tensor
    sigma: Tensor

    @property
    def var(self) -> Tensor:
        return ad.square(self.sigma)

    def detach(self) -> "GaussianDiag":
        return GaussianDiag(ad.stop_gradient(self.mu), ad.stop_gradient(self.sigma))


@dataclass(frozen=True)
class DvbfConfig:
    n_b: int = 1
    dim_p: int = 0
    latent: int = 16
    n_bases: int = 16
    scale: float = 0.2
    K: int = 7
    window: int = 300
    noise: float = 0.1
    init_hidden: Tuple[int, ...] = (128, 128, 128)
    init_trans_hidden: Tuple[int, ...] = (64,)
    encoder_hidden: Tuple[int, ...] = (128, 128, 128)
    alpha_hidden: Tuple[int, ...] = (64,)
    decoder_hidden: Tuple[int, ...] = (128, 128, 128)
    base_init_std: float = 0.01

    def __post_init__(self):
        if self.n_bases < 1:
            raise ConfigError("need at least one transition base")
        if not self.scale > 0:
            raise ConfigError("tanh scale must be positive")
        if not (1 <= self.K < self.window):
            raise ConfigError("need 1 <= K < window length")
        if self.n_b < 1 or self.latent < 1 or self.dim_p < 0:
            raise ConfigError("invalid dimensions")

    @property
    def k(self) -> int:
        return 3 * self.n_b

    @property
    def force_slice(self) -> slice:
        return slice(2 * self.n_b, 3 * self.n_b)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DvbfConfig":
        data = dict(data)
        for key in ("init_hidden", "init_trans_hidden", "encoder_hidden", "alpha_hidden", "decoder_hidden"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    # network definitions -------------------------------------------------
    def init_spec(self) -> MlpSpec:
        return MlpSpec(self.K * self.k + self.dim_p, self.init_hidden,
                       (("mu", self.latent, "linear"), ("sigma", self.latent, "softplus")))

    def init_trans_spec(self) -> MlpSpec:
        return MlpSpec(self.latent, self.init_trans_hidden, (("z", self.latent, "linear"),))

    def encoder_spec(self) -> MlpSpec:
        return MlpSpec(4 * self.n_b, self.encoder_hidden,
                       (("mu", self.latent, "linear"), ("sigma", self.latent, "softplus")))

    def alpha_spec(self) -> MlpSpec:
        return MlpSpec(self.latent + self.dim_p, self.alpha_hidden, (("alpha", self.n_bases, "sigmoid"),))

    def decoder_spec(self) -> MlpSpec:
        return MlpSpec(self.latent, self.decoder_hidden,
                       (("mu", self.k, "linear"), ("sigma", self.k, "softplus")))


@dataclass
class NormStats:
    """Per-channel standardization for d, v, f (each ``[n_B]``) and p."""

    d_mean: np.ndarray
    d_std: np.ndarray
    v_mean: np.ndarray
    v_std: np.ndarray
    f_mean: np.ndarray
    f_std: np.ndarray
    p_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    p_std: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def identity(cls, n_b: int, dim_p: int = 0) -> "NormStats":
        z, o = np.zeros(n_b), np.ones(n_b)
        return cls(z, o, z.copy(), o.copy(), z.copy(), o.copy(), np.zeros(dim_p), np.ones(dim_p))

    @classmethod
    def fit(cls, d: np.ndarray, v: np.ndarray, f: np.ndarray, p: np.ndarray) -> "NormStats":
        """``d, v, f`` are ``[N, n_B]`` sample stacks, ``p`` is ``[n_designs, dim_p]``."""

        def ms(x):
            m, s = x.mean(axis=0), x.std(axis=0)
            return m, np.where(s > 0, s, 1.0)

        p = np.asarray(p, float).reshape(len(p), -1)
        pm, ps = ms(p) if p.shape[1] else (np.zeros(0), np.zeros(0))
        return cls(*ms(d), *ms(v), *ms(f), pm, ps)

    def obs_mean(self) -> np.ndarray:
        return np.concatenate([self.d_mean, self.v_mean, self.f_mean])

    def obs_std(self) -> np.ndarray:
        return np.concatenate([self.d_std, self.v_std, self.f_std])

    def standardize(self, d, v, f):
        return (d - self.d_mean) / self.d_std, (v - self.v_mean) / self.v_std, (f - self.f_mean) / self.f_std

    def standardize_p(self, p) -> np.ndarray:
        p = np.asarray(p, float)
        return (p - self.p_mean) / self.p_std if p.shape[-1] else p

    def destandardize_force(self, mu, sigma):
        return mu * self.f_std + self.f_mean, sigma * self.f_std

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "NormStats":
        return cls(**{k: np.asarray(v, float) for k, v in data.items()})


# ---------------------------------------------------------------------------
# distribution algebra


def standard_normal(batch: int, dim: int) -> GaussianDiag:
    return GaussianDiag(Tensor(np.zeros((batch, dim))), Tensor(np.ones((batch, dim))))


def fuse_posterior(enc: GaussianDiag, trans: GaussianDiag) -> GaussianDiag:
    """Precision-weighted product of the encoder and transition Gaussians.

    mu = (mu_e s_t^2 + mu_t s_e^2) / (s_e^2 + s_t^2), s^2 = s_e^2 s_t^2 / (s_e^2 + s_t^2)
    """
    return GaussianDiag(*ad.gauss_fuse(ad.tensor(enc.mu), ad.tensor(enc.sigma),
                                       ad.tensor(trans.mu), ad.tensor(trans.sigma)))


def sample(g: GaussianDiag, eps) -> Tensor:
    """Reparametrized draw ``mu + sigma * eps``."""
    return g.mu + g.sigma * ad.tensor(eps)


def recon_nll(x, lik: GaussianDiag) -> Tensor:
    """Gaussian negative log-likelihood summed over the last axis.

    0.5 * sum(ln sigma^2 + (x - mu)^2 / sigma^2) + (k/2) ln 2 pi
    """
    return ad.gauss_nll(x, ad.tensor(lik.mu), ad.tensor(lik.sigma))


def kl_divergence(q: GaussianDiag, prior: GaussianDiag) -> Tensor:
    """KL(q || prior) for diagonal Gaussians, summed over the last axis.

    0.5 * sum(s_q^2/s_p^2 + (mu_q - mu_p)^2/s_p^2 - ln(s_q^2/s_p^2) - 1)
    """
    return ad.gauss_kl(ad.tensor(q.mu), ad.tensor(q.sigma), ad.tensor(prior.mu), ad.tensor(prior.sigma))


def elbo_loss(l_recon: Tensor, l_kl: Tensor) -> Tensor:
    """Negative ELBO: batch mean of reconstruction NLL plus KL."""
    return (ad.tensor(l_recon) + ad.tensor(l_kl)).mean()


# ---------------------------------------------------------------------------


class DvbfModel:
    def __init__(self, config: DvbfConfig, norm: Optional[NormStats] = None, seed: int = 0):
        self.config = config
        self.norm = norm if norm is not None else NormStats.identity(config.n_b, config.dim_p)
        self.params = ParamStore()
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng: np.random.Generator):
        c = self.config
        init_mlp(c.init_spec(), self.params, "init", rng)
        init_mlp(c.init_trans_spec(), self.params, "init_trans", rng)
        init_mlp(c.encoder_spec(), self.params, "enc", rng)
        init_mlp(c.alpha_spec(), self.params, "alpha", rng)
        init_mlp(c.decoder_spec(), self.params, "dec", rng)
        M, l = c.n_bases, c.latent
        self.params.add("trans.A", rng.normal(0.0, c.base_init_std, size=(M, l, l)))
        if c.dim_p:
            self.params.add("trans.B", rng.normal(0.0, c.base_init_std, size=(M, l, c.dim_p)))
        # softplus(c) * (M/2) ~ 1 with alpha near 1/2 at start
        c0 = math.log(math.expm1(2.0 / M))
        self.params.add("trans.c1", np.full((M, l), c0))
        self.params.add("trans.c2", np.full((M, l), c0))

    # -- building blocks --------------------------------------------------
    def _gauss_head(self, out: Dict[str, Tensor]) -> GaussianDiag:
        return GaussianDiag(out["mu"], out["sigma"] + SIGMA_FLOOR)

    def encode(self, x_mod) -> GaussianDiag:
        return self._gauss_head(forward_mlp(self.config.encoder_spec(), self.params, x_mod, "enc"))

    def decode(self, z) -> GaussianDiag:
        return self._gauss_head(forward_mlp(self.config.decoder_spec(), self.params, z, "dec"))

    def init_window(self, x_init, p) -> GaussianDiag:
        """``x_init`` is ``[B, K, k]`` (standardized, true forces), ``p`` is ``[B, dim_p]``."""
        x_init = ad.tensor(x_init)
        B, K, k = x_init.shape
        if K != self.config.K or k != self.config.k:
            raise ConfigError(f"init window expects [B, {self.config.K}, {self.config.k}], got {x_init.shape}")
        flat = x_init.reshape(B, K * k)
        if self.config.dim_p:
            flat = ad.concat([flat, ad.tensor(p)], axis=-1)
        return self._gauss_head(forward_mlp(self.config.init_spec(), self.params, flat, "init"))

    def init_transition(self, w0) -> Tensor:
        return forward_mlp(self.config.init_trans_spec(), self.params, w0, "init_trans")["z"]

    def mix_transition(self, z_prev, p):
        """Mixing weights and the mixed matrices/standard deviations.

        Returns ``(alpha, A_t, B_t, sigma_trans, sigma_prior)``; ``B_t`` is
        ``None`` without design parameters.
        """
        c = self.config
        z_prev = ad.tensor(z_prev)
        B = z_prev.shape[0]
        a_in = ad.concat([z_prev, ad.tensor(p)], axis=-1) if c.dim_p else z_prev
        alpha = forward_mlp(c.alpha_spec(), self.params, a_in, "alpha")["alpha"]
        M, l = c.n_bases, c.latent
        A_bases = ad.tanh_scaled(self.params["trans.A"], c.scale).reshape(M, l * l)
        A_t = (alpha @ A_bases).reshape(B, l, l)
        B_t = None
        if c.dim_p:
            B_bases = ad.tanh_scaled(self.params["trans.B"], c.scale).reshape(M, l * c.dim_p)
            B_t = (alpha @ B_bases).reshape(B, l, c.dim_p)
        sigma_trans = alpha @ ad.softplus(self.params["trans.c1"]) + SIGMA_FLOOR
        sigma_prior = alpha @ ad.softplus(self.params["trans.c2"]) + SIGMA_FLOOR
        return alpha, A_t, B_t, sigma_trans, sigma_prior

    def transition(self, z_prev, p) -> Tuple[GaussianDiag, GaussianDiag]:
        """Transition estimate and prior; both share the locally linear mean."""
        z_prev = ad.tensor(z_prev)
        B, l = z_prev.shape
        _, A_t, B_t, s_trans, s_prior = self.mix_transition(z_prev, p)
        mu = z_prev + (A_t @ z_prev.reshape(B, l, 1)).reshape(B, l)
        if B_t is not None:
            p = ad.tensor(p)
            mu = mu + (B_t @ p.reshape(B, self.config.dim_p, 1)).reshape(B, l)
        return GaussianDiag(mu, s_trans), GaussianDiag(mu, s_prior)

    def predictive_decode(self, p_trans: GaussianDiag, eps, mode: str = "train") -> Tuple[Tensor, Tensor]:
        """Force mean/std decoded from the transition estimate, gradient-stopped."""
        with ad.no_grad():
            if mode == "mean":
                z_tilde = p_trans.mu
            else:
                z_tilde = sample(p_trans, eps)
            lik = self.decode(z_tilde)
        fs = self.config.force_slice
        return ad.stop_gradient(lik.mu[:, fs]), ad.stop_gradient(lik.sigma[:, fs])

    # -- checkpoint helpers ------------------------------------------------
    def header(self) -> dict:
        return {"config": self.config.to_dict(), "norm": self.norm.to_dict()}

    @classmethod
    def from_header(cls, header: dict, state: Dict[str, np.ndarray]) -> "DvbfModel":
        model = cls(DvbfConfig.from_dict(header["config"]), NormStats.from_dict(header["norm"]))
        model.params.load_state_dict(state)
        return model


@dataclass
class WindowResult:
    l_recon: Tensor  # [B], time-averaged NLL
    l_kl: Tensor  # [B], time-averaged KL
    lik_mu: np.ndarray  # [B, T, k]
    lik_sigma: np.ndarray  # [B, T, k]
    latent: np.ndarray  # [B, T, l]

    @property
    def loss(self) -> Tensor:
        return elbo_loss(self.l_recon, self.l_kl)


def forward_window(
    model: DvbfModel,
    d: np.ndarray,
    v: np.ndarray,
    f: np.ndarray,
    p: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    mode: str = "train",
    keep_trace: bool = True,
) -> WindowResult:
    """Run one batch of standardized windows through the model.

    ``d, v, f`` are ``[B, T, n_B]``; ``p`` is ``[B, dim_p]`` (standardized).
    In ``train`` mode Gaussian noise is added to the observed inputs of the
    initial network and encoder; ``eval`` samples without noise; ``mean``
    replaces every draw by the distribution mean.

    Draw order per batch: init-input noise ``[B, K k]`` (train), ``w0`` eps
    ``[B, l]``; then for each step t >= 2: predictive eps ``[B, l]``,
    encoder-input noise ``[B, 2 n_B]`` (train), posterior eps ``[B, l]``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    c = model.config
    B, T, nb = d.shape
    if nb != c.n_b or v.shape != d.shape or f.shape != d.shape:
        raise ConfigError(f"window arrays must share shape [B, T, {c.n_b}]")
    if T < c.K + 1:
        raise ConfigError(f"window length {T} shorter than K + 1 = {c.K + 1}")
    if mode != "mean" and rng is None:
        raise ValueError("sampling modes need an rng")
    p = np.asarray(p, float).reshape(B, c.dim_p)
    l = c.latent
    noisy = mode == "train" and c.noise > 0
    x = np.concatenate([d, v, f], axis=-1)  # [B, T, k]

    def draw(shape):
        return rng.standard_normal(shape)

    x_init = x[:, : c.K, :]
    if noisy:
        x_init = x_init + c.noise * draw((B, c.K * c.k)).reshape(B, c.K, c.k)
    q_init = model.init_window(x_init, p)
    w0 = q_init.mu if mode == "mean" else sample(q_init, draw((B, l)))
    z = model.init_transition(w0)

    lik = model.decode(z)
    nll_sum = recon_nll(x[:, 0, :], lik)
    kl_sum = kl_divergence(q_init, standard_normal(B, l))
    trace_mu, trace_sigma, trace_z = [], [], []
    if keep_trace:
        trace_mu.append(lik.mu.data)
        trace_sigma.append(lik.sigma.data)
        trace_z.append(z.data)

    for t in range(1, T):
        p_trans, p_prior = model.transition(z, p)
        eps_pre = None if mode == "mean" else draw((B, l))
        mu_f, sigma_f = model.predictive_decode(p_trans, eps_pre, mode)
        kin = np.concatenate([d[:, t, :], v[:, t, :]], axis=-1)
        if noisy:
            kin = kin + c.noise * draw((B, 2 * nb))
        x_mod = ad.concat([Tensor(kin), mu_f, sigma_f], axis=-1)
        q = fuse_posterior(model.encode(x_mod), p_trans)
        z = q.mu if mode == "mean" else sample(q, draw((B, l)))
        lik = model.decode(z)
        nll_sum = nll_sum + recon_nll(x[:, t, :], lik)
        kl_sum = kl_sum + kl_divergence(q, p_prior)
        if keep_trace:
            trace_mu.append(lik.mu.data)
            trace_sigma.append(lik.sigma.data)
            trace_z.append(z.data)

    stack = (lambda xs: np.stack(xs, axis=1)) if keep_trace else (lambda xs: np.zeros((B, 0)))
    return WindowResult(
        l_recon=nll_sum * (1.0 / T),
        l_kl=kl_sum * (1.0 / T),
        lik_mu=stack(trace_mu),
        lik_sigma=stack(trace_sigma),
        latent=stack(trace_z),
    )
