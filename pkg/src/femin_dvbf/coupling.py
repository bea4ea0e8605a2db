"""Online coupling of a trained filter with the truncated FEM model.

Every solver step the model reads the fresh boundary kinematics, updates its
latent state with distribution means only (no sampling) and returns the mean
section force, which the solver applies during the next increment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .dvbf import DvbfModel, NormStats, fuse_posterior
from .fem import BoundaryDriver, IntegrationDiverged, LoadCase, MeshModel

__all__ = [
    "SurrogateDiverged",
    "OnlineState",
    "online_init",
    "online_step",
    "SurrogateForces",
    "ReplayForces",
    "FeminRunResult",
    "run_femin",
]


class SurrogateDiverged(RuntimeError):
    def __init__(self, step_index: int, message: str = "non-finite surrogate output"):
        super().__init__(f"{message} at step {step_index}")
        self.step_index = step_index
        self.partial: Optional["FeminRunResult"] = None


@dataclass
class OnlineState:
    z: np.ndarray  # [l]
    t: int
    init_inputs: np.ndarray  # [K, k], standardized padding
    p: np.ndarray  # [dim_p], standardized
    lik_mu: np.ndarray  # [k], standardized decoder mean at step t
    lik_sigma: np.ndarray  # [k]
    norm: NormStats = field(repr=False)

    def physical(self):
        """Decoder mean/std for (d, v, f) at step ``t`` in SI units, each ``[n_B]``."""
        mean, std = self.norm.obs_mean(), self.norm.obs_std()
        mu = self.lik_mu * std + mean
        sigma = self.lik_sigma * std
        nb = len(self.norm.d_mean)
        return mu.reshape(3, nb), sigma.reshape(3, nb)


def _check(step: int, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise SurrogateDiverged(step)


def online_init(model: DvbfModel, d0, v0, f0, p=()) -> OnlineState:
    """Pad the initial observation K times, take the mean of q_init, map to z_0."""
    c, norm = model.config, model.norm
    d, v, f = norm.standardize(np.asarray(d0, float), np.asarray(v0, float), np.asarray(f0, float))
    x0 = np.concatenate([d, v, f])
    x_init = np.tile(x0, (c.K, 1))
    ps = norm.standardize_p(np.asarray(p, float).reshape(c.dim_p)) if c.dim_p else np.zeros(0)
    try:
        with ad.no_grad():
            q = model.init_window(x_init[None], ps[None])
            z = model.init_transition(q.mu)
            lik = model.decode(z)
    except ad.NonFiniteError:
        raise SurrogateDiverged(0) from None
    state = OnlineState(z.data[0].copy(), 0, x_init, ps, lik.mu.data[0].copy(), lik.sigma.data[0].copy(), norm)
    _check(0, state.z, state.lik_mu, state.lik_sigma)
    return state


def online_step(model: DvbfModel, state: OnlineState, d_t, v_t):
    """Advance the latent mean with kinematics of step ``t = state.t + 1``.

    Returns ``(f_applied, sigma_f, new_state)`` with forces in newtons.
    """
    c, norm = model.config, model.norm
    d = (np.asarray(d_t, float) - norm.d_mean) / norm.d_std
    v = (np.asarray(v_t, float) - norm.v_mean) / norm.v_std
    t = state.t + 1
    try:
        with ad.no_grad():
            p_trans, _ = model.transition(state.z[None], state.p[None])
            mu_f, sigma_f = model.predictive_decode(p_trans, None, "mean")
            x_mod = ad.concat([ad.Tensor(np.concatenate([d, v])[None]), mu_f, sigma_f], axis=-1)
            q = fuse_posterior(model.encode(x_mod), p_trans)
            lik = model.decode(q.mu)
    except ad.NonFiniteError:
        raise SurrogateDiverged(t) from None
    new = OnlineState(q.mu.data[0].copy(), t, state.init_inputs, state.p,
                      lik.mu.data[0].copy(), lik.sigma.data[0].copy(), norm)
    _check(t, new.z, new.lik_mu, new.lik_sigma)
    f, s = _force(new)
    return f, s, new


def _force(state: OnlineState):
    fs = slice(2 * len(state.norm.d_mean), None)
    return state.norm.destandardize_force(state.lik_mu[fs], state.lik_sigma[fs])


class SurrogateForces:
    """Force provider backed by a trained model (means only)."""

    def __init__(self, model: DvbfModel):
        self.model = model
        self.state: Optional[OnlineState] = None

    @property
    def latent_dim(self) -> int:
        return self.model.config.latent

    def start(self, d0, v0, p):
        nb = len(np.atleast_1d(d0))
        # the analog load cases start unloaded
        self.state = online_init(self.model, d0, v0, np.zeros(nb), p)
        return _force(self.state)

    def step(self, t: int, d, v):
        f, s, self.state = online_step(self.model, self.state, d, v)
        return f, s

    def kinematic_stats(self):
        mu, sigma = self.state.physical()
        return mu[:2], sigma[:2]


class ReplayForces:
    """Oracle provider that replays recorded section forces (sigma reported as 0)."""

    latent_dim = 0

    def __init__(self, f_B):
        f_B = np.asarray(f_B, float)
        self.f_B = f_B[:, None] if f_B.ndim == 1 else f_B

    def start(self, d0, v0, p):
        return self.f_B[0].copy(), np.zeros(self.f_B.shape[1])

    def step(self, t: int, d, v):
        return self.f_B[t].copy(), np.zeros(self.f_B.shape[1])

    def kinematic_stats(self):
        return None, None


@dataclass
class FeminRunResult:
    d_B: np.ndarray  # [T, n_B]
    v_B: np.ndarray
    f_applied: np.ndarray
    sigma_f: np.ndarray
    latent: np.ndarray  # [T, l]
    p: tuple
    kin_mu: Optional[np.ndarray] = None  # [T, 2, n_B] decoder mean of (d, v)
    kin_sigma: Optional[np.ndarray] = None
    status: str = "ok"
    failed_step: Optional[int] = None

    @property
    def T(self) -> int:
        return len(self.d_B)

    def to_csv(self, path) -> None:
        nb = self.d_B.shape[1]
        cols = ["t"] + [f"{q}{i}" for q in ("d_B", "v_B", "f_applied", "sigma_f") for i in range(nb)]
        blocks = [np.arange(self.T)[:, None], self.d_B, self.v_B, self.f_applied, self.sigma_f]
        if self.kin_sigma is not None:
            cols += [f"{q}{i}" for q in ("sigma_d", "sigma_v") for i in range(nb)]
            blocks += [self.kin_sigma[:, 0], self.kin_sigma[:, 1]]
        np.savetxt(path, np.column_stack(blocks), delimiter=",", header=",".join(cols), comments="", fmt="%.17g")

    def sidecar(self, checkpoint_hash: str = "", load_case: Optional[LoadCase] = None) -> dict:
        return {
            "checkpoint_hash": checkpoint_hash,
            "load_case": load_case.describe() if load_case else None,
            "p": list(self.p),
            "T": self.T,
            "status": self.status,
            "failed_step": self.failed_step,
        }

    def write(self, csv_path, json_path, **sidecar_kw) -> None:
        self.to_csv(csv_path)
        with open(json_path, "w") as fh:
            json.dump(self.sidecar(**sidecar_kw), fh, indent=1, sort_keys=True)


def run_femin(truncated: MeshModel, load_case: LoadCase, provider, T: int, dt: float,
              p: Sequence[float] = ()) -> FeminRunResult:
    """Alternate provider and solver for ``T`` steps.

    ``provider`` is a :class:`DvbfModel`, :class:`SurrogateForces` or
    :class:`ReplayForces`.  The force computed from the kinematics of step
    ``t`` is applied during the increment ``t -> t+1``.  On divergence the
    raised error carries the partial trace in ``.partial``.
    """
    if isinstance(provider, DvbfModel):
        provider = SurrogateForces(provider)
    drv = BoundaryDriver(truncated, load_case, dt)
    nb = len(drv.bnodes)
    d_B, v_B = np.zeros((T, nb)), np.zeros((T, nb))
    f_app, sig = np.zeros((T, nb)), np.zeros((T, nb))
    latent = np.zeros((T, provider.latent_dim))
    track_kin = isinstance(provider, SurrogateForces)
    kin_mu = np.zeros((T, 2, nb)) if track_kin else None
    kin_sigma = np.zeros((T, 2, nb)) if track_kin else None

    def partial(t, status):
        return FeminRunResult(d_B[:t], v_B[:t], f_app[:t], sig[:t], latent[:t], tuple(p),
                              None if kin_mu is None else kin_mu[:t],
                              None if kin_sigma is None else kin_sigma[:t], status, t)

    t = 0
    try:
        for t in range(T):
            d_B[t], v_B[t] = drv.d_B, drv.v_B
            if t == 0:
                f, s = provider.start(d_B[0], v_B[0], p)
            else:
                f, s = provider.step(t, d_B[t], v_B[t])
            f_app[t], sig[t] = f, s
            if track_kin:
                latent[t] = provider.state.z
                kin_mu[t], kin_sigma[t] = provider.kinematic_stats()
            drv.advance(f)
    except SurrogateDiverged as exc:
        exc.partial = partial(t, "surrogate_diverged")
        raise
    except IntegrationDiverged as exc:
        exc.partial = partial(t, "integration_diverged")
        raise
    return FeminRunResult(d_B, v_B, f_app, sig, latent, tuple(p), kin_mu, kin_sigma)
