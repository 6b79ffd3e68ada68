"""Probabilistic model: priors, log-joint density, gradients, synthesis.

The joint density (up to an additive constant that never matters for
inference or learning) is

    log p(z, y, x) = -||z||^2 / 2 - ||x - G_theta(z, y)||^2 / (2 sigma^2)
                     + log pi_y

The Gaussian normalizing constants are dropped everywhere: they cancel in
the z-gradient, in the categorical posterior (sigma is shared across
clusters), and in the theta-gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import netcore
from .errors import ConfigError, InputError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    K: int
    d: int
    D: int
    sigma: float = 0.3
    prior: np.ndarray = None
    hidden: tuple = (64, 64)
    out_activation: str = "identity"

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.d < 0:
            raise ConfigError(f"d must be >= 0, got {self.d}")
        if self.D < 1:
            raise ConfigError(f"D must be >= 1, got {self.D}")
        if not self.sigma >= 0:
            raise ConfigError(f"sigma must be nonnegative, got {self.sigma}")
        if self.prior is None:
            p = np.full(self.K, 1.0 / self.K)
        else:
            p = np.asarray(self.prior, dtype=np.float64)
            if p.shape != (self.K,):
                raise ConfigError(f"prior must have length {self.K}")
            if np.any(p < 0):
                raise ConfigError("prior entries must be nonnegative")
            if abs(p.sum() - 1.0) > 1e-12:
                raise ConfigError(f"prior sums to {p.sum()!r}, not 1")
        p = p.copy()
        p.flags.writeable = False
        object.__setattr__(self, "prior", p)

    @property
    def input_dim(self) -> int:
        return self.d + self.K

    def arch(self):
        return netcore.default_arch(
            self.input_dim, self.D, hidden=self.hidden,
            out_activation=self.out_activation)


@dataclass
class LatentState:
    z: np.ndarray
    y: int

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.y = int(self.y)

    def copy(self):
        return LatentState(self.z.copy(), self.y)


def _check_state(cfg: ModelConfig, state: LatentState):
    if state.z.shape != (cfg.d,):
        raise ShapeError(f"z must have shape ({cfg.d},), got {state.z.shape}")
    if not 0 <= state.y < cfg.K:
        raise InputError(f"y={state.y} out of range [0, {cfg.K})")


def _check_x(cfg: ModelConfig, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (cfg.D,):
        raise ShapeError(f"x must have shape ({cfg.D},), got {x.shape}")
    return x


def log_joint(cfg: ModelConfig, net: netcore.GeneratorNet, x, state: LatentState) -> float:
    """Log joint density, dropping the additive constant: -||z||^2/2 - ||x-G||^2/(2 sigma^2) + log pi_y."""
    if cfg.sigma <= 0:
        raise ConfigError("log_joint needs sigma > 0")
    x = _check_x(cfg, x)
    _check_state(cfg, state)
    p = cfg.prior[state.y]
    if p <= 0.0:
        raise InputError(f"cluster {state.y} has zero prior probability")
    g = netcore.forward(net, state.z, netcore.onehot(state.y, cfg.K))
    r = x - g
    return float(
        -0.5 * np.dot(state.z, state.z)
        - np.dot(r, r) / (2.0 * cfg.sigma ** 2)
        + np.log(p))


def grad_z_log_joint(cfg: ModelConfig, net, x, state: LatentState) -> np.ndarray:
    """Gradient of log_joint in z: -z + J_z^T (x - G) / sigma^2."""
    if cfg.sigma <= 0:
        raise ConfigError("grad_z_log_joint needs sigma > 0")
    x = _check_x(cfg, x)
    _check_state(cfg, state)
    y1 = netcore.onehot(state.y, cfg.K)
    g = netcore.forward(net, state.z, y1)
    upstream = (x - g) / cfg.sigma ** 2
    _, grad_z = netcore.backward(net, state.z, y1, upstream)
    return -state.z + grad_z


def grad_theta_log_joint(cfg: ModelConfig, net, x, state: LatentState) -> np.ndarray:
    """Gradient of log_joint in theta; the prior terms contribute nothing."""
    if cfg.sigma <= 0:
        raise ConfigError("grad_theta_log_joint needs sigma > 0")
    x = _check_x(cfg, x)
    _check_state(cfg, state)
    y1 = netcore.onehot(state.y, cfg.K)
    g = netcore.forward(net, state.z, y1)
    upstream = (x - g) / cfg.sigma ** 2
    grad_theta, _ = netcore.backward(net, state.z, y1, upstream)
    return grad_theta


def sample_categorical(prior: np.ndarray, rng) -> int:
    """Inverse-CDF draw: smallest i with cumulative mass strictly above u."""
    cum = np.cumsum(prior)
    u = rng.random() * cum[-1]
    return int(min(np.searchsorted(cum, u, side="left"), len(prior) - 1))


def synthesize(cfg: ModelConfig, net: netcore.GeneratorNet, rng):
    """Generative process: y ~ Cat(pi), z ~ N(0, I), x = G(z, y) + sigma * eps."""
    y = sample_categorical(cfg.prior, rng)
    z = rng.standard_normal(cfg.d)
    mean = netcore.forward(net, z, netcore.onehot(y, cfg.K))
    x = mean + cfg.sigma * rng.standard_normal(cfg.D)
    return x, LatentState(z, y)
