"""Posterior inference: Langevin dynamics on z, exact categorical posterior
on y, and the Gibbs sweep combining them.

The Langevin update is

    z' = z + delta * grad_z log p(z, x, y) + sqrt(2 delta) * noise

with unadjusted (no Metropolis correction) dynamics. The y posterior
is computed exactly:

    p(y = i | x, z)  propto  pi_i * exp(-||x - G(z, y=i)||^2 / (2 sigma^2))

stabilized by subtracting the max log-score before exponentiating.

Batched inference pre-draws all of an iteration's randomness from a single
keyed stream before any chunked arithmetic runs, so results do not depend on
chunk boundaries or thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import model, netcore
from .errors import ConfigError
from .model import LatentState, ModelConfig

GRAD_CLIP = 1e3

# fixed chunk width for batched inference; independent of --threads and
# batch size so the arithmetic (and therefore every emitted byte) never
# depends on the degree of parallelism
CHUNK = 512

_THREADS = 1


def set_threads(n: int):
    """Cap chunk-level parallelism. Results never depend on this: every
    chunk computes the same numbers wherever it runs."""
    global _THREADS
    _THREADS = max(1, int(n))


def map_chunks(fn, n):
    """Apply fn(lo, hi) to each fixed-width chunk of range(n).

    Chunks write to disjoint output slices, so running them on a thread
    pool is safe; per-chunk return values come back in chunk order.
    """
    spans = [(lo, min(lo + CHUNK, n)) for lo in range(0, n, CHUNK)]
    if _THREADS == 1 or len(spans) <= 1:
        return [fn(lo, hi) for lo, hi in spans]
    with ThreadPoolExecutor(max_workers=min(_THREADS, len(spans))) as pool:
        return list(pool.map(lambda span: fn(*span), spans))


@dataclass(frozen=True)
class InferenceConfig:
    step_size: float = None  # None -> 0.3 * sigma^2 at use time
    steps: int = 100
    y_mode: str = "sample"
    rng_seed: object = 0

    def __post_init__(self):
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigError(f"step_size must be positive, got {self.step_size}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.y_mode not in ("sample", "map"):
            raise ConfigError(f"y_mode must be sample or map, got {self.y_mode!r}")

    def resolved_step_size(self, cfg: ModelConfig) -> float:
        if self.step_size is not None:
            return self.step_size
        return 0.3 * cfg.sigma ** 2

    def with_seed(self, seed) -> "InferenceConfig":
        return replace(self, rng_seed=seed)


def make_rng(seed) -> np.random.Generator:
    """Generator from an int or tuple key, stable across platforms."""
    return np.random.default_rng(np.random.SeedSequence(seed))


class ClipCounter:
    """Counts Langevin gradient-clip events."""

    __slots__ = ("count",)

    def __init__(self):
        self.count = 0


def langevin_step(cfg: ModelConfig, net, x, state: LatentState, delta, noise,
                  clip_counter: ClipCounter = None) -> np.ndarray:
    """One Langevin update of z; y untouched. Noise is caller-supplied."""
    if not delta > 0:
        raise ConfigError(f"delta must be positive, got {delta}")
    noise = np.asarray(noise, dtype=np.float64)
    grad = model.grad_z_log_joint(cfg, net, x, state)
    gn = float(np.linalg.norm(grad))
    if gn > GRAD_CLIP:
        grad = grad * (GRAD_CLIP / gn)
        if clip_counter is not None:
            clip_counter.count += 1
    return state.z + delta * grad + np.sqrt(2.0 * delta) * noise


def langevin_infer_z(cfg: ModelConfig, net, x, state: LatentState,
                     inf_cfg: InferenceConfig, rng=None,
                     clip_counter: ClipCounter = None) -> np.ndarray:
    """Run `steps` Langevin updates from state.z with y held fixed.

    Fresh unit-normal noise per step comes from the stream seeded by
    inf_cfg.rng_seed (or the explicitly passed generator).
    """
    if rng is None:
        rng = make_rng(inf_cfg.rng_seed)
    delta = inf_cfg.resolved_step_size(cfg)
    z = state.z
    cur = LatentState(z, state.y)
    for _ in range(inf_cfg.steps):
        noise = rng.standard_normal(cfg.d)
        z = langevin_step(cfg, net, x, cur, delta, noise, clip_counter)
        cur = LatentState(z, state.y)
    return z


def posterior_y(cfg: ModelConfig, net, x, z) -> np.ndarray:
    """Exact categorical posterior over clusters at fixed z."""
    if cfg.sigma <= 0:
        raise ConfigError("posterior_y needs sigma > 0")
    if not np.any(cfg.prior > 0):
        raise ConfigError("all clusters have zero prior probability")
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    scores = np.empty(cfg.K)
    for k in range(cfg.K):
        g = netcore.forward(net, z, netcore.onehot(k, cfg.K))
        r = x - g
        scores[k] = -np.dot(r, r) / (2.0 * cfg.sigma ** 2)
    return _normalize_scores(scores, cfg.prior)


def _normalize_scores(scores, prior):
    with np.errstate(divide="ignore"):
        logw = scores + np.log(prior)
    m = np.max(logw)
    p = np.exp(logw - m)
    return p / p.sum()


def infer_y(cfg: ModelConfig, net, x, z, inf_cfg: InferenceConfig, rng) -> int:
    """Sample from posterior_y, or take its argmax (ties to smallest index)."""
    post = posterior_y(cfg, net, x, z)
    if inf_cfg.y_mode == "map":
        return int(np.argmax(post))
    return model.sample_categorical(post, rng)


def gibbs_sweep(cfg: ModelConfig, net, x, state: LatentState,
                inf_cfg: InferenceConfig, rng=None,
                clip_counter: ClipCounter = None) -> LatentState:
    """One sweep: update z by Langevin with y fixed, then update y at the
    new z. Both draws come from one stream so the sweep is reproducible
    from inf_cfg.rng_seed alone."""
    if rng is None:
        rng = make_rng(inf_cfg.rng_seed)
    z = langevin_infer_z(cfg, net, x, state, inf_cfg, rng=rng,
                         clip_counter=clip_counter)
    y = infer_y(cfg, net, x, z, inf_cfg, rng)
    return LatentState(z, y)


# ---------------------------------------------------------------------------
# Batched fast path. Same arithmetic as the per-example operations above,
# vectorized across examples in fixed-width chunks. learn.fit and cmd_eval
# go through these; the scalar entry points remain the reference contract.
# ---------------------------------------------------------------------------

def draw_sweep_noise(rng, n, steps, d):
    """All randomness one batched sweep needs, drawn up front.

    Row i of the noise tensor feeds example i's Langevin chain; uniforms[i]
    is its y draw. Pre-drawing fixes the values before any chunking happens.
    """
    noise = rng.standard_normal((n, steps, d))
    uniforms = rng.random(n)
    return noise, uniforms


def langevin_batch(cfg: ModelConfig, net, X, Z, Y, delta, steps, noise,
                   clip_counter: ClipCounter = None) -> np.ndarray:
    """Vectorized l-step Langevin update; row i uses noise[i]."""
    if cfg.d == 0 or steps == 0:
        return np.array(Z, dtype=np.float64, copy=True)
    n = X.shape[0]
    out_z = np.empty_like(Z)
    eye = np.eye(cfg.K)
    root = np.sqrt(2.0 * delta)

    def work(lo, hi):
        clips = 0
        xb = X[lo:hi]
        u = np.concatenate([Z[lo:hi], eye[Y[lo:hi]]], axis=1)
        zb = u[:, :cfg.d]
        nb = noise[lo:hi]
        for step in range(steps):
            out, cache = netcore.forward_batch(net, u, want_cache=True)
            up = (xb - out) / cfg.sigma ** 2
            grad = -zb + netcore.backward_input_batch(net, cache, up)[:, :cfg.d]
            gn = np.linalg.norm(grad, axis=1, keepdims=True)
            mask = gn > GRAD_CLIP
            if np.any(mask):
                clips += int(mask.sum())
                np.divide(grad, gn / GRAD_CLIP, out=grad, where=mask)
            u[:, :cfg.d] = zb + delta * grad + root * nb[:, step]
        out_z[lo:hi] = zb
        return clips

    clip_totals = map_chunks(work, n)
    if clip_counter is not None:
        clip_counter.count += sum(clip_totals)
    return out_z


def posterior_y_batch(cfg: ModelConfig, net, X, Z) -> np.ndarray:
    """Posterior over clusters for every row; exact, log-sum-exp stable."""
    n = X.shape[0]
    probs = np.empty((n, cfg.K))
    eye = np.eye(cfg.K)
    with np.errstate(divide="ignore"):
        logpi = np.log(cfg.prior)

    def work(lo, hi):
        xb = X[lo:hi]
        scores = np.empty((hi - lo, cfg.K))
        u = np.empty((hi - lo, cfg.d + cfg.K))
        u[:, :cfg.d] = Z[lo:hi]
        for k in range(cfg.K):
            u[:, cfg.d:] = eye[k]
            out = netcore.forward_batch(net, u)
            scores[:, k] = -np.sum((xb - out) ** 2, axis=1) / (2.0 * cfg.sigma ** 2)
        logw = scores + logpi
        # non-finite scores propagate as nan rows; the training loop turns
        # them into a NumericalError, so no point warning here
        with np.errstate(invalid="ignore"):
            logw -= logw.max(axis=1, keepdims=True)
            p = np.exp(logw)
            p /= p.sum(axis=1, keepdims=True)
        probs[lo:hi] = p

    map_chunks(work, n)
    return probs


def infer_y_batch(cfg: ModelConfig, net, X, Z, y_mode, uniforms=None) -> np.ndarray:
    """Vectorized infer_y. In sample mode row i consumes uniforms[i]."""
    post = posterior_y_batch(cfg, net, X, Z)
    if y_mode == "map":
        return np.argmax(post, axis=1).astype(np.int64)
    cum = np.cumsum(post, axis=1)
    u = uniforms[:, None] * cum[:, -1:]
    idx = (cum < u).sum(axis=1)
    return np.minimum(idx, cfg.K - 1).astype(np.int64)


def gibbs_sweep_batch(cfg: ModelConfig, net, X, Z, Y, inf_cfg: InferenceConfig,
                      rng, clip_counter: ClipCounter = None):
    """Batched Gibbs sweep over the given rows; returns (Z', Y')."""
    delta = inf_cfg.resolved_step_size(cfg)
    noise, uniforms = draw_sweep_noise(rng, X.shape[0], inf_cfg.steps, cfg.d)
    z_new = langevin_batch(cfg, net, X, Z, Y, delta, inf_cfg.steps, noise,
                           clip_counter)
    y_new = infer_y_batch(cfg, net, X, z_new, inf_cfg.y_mode, uniforms)
    return z_new, y_new
