"""Alternating training loop: latent inference then parameter ascent.

Each training iteration runs one Gibbs sweep over the current minibatch
(Langevin on z with y fixed, then a categorical draw of y at the new z),
warm-starting every example from its persistent latents, then takes one
momentum-SGD ascent step on theta against the minibatch-mean gradient of
the log-joint.

Random streams: theta init, latent init, the epoch shuffles, and each
iteration's inference noise get their own streams keyed off the run seed.
Nothing depends on chunking or thread count, so repeated runs are
byte-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import infer, metrics, netcore
from .errors import ConfigError, InputError, NumericalError, ParseError
from .infer import InferenceConfig
from .model import LatentState, ModelConfig

LATENTS_MAGIC = b"CLL1"

# stream tags: domain separation for the seed-derived generators
_TAG_THETA = 1
_TAG_LATENTS = 2
_TAG_ORDER = 3
_TAG_NOISE = 4


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    learning_rate: float = 0.0002
    momentum: float = 0.5
    optimizer: str = "sgd"  # "sgd" (momentum ascent) or "adam"
    batch_size: object = "auto"  # positive int, "ALL", or "auto"
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(
                f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")
        b = self.batch_size
        if isinstance(b, str):
            if b not in ("ALL", "auto"):
                raise ConfigError(f"batch_size must be a positive int, ALL or auto, got {b!r}")
        elif int(b) < 1:
            raise ConfigError("batch_size must be >= 1")

    def resolved_batch(self, n: int) -> int:
        """Minibatch size for a dataset of n examples.

        "auto" uses the full dataset when it is small (synthetic-benchmark
        scale) and 128 otherwise.
        """
        b = self.batch_size
        if b == "ALL":
            return n
        if b == "auto":
            return n if n <= 4096 else min(128, n)
        return min(int(b), n)


@dataclass
class TrainState:
    net: netcore.GeneratorNet
    Z: np.ndarray             # n x d persistent continuous latents
    Y: np.ndarray             # n persistent cluster labels
    velocity: np.ndarray      # same length as theta
    second_moment: np.ndarray = None  # adam only; untouched under sgd
    iteration: int = 0
    clip_count: int = 0

    @property
    def latents(self):
        """Per-example LatentState views of the persistent latents."""
        return [LatentState(self.Z[i], int(self.Y[i])) for i in range(len(self.Y))]


@dataclass
class MetricsRow:
    iteration: int
    recon_mse: float
    mean_log_joint: float
    acc: float  # None when the dataset has no labels
    clip_count: int


def init(dataset, model_cfg: ModelConfig, arch, seed) -> TrainState:
    """Fresh training state: theta per netcore init policy, z ~ N(0, I),
    y ~ Cat(pi), zero velocity."""
    n = dataset.examples.shape[0]
    if n == 0:
        raise InputError("dataset is empty")
    net = netcore.init_net(arch, infer.make_rng((int(seed), _TAG_THETA)))
    rng = infer.make_rng((int(seed), _TAG_LATENTS))
    Z = rng.standard_normal((n, model_cfg.d))
    cum = np.cumsum(model_cfg.prior)
    u = rng.random(n)
    Y = np.minimum(np.searchsorted(cum, u, side="left"), model_cfg.K - 1)
    Y = Y.astype(np.int64)
    return TrainState(net=net, Z=Z, Y=Y,
                      velocity=np.zeros_like(net.theta),
                      second_moment=np.zeros_like(net.theta), iteration=0)


def _batch_indices(train_cfg: TrainConfig, n: int, iteration: int) -> np.ndarray:
    """Minibatch for a given iteration, derived statelessly from the seed.

    Examples are visited in a fresh shuffled order each epoch; every
    example appears exactly once per epoch.
    """
    b = train_cfg.resolved_batch(n)
    per_epoch = (n + b - 1) // b
    epoch, slot = divmod(iteration, per_epoch)
    if b == n:
        return np.arange(n)
    rng = infer.make_rng((int(train_cfg.seed), _TAG_ORDER, int(epoch)))
    perm = rng.permutation(n)
    return perm[slot * b:(slot + 1) * b]


def train_iteration(state: TrainState, dataset, model_cfg: ModelConfig,
                    inf_cfg: InferenceConfig, train_cfg: TrainConfig) -> TrainState:
    """One training iteration on one minibatch (mutates state in place)."""
    X = dataset.examples
    n = X.shape[0]
    idx = _batch_indices(train_cfg, n, state.iteration)
    xb = X[idx]

    counter = infer.ClipCounter()
    sweep_rng = infer.make_rng(
        (int(train_cfg.seed), _TAG_NOISE, state.iteration))
    z_new, y_new = infer.gibbs_sweep_batch(
        model_cfg, state.net, xb, state.Z[idx], state.Y[idx], inf_cfg,
        sweep_rng, counter)
    state.clip_count += counter.count
    state.Z[idx] = z_new
    state.Y[idx] = y_new

    eye = np.eye(model_cfg.K)
    u = np.concatenate([z_new, eye[y_new]], axis=1)
    out, cache = netcore.forward_batch(state.net, u, want_cache=True)
    upstream = (xb - out) / model_cfg.sigma ** 2
    if not np.all(np.isfinite(upstream)):
        bad = np.flatnonzero(~np.isfinite(upstream).all(axis=1))[0]
        raise NumericalError(
            f"non-finite residual for example {int(idx[bad])} "
            f"at iteration {state.iteration}")
    grad_theta, _ = netcore.backward_batch(state.net, cache, upstream)
    grad_theta /= len(idx)
    if not np.all(np.isfinite(grad_theta)):
        raise NumericalError(
            f"non-finite parameter gradient (norm {np.linalg.norm(grad_theta)!r}) "
            f"at iteration {state.iteration}")

    if train_cfg.optimizer == "adam":
        # Adaptive variant: momentum doubles as beta1, beta2/eps are the
        # customary 0.999 / 1e-8, with bias-corrected ascent steps.
        b1, b2 = train_cfg.momentum, 0.999
        t = state.iteration + 1
        state.velocity *= b1
        state.velocity += (1.0 - b1) * grad_theta
        state.second_moment *= b2
        state.second_moment += (1.0 - b2) * grad_theta ** 2
        mhat = state.velocity / (1.0 - b1 ** t)
        vhat = state.second_moment / (1.0 - b2 ** t)
        state.net.theta += train_cfg.learning_rate * mhat / (np.sqrt(vhat) + 1e-8)
    else:
        state.velocity *= train_cfg.momentum
        state.velocity += grad_theta
        state.net.theta += train_cfg.learning_rate * state.velocity
    state.iteration += 1
    return state


def dataset_metrics(state: TrainState, dataset, model_cfg: ModelConfig) -> MetricsRow:
    """Metrics over the full dataset at the current persistent latents."""
    X = dataset.examples
    n = X.shape[0]
    eye = np.eye(model_cfg.K)
    sq = np.empty(n)

    def work(lo, hi):
        u = np.concatenate([state.Z[lo:hi], eye[state.Y[lo:hi]]], axis=1)
        out = netcore.forward_batch(state.net, u)
        sq[lo:hi] = np.sum((X[lo:hi] - out) ** 2, axis=1)

    infer.map_chunks(work, n)
    recon = float(sq.mean())
    with np.errstate(divide="ignore"):
        logpi = np.log(model_cfg.prior)
    lj = (-0.5 * np.sum(state.Z ** 2, axis=1)
          - sq / (2.0 * model_cfg.sigma ** 2)
          + logpi[state.Y])
    acc = None
    if dataset.labels is not None:
        ev = metrics.clustering_accuracy(dataset.labels, state.Y)
        acc = ev.acc
    return MetricsRow(iteration=state.iteration, recon_mse=recon,
                      mean_log_joint=float(lj.mean()), acc=acc,
                      clip_count=state.clip_count)


def fit(dataset, model_cfg: ModelConfig, inf_cfg: InferenceConfig,
        train_cfg: TrainConfig, arch=None, progress=None):
    """Run the alternating updates for the configured iterations; returns (TrainState, metric rows).

    A metrics row is appended every log_every iterations and always after
    the final iteration, so the log's last row reflects the returned state.
    """
    if arch is None:
        arch = model_cfg.arch()
    state = init(dataset, model_cfg, arch, train_cfg.seed)
    log = []
    T = train_cfg.iterations
    for t in range(T):
        train_iteration(state, dataset, model_cfg, inf_cfg, train_cfg)
        if state.iteration % train_cfg.log_every == 0 or t == T - 1:
            log.append(dataset_metrics(state, dataset, model_cfg))
            if progress is not None:
                progress(log[-1])
    return state, log


def write_metrics_csv(rows, path):
    """CSV with header iter,recon_mse,mean_log_joint,acc,clip_count.

    Floats are written with repr so the file round-trips bit-exactly.
    """
    with open(path, "w") as fh:
        fh.write("iter,recon_mse,mean_log_joint,acc,clip_count\n")
        for r in rows:
            acc = "" if r.acc is None else repr(float(r.acc))
            fh.write(f"{r.iteration},{repr(float(r.recon_mse))},"
                     f"{repr(float(r.mean_log_joint))},{acc},{r.clip_count}\n")


def save_latents(state: TrainState, path):
    """Sidecar dump: magic CLL1, u64 n, then per example d f64 z + u32 y."""
    n, d = state.Z.shape
    blob = bytearray()
    blob += LATENTS_MAGIC
    blob += struct.pack("<Q", n)
    z = state.Z.astype("<f8")
    y = state.Y.astype("<u4")
    for i in range(n):
        blob += z[i].tobytes()
        blob += y[i].tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_latents(path, d):
    """Read a CLL1 sidecar; returns (Z, Y)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != LATENTS_MAGIC:
        raise ParseError(f"bad latents magic {blob[:4]!r}", offset=0)
    if len(blob) < 12:
        raise ParseError("truncated latents header", offset=len(blob))
    (n,) = struct.unpack_from("<Q", blob, 4)
    rec = 8 * d + 4
    need = 12 + n * rec
    if len(blob) != need:
        raise ParseError(
            f"latents payload length {len(blob)} != expected {need}",
            offset=min(len(blob), need))
    Z = np.empty((n, d))
    Y = np.empty(n, dtype=np.int64)
    off = 12
    for i in range(n):
        Z[i] = np.frombuffer(blob, dtype="<f8", count=d, offset=off)
        off += 8 * d
        (Y[i],) = struct.unpack_from("<I", blob, off)
        off += 4
    return Z, Y
