"""Per-pixel clustering: the discrete latent becomes an H x W label map.

Emission is pixel-factorized: pixel (r, c) has mean palette[label(r, c)]
plus an optional global style offset computed from z by a small dense
network and shared across pixels. With smoothing beta = 0 the per-pixel
posterior is exact; beta > 0 adds a Potts-style reward for 4-neighbors
sharing a label and the sweep becomes coordinate-wise Gibbs in raster
order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as datamod
from . import infer, learn, metrics, model, netcore
from .errors import ConfigError, GenerationError, InputError, ShapeError
from .infer import InferenceConfig, make_rng
from .model import ModelConfig

_TAG_SCENE_PALETTE = 21
_TAG_SCENE_DRAWS = 22
_TAG_EVAL = 23


@dataclass
class LabelMap:
    """H x W integer labels."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ShapeError(
                f"label map must be 2-D, got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise InputError("label map entries must be integers")
        self.labels = self.labels.astype(np.int64)
        if self.labels.size and self.labels.min() < 0:
            raise InputError("label map entries must be nonnegative")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def check_range(self, k: int):
        if self.labels.size and self.labels.max() >= k:
            raise InputError(
                f"label {self.labels.max()} out of range [0, {k})")

    def copy(self) -> "LabelMap":
        return LabelMap(self.labels.copy())


@dataclass(frozen=True)
class PixelSceneConfig:
    """Per-pixel generative parameters.

    palette: K x channels emission means. modulation: optional dense net
    mapping z (length d) to a channel offset shared by every pixel; None
    means no style pathway (d may still be 0 in that case).
    """

    k: int
    d: int
    palette: np.ndarray
    sigma: float = 0.3
    beta: float = 0.0
    modulation: netcore.GeneratorNet = None

    def __post_init__(self):
        pal = np.asarray(self.palette, dtype=np.float64)
        if pal.ndim != 2 or pal.shape[0] != self.k:
            raise ConfigError(
                f"palette must be K x channels with K={self.k}, "
                f"got shape {pal.shape}")
        pal = pal.copy()
        pal.flags.writeable = False
        object.__setattr__(self, "palette", pal)
        if self.k < 1:
            raise ConfigError(f"K must be >= 1, got {self.k}")
        if self.d < 0:
            raise ConfigError(f"d must be >= 0, got {self.d}")
        if not self.sigma >= 0:
            raise ConfigError(f"sigma must be nonnegative, got {self.sigma}")
        if not self.beta >= 0:
            raise ConfigError(f"beta must be nonnegative, got {self.beta}")
        if self.modulation is not None:
            if self.modulation.input_dim != self.d:
                raise ConfigError(
                    f"modulation net consumes {self.modulation.input_dim} "
                    f"inputs, expected d={self.d}")
            if self.modulation.output_dim != pal.shape[1]:
                raise ConfigError(
                    f"modulation net emits {self.modulation.output_dim} "
                    f"channels, palette has {pal.shape[1]}")

    @property
    def channels(self) -> int:
        return self.palette.shape[1]


def _check_z(cfg: PixelSceneConfig, z):
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (cfg.d,):
        raise ShapeError(f"z must have shape ({cfg.d},), got {z.shape}")
    return z


def _check_image(cfg: PixelSceneConfig, x, label_map: LabelMap):
    x = np.asarray(x, dtype=np.float64)
    want = (label_map.height, label_map.width, cfg.channels)
    if x.shape != want:
        raise ShapeError(f"image must have shape {want}, got {x.shape}")
    return x


def modulation_offset(cfg: PixelSceneConfig, z) -> np.ndarray:
    """Global per-channel style offset; zero when there is no style net."""
    if cfg.modulation is None:
        return np.zeros(cfg.channels)
    z = _check_z(cfg, z)
    return netcore.forward_batch(cfg.modulation, z[None, :])[0]


def pixel_forward(cfg: PixelSceneConfig, z, label_map: LabelMap) -> np.ndarray:
    """Mean image: palette lookup plus the shared style offset."""
    label_map.check_range(cfg.k)
    off = modulation_offset(cfg, z)
    return cfg.palette[label_map.labels] + off


def _neighbor_counts(labels, k, r, c):
    """How many 4-neighbors of (r, c) carry each label."""
    counts = np.zeros(k)
    h, w = labels.shape
    if r > 0:
        counts[labels[r - 1, c]] += 1
    if r + 1 < h:
        counts[labels[r + 1, c]] += 1
    if c > 0:
        counts[labels[r, c - 1]] += 1
    if c + 1 < w:
        counts[labels[r, c + 1]] += 1
    return counts


def pixel_posterior(cfg: PixelSceneConfig, x, z, label_map: LabelMap,
                    r, c) -> np.ndarray:
    """Posterior over the label of pixel (r, c), all else fixed.

    Proportional to exp(-||x(r,c) - mean_i(r,c)||^2 / (2 sigma^2))
    times exp(beta * #{4-neighbors with label i}); the cluster prior is
    uniform. With beta = 0 this is the exact factorized posterior.
    """
    if cfg.sigma <= 0:
        raise ConfigError("pixel_posterior needs sigma > 0")
    x = _check_image(cfg, x, label_map)
    if not (0 <= r < label_map.height and 0 <= c < label_map.width):
        raise InputError(f"pixel ({r}, {c}) out of bounds")
    off = modulation_offset(cfg, z)
    resid = x[r, c][None, :] - (cfg.palette + off)
    scores = -np.sum(resid ** 2, axis=1) / (2.0 * cfg.sigma ** 2)
    if cfg.beta > 0:
        scores = scores + cfg.beta * _neighbor_counts(label_map.labels,
                                                      cfg.k, r, c)
    scores -= scores.max()
    p = np.exp(scores)
    return p / p.sum()


def _all_pixel_scores(cfg: PixelSceneConfig, x, z) -> np.ndarray:
    """H x W x K emission log-scores (no neighbor term)."""
    off = modulation_offset(cfg, z)
    means = cfg.palette + off                       # K x C
    resid = x[:, :, None, :] - means[None, None]    # H x W x K x C
    return -np.sum(resid ** 2, axis=3) / (2.0 * cfg.sigma ** 2)


def grad_z_pixel_log_joint(cfg: PixelSceneConfig, x, z,
                           label_map: LabelMap) -> np.ndarray:
    """Gradient in z of the factorized log-joint (prior included)."""
    if cfg.sigma <= 0:
        raise ConfigError("grad_z_pixel_log_joint needs sigma > 0")
    z = _check_z(cfg, z)
    if cfg.modulation is None or cfg.d == 0:
        return -z
    x = _check_image(cfg, x, label_map)
    mean = pixel_forward(cfg, z, label_map)
    upstream = np.sum(x - mean, axis=(0, 1)) / cfg.sigma ** 2
    _, cache = netcore.forward_batch(cfg.modulation, z[None, :],
                                     want_cache=True)
    grad_in = netcore.backward_input_batch(cfg.modulation, cache,
                                           upstream[None, :])
    return -z + grad_in[0]


def _langevin_z(cfg: PixelSceneConfig, x, z, label_map, inf_cfg, rng):
    """Langevin pass for the global style latent."""
    if cfg.d == 0 or cfg.modulation is None:
        return np.asarray(z, dtype=np.float64)
    delta = inf_cfg.step_size
    if delta is None:
        delta = 0.3 * cfg.sigma ** 2
    z = _check_z(cfg, z).copy()
    root = np.sqrt(2.0 * delta)
    for _ in range(inf_cfg.steps):
        grad = grad_z_pixel_log_joint(cfg, x, z, label_map)
        gn = float(np.linalg.norm(grad))
        if gn > infer.GRAD_CLIP:
            grad = grad * (infer.GRAD_CLIP / gn)
        z = z + delta * grad + root * rng.standard_normal(cfg.d)
    return z


def pixel_gibbs_sweep(cfg: PixelSceneConfig, x, z, label_map: LabelMap,
                      inf_cfg: InferenceConfig, rng=None,
                      update_z: bool = True) -> LabelMap:
    """Raster-order label update, then a Langevin pass for the global z.

    The z array is updated in place (when update_z and a style pathway
    exists); the refreshed label map is returned. With beta = 0 the label
    updates factorize, so they are computed in one vectorized pass that
    draws the same uniforms the raster loop would.
    """
    if rng is None:
        rng = make_rng(inf_cfg.rng_seed)
    label_map.check_range(cfg.k)
    x = _check_image(cfg, x, label_map)
    h, w = label_map.height, label_map.width
    if cfg.beta == 0:
        scores = _all_pixel_scores(cfg, x, z)
        scores -= scores.max(axis=2, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=2, keepdims=True)
        if inf_cfg.y_mode == "map":
            labels = np.argmax(p, axis=2)
        else:
            cum = np.cumsum(p, axis=2)
            u = rng.random((h, w))[:, :, None] * cum[:, :, -1:]
            labels = np.minimum((cum < u).sum(axis=2), cfg.k - 1)
    else:
        work = LabelMap(label_map.labels.copy())
        labels = work.labels   # alias: later pixels see earlier updates
        for r in range(h):
            for c in range(w):
                post = pixel_posterior(cfg, x, z, work, r, c)
                if inf_cfg.y_mode == "map":
                    labels[r, c] = int(np.argmax(post))
                else:
                    labels[r, c] = model.sample_categorical(post, rng)
    new_map = LabelMap(labels.astype(np.int64))
    if update_z and cfg.modulation is not None and cfg.d > 0:
        if not isinstance(z, np.ndarray):
            raise InputError("z must be an ndarray so it can update in place")
        z_new = _langevin_z(cfg, x, z, new_map, inf_cfg, rng)
        z[...] = z_new
    return new_map


def pixel_accuracy(gt: LabelMap, pred: LabelMap, k: int) -> float:
    """Clustering accuracy over all pixels under the best label mapping."""
    if gt.labels.shape != pred.labels.shape:
        raise InputError(
            f"label map shapes differ: {gt.labels.shape} vs "
            f"{pred.labels.shape}")
    ev = metrics.clustering_accuracy(gt.labels.ravel(), pred.labels.ravel(),
                                     L=k, K=k)
    return ev.acc


# ---------------------------------------------------------------------------
# Label-map image encoding: label i -> round(255 i / (K - 1))
# ---------------------------------------------------------------------------

def write_label_map(label_map: LabelMap, k, path):
    """PGM with labels stretched over the 0-255 gray range."""
    if k > 256:
        raise InputError(f"cannot encode {k} labels in 8-bit gray")
    label_map.check_range(k)
    if k == 1:
        gray = np.zeros_like(label_map.labels, dtype=np.float64)
    else:
        gray = label_map.labels * (255.0 / (k - 1))
    gray_u8 = np.floor(gray + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (label_map.width, label_map.height))
        fh.write(gray_u8.tobytes())


def read_label_map(path, k) -> LabelMap:
    """Inverse of write_label_map; exact for k <= 256."""
    gray = datamod.read_pgm(path)[:, :, 0].astype(np.float64)
    if k == 1:
        labels = np.zeros_like(gray, dtype=np.int64)
    else:
        labels = np.floor(gray * (k - 1) / 255.0 + 0.5).astype(np.int64)
    lm = LabelMap(labels)
    lm.check_range(k)
    return lm


# ---------------------------------------------------------------------------
# Scene synthesis and palette learning
# ---------------------------------------------------------------------------

def synth_pixel_scenes(k, height, width, n, separation, sigma, seed,
                       channels=1):
    """n scenes with i.i.d. per-pixel labels and a well-separated palette.

    Palette entries are drawn per channel and kept only when all pairwise
    distances reach separation * sigma (1,000 attempts, then a generation
    error). Returns (images n x H x W x C, ground-truth LabelMaps, truth
    PixelSceneConfig).
    """
    if separation <= 0:
        raise InputError(f"separation must be positive, got {separation}")
    rng = make_rng((int(seed), _TAG_SCENE_PALETTE))
    spread = 1.5 * separation * sigma * max(k - 1, 1)
    palette = None
    for _ in range(1000):
        cand = rng.uniform(-spread / 2.0, spread / 2.0, size=(k, channels))
        dists = np.linalg.norm(cand[:, None, :] - cand[None, :, :], axis=2)
        np.fill_diagonal(dists, np.inf)
        if dists.min() >= separation * sigma:
            palette = cand
            break
    if palette is None:
        raise GenerationError(
            f"could not place {k} palette entries pairwise >= "
            f"{separation * sigma:g} apart after 1,000 attempts")
    cfg = PixelSceneConfig(k=k, d=0, palette=palette, sigma=sigma)
    draw = make_rng((int(seed), _TAG_SCENE_DRAWS))
    images = np.empty((n, height, width, channels))
    maps = []
    for i in range(n):
        labels = draw.integers(0, k, size=(height, width))
        maps.append(LabelMap(labels))
        noise = draw.standard_normal((height, width, channels))
        images[i] = palette[labels] + sigma * noise
    return images, maps, cfg


def scenes_as_dataset(images) -> datamod.Dataset:
    """Flatten scenes to one example per pixel (channels as features)."""
    images = np.asarray(images, dtype=np.float64)
    n, h, w, c = images.shape
    return datamod.Dataset(examples=images.reshape(n * h * w, c))


def fit_palette(images, k, inf_cfg: InferenceConfig = None,
                train_cfg: learn.TrainConfig = None, sigma=0.3):
    """Learn palette emission means with the alternating training loop.

    Per-pixel labels are independent given the (absent) style latent, so
    each pixel is one training example of a d=0 model whose single affine
    layer holds one palette row per cluster; learn.fit does the rest.
    Returns (PixelSceneConfig, TrainState, metric rows).
    """
    if inf_cfg is None:
        inf_cfg = InferenceConfig()
    if train_cfg is None:
        train_cfg = learn.TrainConfig()
    dataset = scenes_as_dataset(images)
    channels = dataset.dim
    model_cfg = ModelConfig(K=k, d=0, D=channels, sigma=sigma)
    arch = (netcore.LayerSpec(netcore.AFFINE, k, channels),)
    state, rows = learn.fit(dataset, model_cfg, inf_cfg, train_cfg, arch=arch)
    ((_, w, b),) = list(state.net.weight_views())
    palette = w + b[None, :]
    cfg = PixelSceneConfig(k=k, d=0, palette=palette, sigma=sigma)
    return cfg, state, rows


def evaluate_scenes(cfg: PixelSceneConfig, images, gt_maps, sweeps,
                    inf_cfg: InferenceConfig = None, seed=0):
    """Fresh-start inference on each scene, scored over all pixels.

    Each image gets `sweeps` sampling sweeps from a blank map followed by
    one MAP sweep; z starts at the prior and updates along the way. All
    pixels of all scenes are pooled under one cluster-to-label mapping.
    Returns (ClusterEval or None when no ground truth, predicted maps).
    """
    if inf_cfg is None:
        inf_cfg = InferenceConfig()
    images = np.asarray(images, dtype=np.float64)
    rng = make_rng((int(seed), _TAG_EVAL))
    sample_cfg = InferenceConfig(step_size=inf_cfg.step_size,
                                 steps=inf_cfg.steps, y_mode="sample")
    map_cfg = InferenceConfig(step_size=inf_cfg.step_size,
                              steps=inf_cfg.steps, y_mode="map")
    preds = []
    for i in range(images.shape[0]):
        x = images[i]
        z = rng.standard_normal(cfg.d)
        lm = LabelMap(np.zeros(x.shape[:2], dtype=np.int64))
        for _ in range(sweeps):
            lm = pixel_gibbs_sweep(cfg, x, z, lm, sample_cfg, rng=rng)
        lm = pixel_gibbs_sweep(cfg, x, z, lm, map_cfg, rng=rng,
                               update_z=False)
        preds.append(lm)
    ev = None
    if gt_maps is not None:
        gt_all = np.concatenate([m.labels.ravel() for m in gt_maps])
        pred_all = np.concatenate([m.labels.ravel() for m in preds])
        ev = metrics.clustering_accuracy(gt_all, pred_all, L=cfg.k, K=cfg.k)
    return ev, preds
