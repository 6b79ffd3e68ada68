"""Dataset synthesis, IDX ingestion, and image-grid emission.

The synthetic benchmark plants a ground-truth generator (one affine layer:
a shared style map plus one mean per cluster, means placed on a sphere so
every cluster is reachable from the latent prior) and draws examples from
the generative model itself. Ground-truth labels ride along for evaluation
only; the training path never sees them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import model, netcore
from .errors import GenerationError, InputError, ParseError
from .infer import make_rng
from .model import ModelConfig

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

# Planted-generator geometry. Means sit on a sphere of this radius (scaled
# up when the separation requirement cannot fit inside it); the shared
# style map gets entries of scale STYLE_SCALE * sigma so within-cluster
# variation stays subdominant to the placement scale.
MEAN_RADIUS = 4.0
STYLE_SCALE = 0.3

_TAG_PLACEMENT = 11
_TAG_DRAWS = 12


@dataclass
class Dataset:
    """Examples plus optional ground-truth labels and image shape."""

    examples: np.ndarray          # n x D float64
    labels: np.ndarray = None     # n ints, evaluation only
    shape_hint: tuple = None      # (H, W, channels) for rendering

    def __post_init__(self):
        self.examples = np.asarray(self.examples, dtype=np.float64)
        if self.examples.ndim != 2:
            raise InputError(
                f"examples must be a 2-D matrix, got shape {self.examples.shape}")
        if not np.all(np.isfinite(self.examples)):
            raise InputError("examples contain non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.examples.shape[0],):
                raise InputError(
                    f"labels length {self.labels.shape} does not match "
                    f"{self.examples.shape[0]} examples")

    @property
    def n(self) -> int:
        return self.examples.shape[0]

    @property
    def dim(self) -> int:
        return self.examples.shape[1]


def plant_generator(K, d, D, separation, seed, sigma=0.3):
    """Ground-truth single-affine generator with well-separated means.

    Cluster means are drawn as random directions scaled to a common radius
    and kept only if all pairwise distances reach separation * sigma; after
    1,000 failed placements the requirement is declared infeasible. The
    shared linear style map is small relative to the placement scale.
    """
    if separation <= 0:
        raise InputError(f"separation must be positive, got {separation}")
    rng = make_rng((int(seed), _TAG_PLACEMENT))
    radius = max(MEAN_RADIUS, 0.62 * separation * sigma)
    means = None
    for _ in range(1000):
        dirs = rng.standard_normal((K, D))
        norms = np.linalg.norm(dirs, axis=1, keepdims=True)
        if np.any(norms == 0):
            continue
        cand = dirs / norms * radius
        dists = np.linalg.norm(cand[:, None, :] - cand[None, :, :], axis=2)
        np.fill_diagonal(dists, np.inf)
        if dists.min() >= separation * sigma:
            means = cand
            break
    if means is None:
        raise GenerationError(
            f"could not place {K} cluster means pairwise >= "
            f"{separation * sigma:g} apart after 1,000 attempts")
    style = rng.normal(0.0, STYLE_SCALE * sigma / np.sqrt(max(d, 1)),
                       size=(d, D))
    spec = netcore.LayerSpec(kind="affine", in_dim=d + K, out_dim=D)
    net = netcore.GeneratorNet((spec,))
    ((_, W, b),) = list(net.weight_views())
    W[:d] = style
    W[d:] = means
    b[:] = 0.0
    cfg = ModelConfig(K=K, d=d, D=D, sigma=sigma)
    return cfg, net


def synth_mixture(K, d, D, separation, n, seed, sigma=0.3) -> Dataset:
    """Draw n examples from a freshly planted ground-truth generator."""
    if n < 0:
        raise InputError(f"n must be >= 0, got {n}")
    cfg, net = plant_generator(K, d, D, separation, seed, sigma=sigma)
    rng = make_rng((int(seed), _TAG_DRAWS))
    X = np.empty((n, D))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        x, latent = model.synthesize(cfg, net, rng)
        X[i] = x
        labels[i] = latent.y
    return Dataset(examples=X, labels=labels)


# ---------------------------------------------------------------------------
# IDX binary format (big-endian magic, big-endian u32 dims, u8 payload)
# ---------------------------------------------------------------------------

def _read_exact(blob, offset, count, what):
    if offset + count > len(blob):
        raise ParseError(f"truncated {what}", offset=len(blob))
    return blob[offset:offset + count]


def _parse_idx(blob, expect_magic, ndims, path):
    (magic,) = struct.unpack(">I", _read_exact(blob, 0, 4, f"magic in {path}"))
    if magic != expect_magic:
        raise ParseError(
            f"bad IDX magic {magic} in {path} (expected {expect_magic})",
            offset=0)
    dims = []
    off = 4
    for _ in range(ndims):
        (dim,) = struct.unpack(">I", _read_exact(blob, off, 4,
                                                 f"dimension in {path}"))
        dims.append(dim)
        off += 4
    count = int(np.prod(dims, dtype=np.int64)) if dims else 0
    if len(blob) != off + count:
        raise ParseError(
            f"payload length {len(blob) - off} != expected {count} in {path}",
            offset=off)
    payload = np.frombuffer(blob, dtype=np.uint8, count=count, offset=off)
    return dims, payload


def load_idx(images_path, labels_path=None) -> Dataset:
    """Parse IDX image (and optional label) files into a Dataset.

    Pixels are scaled to [0, 1] float64 and flattened row-major, so
    D = H * W; the image shape is kept as a rendering hint.
    """
    with open(images_path, "rb") as fh:
        blob = fh.read()
    (n, h, w), pixels = _parse_idx(blob, IDX_IMAGES_MAGIC, 3, images_path)
    X = pixels.astype(np.float64).reshape(n, h * w) / 255.0
    labels = None
    if labels_path is not None:
        with open(labels_path, "rb") as fh:
            lblob = fh.read()
        (ln,), raw = _parse_idx(lblob, IDX_LABELS_MAGIC, 1, labels_path)
        if ln != n:
            raise InputError(
                f"label count {ln} does not match image count {n}")
        labels = raw.astype(np.int64)
    return Dataset(examples=X, labels=labels, shape_hint=(h, w, 1))


def write_idx_images(X_u8, path):
    """Inverse of the image half of load_idx; used for fixtures and tests."""
    X_u8 = np.asarray(X_u8, dtype=np.uint8)
    n, h, w = X_u8.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(X_u8.tobytes())


def write_idx_labels(labels, path):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


# ---------------------------------------------------------------------------
# PGM (P5) / PPM (P6) grids
# ---------------------------------------------------------------------------

SEPARATOR = 2  # pixels of white between tiles


def quantize_unit(values) -> np.ndarray:
    """Clamp to [0, 1] and quantize to u8 with round-half-up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.minimum(np.floor(v * 255.0 + 0.5), 255.0).astype(np.uint8)


def write_image_grid(samples, rows, cols, shape_hint, path):
    """Lay tiles out row-major with 2-px white separators; emit PGM or PPM."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise InputError(f"samples must be 2-D, got shape {samples.shape}")
    count, dim = samples.shape
    if rows < 1 or cols < 1:
        raise InputError(f"grid needs positive dimensions, got {rows}x{cols}")
    if rows * cols != count:
        raise InputError(f"{rows}x{cols} grid cannot hold {count} samples")
    h, w, channels = shape_hint
    if h * w * channels != dim:
        raise InputError(
            f"shape hint {shape_hint} does not match dimension {dim}")
    if channels not in (1, 3):
        raise InputError(f"channels must be 1 or 3, got {channels}")
    grid_h = rows * (h + SEPARATOR) - SEPARATOR
    grid_w = cols * (w + SEPARATOR) - SEPARATOR
    canvas = np.full((grid_h, grid_w, channels), 255, dtype=np.uint8)
    tiles = quantize_unit(samples).reshape(count, h, w, channels)
    for i in range(count):
        r, c = divmod(i, cols)
        top = r * (h + SEPARATOR)
        left = c * (w + SEPARATOR)
        canvas[top:top + h, left:left + w] = tiles[i]
    magic = b"P5" if channels == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (grid_w, grid_h))
        fh.write(canvas.tobytes())


def _read_netpbm(path, magic, channels):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != magic:
        raise ParseError(f"bad magic {blob[:2]!r} in {path}", offset=0)
    # header: magic, whitespace, width, height, maxval, single whitespace
    fields = []
    off = 2
    while len(fields) < 3:
        while off < len(blob) and blob[off:off + 1].isspace():
            off += 1
        start = off
        while off < len(blob) and not blob[off:off + 1].isspace():
            off += 1
        if start == off:
            raise ParseError(f"truncated header in {path}", offset=off)
        fields.append(int(blob[start:off]))
    off += 1  # the single whitespace byte ending the header
    width, height, maxval = fields
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval} in {path}", offset=off)
    count = width * height * channels
    if len(blob) - off != count:
        raise ParseError(
            f"payload length {len(blob) - off} != expected {count} in {path}",
            offset=off)
    raster = np.frombuffer(blob, dtype=np.uint8, count=count, offset=off)
    return raster.reshape(height, width, channels)


def read_pgm(path) -> np.ndarray:
    """Binary PGM (P5, maxval 255) as an H x W x 1 u8 array."""
    return _read_netpbm(path, b"P5", 1)


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6, maxval 255) as an H x W x 3 u8 array."""
    return _read_netpbm(path, b"P6", 3)
