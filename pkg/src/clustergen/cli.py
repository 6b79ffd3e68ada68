"""Command-line front end.

Commands: train, eval, generate, pixel-train, pixel-eval, langevin-sweep.
Config precedence: command-line flags override config-file entries, which
override built-in defaults. The config file is line-based `key = value`
text ('#' starts a comment). Every command writes the fully resolved
configuration to <outdir>/config.resolved before doing any work, so even
a crashed run leaves an auditable record.

Exit codes: 0 success, 1 usage or configuration problem, 2 numerical
failure during training or inference.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data as datamod
from . import infer, learn, metrics, netcore, pixelwise
from .errors import ClusterGenError, ConfigError, NumericalError
from .infer import InferenceConfig, make_rng
from .model import ModelConfig

_TAG_EVAL_INIT = 31
_TAG_GENERATE = 32

# defaults for every key the commands understand
DEFAULTS = {
    "outdir": "out",
    "seed": 0,
    "k": 3,
    "latent_dim": 2,
    "sigma": 0.3,
    "delta": "auto",          # auto -> 0.3 * sigma^2
    "langevin_steps": 100,
    "iters": 1000,
    "lr": 0.0002,
    "momentum": 0.5,
    "optimizer": "sgd",       # sgd or adam
    "batch": "auto",          # positive int, ALL, or auto
    "y_mode": "sample",
    "threads": 0,             # 0 -> machine parallelism
    "log_every": 10,
    "synthetic": None,
    "idx_images": None,
    "idx_labels": None,
    "checkpoint": None,
    "sweeps": 5,
    "rows": 5,
    "cols": None,             # None -> K
    "out": None,              # None -> <outdir>/grid.pgm or .ppm
    "with_noise": False,
    "height": None,
    "width": None,
    "steps_list": "1,5,15,30",
    "scenes": None,
    "palette": None,
    "beta": 0.0,
    "emit_maps": 4,
}

_INT_KEYS = {"seed", "k", "latent_dim", "langevin_steps", "iters",
             "threads", "log_every", "sweeps", "rows", "cols", "height",
             "width", "emit_maps"}
_FLOAT_KEYS = {"sigma", "lr", "momentum", "beta"}
_BOOL_KEYS = {"with_noise"}

_COMMON = ("outdir", "seed", "threads")
_MODEL = ("k", "latent_dim", "sigma", "delta", "langevin_steps", "y_mode")
_DATA = ("synthetic", "idx_images", "idx_labels")
_TRAIN = ("iters", "lr", "momentum", "optimizer", "batch", "log_every")

# keys each command resolves (and echoes into config.resolved)
COMMAND_KEYS = {
    "train": _COMMON + _MODEL + _DATA + _TRAIN,
    "eval": _COMMON + _MODEL + _DATA + ("checkpoint", "sweeps"),
    "generate": _COMMON + ("k", "latent_dim", "sigma", "checkpoint", "rows",
                           "cols", "out", "with_noise", "height", "width"),
    "langevin-sweep": _COMMON + _MODEL + _DATA + _TRAIN + ("steps_list",),
    "pixel-train": _COMMON + ("k", "sigma", "beta", "scenes", "iters", "lr",
                              "momentum", "optimizer", "batch", "log_every",
                              "langevin_steps", "y_mode"),
    "pixel-eval": _COMMON + ("k", "sigma", "beta", "scenes", "palette",
                             "sweeps", "langevin_steps", "emit_maps"),
}


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _coerce(key, raw):
    """Parse a config value from its string form."""
    if raw is None:
        return None
    if isinstance(raw, str) and raw.lower() in ("none", ""):
        return None
    if key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    if key in _BOOL_KEYS:
        if isinstance(raw, bool):
            return raw
        if str(raw).lower() in ("1", "true", "yes"):
            return True
        if str(raw).lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"{key} must be a boolean, got {raw!r}")
    if key == "delta":
        return raw if raw == "auto" else float(raw)
    if key == "batch":
        if isinstance(raw, int):
            return raw
        if raw.lower() == "all":
            return "ALL"
        if raw.lower() == "auto":
            return "auto"
        return int(raw)
    if key == "y_mode":
        if raw not in ("sample", "map"):
            raise ConfigError(f"y_mode must be sample or map, got {raw!r}")
        return raw
    if key == "optimizer":
        if raw not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {raw!r}")
        return raw
    return raw


def read_config_file(path) -> dict:
    """Line-based `key = value` pairs; unknown keys are rejected."""
    entries = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(
                    f"{path}:{lineno}: expected key = value, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            entries[key] = _coerce(key, value.strip())
    return entries


def resolve_config(args, keys) -> dict:
    """defaults <- config file <- explicit command-line flags."""
    resolved = {k: DEFAULTS[k] for k in keys}
    if args.config:
        file_entries = read_config_file(args.config)
        for k, v in file_entries.items():
            if k in resolved:
                resolved[k] = v
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            resolved[k] = _coerce(k, v)
    return resolved


def _fmt_value(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_resolved(cfg: dict, outdir):
    os.makedirs(outdir, exist_ok=True)
    path = os.path.join(outdir, "config.resolved")
    with open(path, "w") as fh:
        for key in sorted(cfg):
            fh.write(f"{key} = {_fmt_value(cfg[key])}\n")
    return path


def parse_kv_spec(spec, what, int_keys=(), float_keys=()):
    """Parse `a=1,b=2` dataset specs."""
    out = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"bad {what} entry {part!r} (expected key=value)")
        key, _, value = part.partition("=")
        key = key.strip()
        if key in int_keys:
            out[key] = int(value)
        elif key in float_keys:
            out[key] = float(value)
        else:
            raise ConfigError(f"unknown {what} key {key!r}")
    return out


def load_dataset(cfg) -> datamod.Dataset:
    if cfg.get("synthetic"):
        spec = parse_kv_spec(cfg["synthetic"], "--synthetic",
                             int_keys=("k", "d", "D", "n"),
                             float_keys=("sep", "sigma"))
        for need in ("k", "d", "D", "sep", "n"):
            if need not in spec:
                raise ConfigError(f"--synthetic spec is missing {need!r}")
        kwargs = {}
        if "sigma" in spec:
            kwargs["sigma"] = spec["sigma"]
        return datamod.synth_mixture(spec["k"], spec["d"], spec["D"],
                                     spec["sep"], spec["n"],
                                     seed=cfg["seed"], **kwargs)
    if cfg.get("idx_images"):
        return datamod.load_idx(cfg["idx_images"], cfg.get("idx_labels"))
    raise ConfigError("no dataset: pass --synthetic SPEC or --idx-images PATH")


def _model_config(cfg, dim) -> ModelConfig:
    return ModelConfig(K=cfg["k"], d=cfg["latent_dim"], D=dim,
                       sigma=cfg["sigma"])


def _inference_config(cfg, y_mode=None) -> InferenceConfig:
    delta = cfg.get("delta", "auto")
    return InferenceConfig(
        step_size=None if delta == "auto" else float(delta),
        steps=cfg["langevin_steps"],
        y_mode=y_mode if y_mode is not None else cfg.get("y_mode", "sample"),
        rng_seed=cfg["seed"])


def _train_config(cfg) -> learn.TrainConfig:
    return learn.TrainConfig(iterations=cfg["iters"], learning_rate=cfg["lr"],
                             momentum=cfg["momentum"],
                             optimizer=cfg.get("optimizer", "sgd"),
                             batch_size=cfg["batch"], seed=cfg["seed"],
                             log_every=cfg["log_every"])


def _apply_threads(cfg):
    n = cfg.get("threads", 0)
    infer.set_threads(n if n and n > 0 else os.cpu_count() or 1)


def _progress(row):
    acc = "" if row.acc is None else f" acc={row.acc:.4f}"
    print(f"iter={row.iteration} recon_mse={row.recon_mse:.6f}"
          f" mean_log_joint={row.mean_log_joint:.3f}{acc}"
          f" clip_count={row.clip_count}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(cfg) -> int:
    write_resolved(cfg, cfg["outdir"])
    _apply_threads(cfg)
    dataset = load_dataset(cfg)
    model_cfg = _model_config(cfg, dataset.dim)
    inf_cfg = _inference_config(cfg)
    train_cfg = _train_config(cfg)
    state, rows = learn.fit(dataset, model_cfg, inf_cfg, train_cfg,
                            progress=_progress)
    netcore.save_checkpoint(state.net,
                            os.path.join(cfg["outdir"], "checkpoint.ckpt"))
    learn.save_latents(state, os.path.join(cfg["outdir"], "latents.bin"))
    learn.write_metrics_csv(rows, os.path.join(cfg["outdir"], "metrics.csv"))
    if rows:
        final = rows[-1]
        acc = "n/a" if final.acc is None else f"{final.acc:.4f}"
        print(f"final: recon_mse={final.recon_mse:.6f} acc={acc}")
    return 0


def _fresh_latents(model_cfg, n, seed):
    rng = make_rng((int(seed), _TAG_EVAL_INIT))
    Z = rng.standard_normal((n, model_cfg.d))
    cum = np.cumsum(model_cfg.prior)
    u = rng.random(n)
    Y = np.minimum(np.searchsorted(cum, u, side="left"),
                   model_cfg.K - 1).astype(np.int64)
    return Z, Y, rng


def evaluate_dataset(model_cfg, net, dataset, inf_cfg, sweeps, seed):
    """Fresh z ~ N(0, I), several sampling Gibbs sweeps, MAP assignment."""
    Z, Y, rng = _fresh_latents(model_cfg, dataset.n, seed)
    X = dataset.examples
    for _ in range(sweeps):
        Z, Y = infer.gibbs_sweep_batch(model_cfg, net, X, Z, Y, inf_cfg, rng)
    assignments = infer.infer_y_batch(model_cfg, net, X, Z, "map")
    return Z, assignments


def cmd_eval(cfg) -> int:
    write_resolved(cfg, cfg["outdir"])
    _apply_threads(cfg)
    if not cfg.get("checkpoint"):
        raise ConfigError("eval needs --checkpoint PATH")
    net = netcore.load_checkpoint(cfg["checkpoint"])
    dataset = load_dataset(cfg)
    model_cfg = _model_config(cfg, dataset.dim)
    if net.input_dim != model_cfg.input_dim:
        raise ConfigError(
            f"checkpoint consumes {net.input_dim} inputs but k + latent_dim "
            f"= {model_cfg.input_dim}")
    if net.output_dim != dataset.dim:
        raise ConfigError(
            f"checkpoint emits {net.output_dim} values but the data has "
            f"dimension {dataset.dim}")
    inf_cfg = _inference_config(cfg, y_mode="sample")
    _, assignments = evaluate_dataset(model_cfg, net, dataset, inf_cfg,
                                      cfg["sweeps"], cfg["seed"])
    with open(os.path.join(cfg["outdir"], "assignments.csv"), "w") as fh:
        fh.write("index,y\n")
        for i, y in enumerate(assignments):
            fh.write(f"{i},{int(y)}\n")
    if dataset.labels is not None:
        ev = metrics.clustering_accuracy(dataset.labels, assignments,
                                         K=model_cfg.K)
        metrics.write_eval_csv(
            ev, os.path.join(cfg["outdir"], "report.csv"),
            contingency_path=os.path.join(cfg["outdir"], "contingency.csv"))
        print(f"acc={ev.acc:.4f} over {ev.n} examples")
    else:
        print(f"assigned {len(assignments)} examples (no labels, no report)")
    return 0


def _square_hint(dim):
    h = int(np.sqrt(dim))
    while h > 1 and dim % h:
        h -= 1
    return h, dim // h


def cmd_generate(cfg) -> int:
    write_resolved(cfg, cfg["outdir"])
    if not cfg.get("checkpoint"):
        raise ConfigError("generate needs --checkpoint PATH")
    net = netcore.load_checkpoint(cfg["checkpoint"])
    k = cfg["k"]
    cols = cfg["cols"] if cfg["cols"] is not None else k
    if cols != k:
        raise ConfigError(f"cols must equal k ({k}), got {cols}")
    d = cfg["latent_dim"]
    if net.input_dim != d + k:
        raise ConfigError(
            f"checkpoint consumes {net.input_dim} inputs but k + latent_dim "
            f"= {d + k}")
    rows = cfg["rows"]
    rng = make_rng((int(cfg["seed"]), _TAG_GENERATE))
    Z = rng.standard_normal((rows, d))
    D = net.output_dim
    eye = np.eye(k)
    samples = np.empty((rows * cols, D))
    for r in range(rows):
        for c in range(cols):
            u = np.concatenate([Z[r], eye[c]])
            samples[r * cols + c] = netcore.forward_batch(net, u[None, :])[0]
    if cfg["with_noise"]:
        samples = samples + cfg["sigma"] * rng.standard_normal(samples.shape)
    if cfg["height"] is not None and cfg["width"] is not None:
        h, w = cfg["height"], cfg["width"]
        channels = D // (h * w) if h * w else 0
        if h * w * max(channels, 1) != D or channels not in (1, 3):
            raise ConfigError(
                f"height x width {h}x{w} does not tile dimension {D}")
    else:
        (h, w), channels = _square_hint(D), 1
    out = cfg["out"]
    if out is None:
        ext = "pgm" if channels == 1 else "ppm"
        out = os.path.join(cfg["outdir"], f"grid.{ext}")
    datamod.write_image_grid(samples, rows, cols, (h, w, channels), out)
    zpath = os.path.join(cfg["outdir"], "zs.csv")
    with open(zpath, "w") as fh:
        fh.write(",".join(f"z{i}" for i in range(d)) + "\n")
        for r in range(rows):
            fh.write(",".join(repr(float(v)) for v in Z[r]) + "\n")
    print(f"wrote {out} and {zpath}")
    return 0


def cmd_langevin_sweep(cfg) -> int:
    write_resolved(cfg, cfg["outdir"])
    _apply_threads(cfg)
    steps_list = [int(s) for s in str(cfg["steps_list"]).split(",") if s.strip()]
    if not steps_list:
        raise ConfigError("steps_list must name at least one step count")
    dataset = load_dataset(cfg)
    if dataset.labels is None:
        raise ConfigError("langevin-sweep needs labeled data to report acc")
    model_cfg = _model_config(cfg, dataset.dim)
    train_cfg = _train_config(cfg)
    results = []
    for steps in steps_list:
        sub = dict(cfg)
        sub["langevin_steps"] = steps
        inf_cfg = _inference_config(sub)
        _, rows = learn.fit(dataset, model_cfg, inf_cfg, train_cfg)
        acc = rows[-1].acc if rows else float("nan")
        results.append((steps, acc))
        print(f"l={steps} acc={acc:.4f}")
    path = os.path.join(cfg["outdir"], "sweep.csv")
    with open(path, "w") as fh:
        fh.write("l,acc\n")
        for steps, acc in results:
            fh.write(f"{steps},{repr(float(acc))}\n")
    return 0


def _parse_scene_spec(cfg):
    if not cfg.get("scenes"):
        raise ConfigError(
            "no scenes: pass --scenes k=3,h=16,w=16,n=50,sep=10")
    spec = parse_kv_spec(cfg["scenes"], "--scenes",
                         int_keys=("k", "h", "w", "n", "channels"),
                         float_keys=("sep",))
    for need in ("k", "h", "w", "n", "sep"):
        if need not in spec:
            raise ConfigError(f"--scenes spec is missing {need!r}")
    spec.setdefault("channels", 1)
    return spec


def cmd_pixel_train(cfg) -> int:
    write_resolved(cfg, cfg["outdir"])
    _apply_threads(cfg)
    spec = _parse_scene_spec(cfg)
    images, _, _ = pixelwise.synth_pixel_scenes(
        spec["k"], spec["h"], spec["w"], spec["n"], spec["sep"],
        cfg["sigma"], cfg["seed"], channels=spec["channels"])
    inf_cfg = _inference_config(cfg)
    train_cfg = _train_config(cfg)
    scene_cfg, _, rows = pixelwise.fit_palette(
        images, spec["k"], inf_cfg=inf_cfg, train_cfg=train_cfg,
        sigma=cfg["sigma"])
    pal_path = os.path.join(cfg["outdir"], "palette.csv")
    with open(pal_path, "w") as fh:
        fh.write(",".join(f"c{i}" for i in range(scene_cfg.channels)) + "\n")
        for row in scene_cfg.palette:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    learn.write_metrics_csv(rows, os.path.join(cfg["outdir"], "metrics.csv"))
    print(f"wrote {pal_path}")
    return 0


def read_palette_csv(path) -> np.ndarray:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    rows = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
    return np.asarray(rows, dtype=np.float64)


def cmd_pixel_eval(cfg) -> int:
    write_resolved(cfg, cfg["outdir"])
    _apply_threads(cfg)
    if not cfg.get("palette"):
        raise ConfigError("pixel-eval needs --palette PATH")
    spec = _parse_scene_spec(cfg)
    palette = read_palette_csv(cfg["palette"])
    if palette.shape != (spec["k"], spec["channels"]):
        raise ConfigError(
            f"palette shape {palette.shape} does not match scenes "
            f"(k={spec['k']}, channels={spec['channels']})")
    images, gt_maps, _ = pixelwise.synth_pixel_scenes(
        spec["k"], spec["h"], spec["w"], spec["n"], spec["sep"],
        cfg["sigma"], cfg["seed"], channels=spec["channels"])
    scene_cfg = pixelwise.PixelSceneConfig(
        k=spec["k"], d=0, palette=palette, sigma=cfg["sigma"],
        beta=cfg["beta"])
    inf_cfg = _inference_config(cfg, y_mode="sample")
    ev, preds = pixelwise.evaluate_scenes(scene_cfg, images, gt_maps,
                                          cfg["sweeps"], inf_cfg=inf_cfg,
                                          seed=cfg["seed"])
    metrics.write_eval_csv(
        ev, os.path.join(cfg["outdir"], "report.csv"),
        contingency_path=os.path.join(cfg["outdir"], "contingency.csv"))
    for i in range(min(cfg["emit_maps"], len(preds))):
        pixelwise.write_label_map(
            preds[i], spec["k"],
            os.path.join(cfg["outdir"], f"map_{i:03d}.pgm"))
    print(f"per-pixel acc={ev.acc:.4f} over {ev.n} pixels")
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "langevin-sweep": cmd_langevin_sweep,
    "pixel-train": cmd_pixel_train,
    "pixel-eval": cmd_pixel_eval,
}

_FLAG_HELP = {
    "outdir": "output directory (created if missing)",
    "seed": "run seed; drives init, shuffles and inference noise",
    "k": "number of clusters",
    "latent_dim": "continuous latent dimension d",
    "sigma": "observation noise scale",
    "delta": "Langevin step size, or auto for 0.3 sigma^2",
    "langevin_steps": "Langevin steps per Gibbs sweep (l)",
    "iters": "training iterations (T)",
    "lr": "learning rate",
    "momentum": "momentum coefficient in [0, 1)",
    "optimizer": "parameter update rule: sgd (default) or adam",
    "batch": "minibatch size, ALL, or auto",
    "y_mode": "cluster update rule during sweeps",
    "threads": "parallelism cap (0 = machine parallelism)",
    "log_every": "metrics logging period",
    "synthetic": "synthetic dataset spec, e.g. k=3,d=2,D=16,sep=10,n=3000",
    "idx_images": "IDX image file",
    "idx_labels": "IDX label file (evaluation only)",
    "checkpoint": "generator checkpoint path",
    "sweeps": "Gibbs sweeps at evaluation time",
    "rows": "grid rows (one z per row)",
    "cols": "grid columns (must equal k)",
    "out": "grid image path",
    "with_noise": "add observation noise to generated samples",
    "height": "tile height for rendering",
    "width": "tile width for rendering",
    "steps_list": "comma-separated Langevin step counts",
    "scenes": "scene spec, e.g. k=3,h=16,w=16,n=50,sep=10",
    "palette": "palette CSV from pixel-train",
    "beta": "neighbor-consistency weight",
    "emit_maps": "how many predicted label maps to write",
}


def _add_flags(sub, keys):
    sub.add_argument("--config", default=None, metavar="PATH",
                     help="key = value config file")
    for key in keys:
        flag = "--" + key.replace("_", "-")
        if key in _BOOL_KEYS:
            sub.add_argument(flag, action="store_const", const=True,
                             default=None, help=_FLAG_HELP.get(key))
        else:
            sub.add_argument(flag, default=None, metavar="V",
                             help=_FLAG_HELP.get(key))


def build_parser() -> _Parser:
    parser = _Parser(prog="clustergen",
                     description="Clustered generator model: training, "
                                 "inference, generation and per-pixel "
                                 "clustering.")
    subs = parser.add_subparsers(dest="command")
    for name in _COMMANDS:
        sub = subs.add_parser(name, help=f"{name} command")
        _add_flags(sub, COMMAND_KEYS[name])
    return parser


def run(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        sys.stderr.write("error: no command given\n")
        return 1
    try:
        cfg = resolve_config(args, COMMAND_KEYS[args.command])
        return _COMMANDS[args.command](cfg)
    except NumericalError as exc:
        sys.stderr.write(f"numerical failure: {exc}\n")
        return 2
    except ClusterGenError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except FileNotFoundError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except ValueError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


def main():
    raise SystemExit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
