"""Command-line driver: config resolution, commands, exit codes, artifacts."""

import csv
import subprocess
import sys

import numpy as np
import pytest

from clustergen import cli, data, learn, netcore
from clustergen.infer import make_rng
from clustergen.model import ModelConfig

TINY = "k=2,d=1,D=4,sep=8,n=40"


def run_cli(*argv):
    return cli.run([str(a) for a in argv])


def read_resolved(outdir):
    out = {}
    for line in (outdir / "config.resolved").read_text().splitlines():
        key, _, value = line.partition(" = ")
        out[key] = value
    return out


def last_metrics_row(outdir):
    with open(outdir / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    return rows[-1]


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

def test_flags_override_file_over_defaults(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("lr = 0.001\nmomentum = 0.25   # trailing comment\n")
    out = tmp_path / "o"
    rc = run_cli("train", "--config", conf, "--outdir", out,
                 "--lr", "0.002", "--synthetic", TINY, "--iters", "0")
    assert rc == 0
    resolved = read_resolved(out)
    assert resolved["lr"] == "0.002"          # flag beats file
    assert resolved["momentum"] == "0.25"     # file beats default
    assert resolved["iters"] == "0"
    assert resolved["langevin_steps"] == "100"  # untouched default


def test_resolved_echoes_every_key(tmp_path):
    out = tmp_path / "o"
    run_cli("train", "--outdir", out, "--synthetic", TINY, "--iters", "0")
    resolved = read_resolved(out)
    assert set(resolved) == set(cli.COMMAND_KEYS["train"])


def test_resolved_written_before_failure(tmp_path):
    out = tmp_path / "o"
    rc = run_cli("eval", "--outdir", out, "--synthetic", TINY)
    assert rc == 1   # no checkpoint given
    assert (out / "config.resolved").exists()


def test_config_file_unknown_key_rejected(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("no_such_option = 3\n")
    rc = run_cli("train", "--config", conf, "--outdir", tmp_path / "o",
                 "--synthetic", TINY, "--iters", "0")
    assert rc == 1


def test_config_file_bad_line_rejected(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("just some words\n")
    rc = run_cli("train", "--config", conf, "--outdir", tmp_path / "o",
                 "--synthetic", TINY, "--iters", "0")
    assert rc == 1


def test_no_command_is_usage_error(capsys):
    assert run_cli() == 1


def test_missing_dataset_is_config_error(tmp_path):
    rc = run_cli("train", "--outdir", tmp_path / "o", "--iters", "0")
    assert rc == 1


def test_bad_y_mode_rejected(tmp_path):
    rc = run_cli("train", "--outdir", tmp_path / "o", "--synthetic", TINY,
                 "--iters", "0", "--y-mode", "always")
    assert rc == 1


def test_batch_spellings(tmp_path):
    out = tmp_path / "o"
    rc = run_cli("train", "--outdir", out, "--synthetic", TINY,
                 "--iters", "0", "--batch", "all")
    assert rc == 0
    assert read_resolved(out)["batch"] == "ALL"
    rc = run_cli("train", "--outdir", out, "--synthetic", TINY,
                 "--iters", "0", "--batch", "16")
    assert rc == 0
    assert read_resolved(out)["batch"] == "16"


def test_numerical_failure_exits_two(tmp_path):
    rc = run_cli("train", "--outdir", tmp_path / "o", "--synthetic", TINY,
                 "--iters", "3", "--lr", "1e308", "--log-every", "1")
    assert rc == 2


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_zero_iters_checkpoint_equals_init(tmp_path):
    out = tmp_path / "o"
    rc = run_cli("train", "--outdir", out, "--synthetic", TINY, "--k", "2",
                 "--latent-dim", "1", "--iters", "0", "--seed", "3")
    assert rc == 0
    dataset = data.synth_mixture(2, 1, 4, 8, 40, seed=3)
    cfg = ModelConfig(K=2, d=1, D=4, sigma=0.3)
    state = learn.init(dataset, cfg, cfg.arch(), seed=3)
    expect = tmp_path / "expect.ckpt"
    netcore.save_checkpoint(state.net, expect)
    assert (out / "checkpoint.ckpt").read_bytes() == expect.read_bytes()
    assert (out / "metrics.csv").read_text() == \
        "iter,recon_mse,mean_log_joint,acc,clip_count\n"


def test_train_repeat_invocation_byte_identical(tmp_path):
    out = tmp_path / "o"
    arts = ("checkpoint.ckpt", "latents.bin", "metrics.csv",
            "config.resolved")
    snaps = []
    for _ in range(2):
        rc = run_cli("train", "--outdir", out, "--synthetic", TINY,
                     "--iters", "5", "--seed", "1", "--log-every", "2")
        assert rc == 0
        snaps.append({a: (out / a).read_bytes() for a in arts})
    assert snaps[0] == snaps[1]


def test_train_thread_count_does_not_change_outputs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    spec = "k=2,d=1,D=4,sep=8,n=700"   # spans several worker chunks
    rc = run_cli("train", "--outdir", a, "--synthetic", spec, "--iters", "3",
                 "--seed", "2", "--threads", "1")
    assert rc == 0
    rc = run_cli("train", "--outdir", b, "--synthetic", spec, "--iters", "3",
                 "--seed", "2", "--threads", "4")
    assert rc == 0
    assert (a / "checkpoint.ckpt").read_bytes() == (b / "checkpoint.ckpt").read_bytes()
    assert (a / "latents.bin").read_bytes() == (b / "latents.bin").read_bytes()
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_train_writes_progress_and_final_line(tmp_path, capsys):
    rc = run_cli("train", "--outdir", tmp_path / "o", "--synthetic", TINY,
                 "--iters", "4", "--log-every", "2", "--seed", "0")
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert any(ln.startswith("iter=2 ") for ln in lines)
    assert lines[-1].startswith("final: recon_mse=")


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def test_eval_reproduces_training_accuracy(tmp_path):
    out = tmp_path / "o"
    spec = "k=2,d=1,D=6,sep=10,n=80"
    rc = run_cli("train", "--outdir", out, "--synthetic", spec,
                 "--iters", "200", "--lr", "0.002", "--langevin-steps", "20",
                 "--seed", "0")
    assert rc == 0
    train_acc = float(last_metrics_row(out)["acc"])
    assert train_acc >= 0.9   # converged run, otherwise the test is vacuous
    ev_out = tmp_path / "e"
    rc = run_cli("eval", "--outdir", ev_out, "--synthetic", spec,
                 "--checkpoint", out / "checkpoint.ckpt", "--k", "2",
                 "--latent-dim", "1", "--langevin-steps", "20", "--seed", "0")
    assert rc == 0
    with open(ev_out / "report.csv") as fh:
        report = list(csv.DictReader(fh))[0]
    assert abs(float(report["acc"]) - train_acc) <= 0.02
    with open(ev_out / "assignments.csv") as fh:
        assignments = list(csv.DictReader(fh))
    assert len(assignments) == 80


def test_eval_without_labels_emits_assignments_only(tmp_path):
    images = make_rng(5).random((6, 2, 2))
    idx = tmp_path / "im.idx"
    data.write_idx_images(images, idx)
    net = netcore.init_net(netcore.default_arch(3, 4), make_rng(1))
    ckpt = tmp_path / "net.ckpt"
    netcore.save_checkpoint(net, ckpt)
    out = tmp_path / "o"
    rc = run_cli("eval", "--outdir", out, "--idx-images", idx,
                 "--checkpoint", ckpt, "--k", "2", "--latent-dim", "1",
                 "--langevin-steps", "3", "--sweeps", "1")
    assert rc == 0
    assert (out / "assignments.csv").exists()
    assert not (out / "report.csv").exists()


def test_eval_single_cluster_assigns_everything_to_zero(tmp_path):
    images = make_rng(6).random((6, 2, 2))
    labels = np.array([0, 0, 0, 1, 1, 2])
    idx, lab = tmp_path / "im.idx", tmp_path / "lab.idx"
    data.write_idx_images(images, idx)
    data.write_idx_labels(labels, lab)
    net = netcore.init_net(netcore.default_arch(2, 4), make_rng(2))
    ckpt = tmp_path / "net.ckpt"
    netcore.save_checkpoint(net, ckpt)
    out = tmp_path / "o"
    rc = run_cli("eval", "--outdir", out, "--idx-images", idx,
                 "--idx-labels", lab, "--checkpoint", ckpt, "--k", "1",
                 "--latent-dim", "1", "--langevin-steps", "3", "--sweeps", "1")
    assert rc == 0
    with open(out / "assignments.csv") as fh:
        ys = [int(r["y"]) for r in csv.DictReader(fh)]
    assert ys == [0] * 6
    with open(out / "report.csv") as fh:
        report = list(csv.DictReader(fh))[0]
    assert float(report["acc"]) == 0.5   # majority class frequency 3/6


def test_eval_dimension_mismatch_rejected(tmp_path):
    net = netcore.init_net(netcore.default_arch(3, 7), make_rng(3))
    ckpt = tmp_path / "net.ckpt"
    netcore.save_checkpoint(net, ckpt)
    rc = run_cli("eval", "--outdir", tmp_path / "o", "--synthetic", TINY,
                 "--checkpoint", ckpt, "--k", "2", "--latent-dim", "1")
    assert rc == 1


def test_eval_missing_checkpoint_file(tmp_path):
    rc = run_cli("eval", "--outdir", tmp_path / "o", "--synthetic", TINY,
                 "--checkpoint", tmp_path / "nope.ckpt")
    assert rc == 1


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def make_checkpoint(tmp_path, k=3, d=2, D=16, seed=0):
    net = netcore.init_net(netcore.default_arch(d + k, D), make_rng(seed))
    path = tmp_path / "gen.ckpt"
    netcore.save_checkpoint(net, path)
    return path, net


def test_generate_grid_layout_and_content(tmp_path):
    ckpt, net = make_checkpoint(tmp_path)
    out = tmp_path / "o"
    rc = run_cli("generate", "--outdir", out, "--checkpoint", ckpt,
                 "--rows", "2", "--seed", "11")
    assert rc == 0
    grid_path = out / "grid.pgm"
    raw = grid_path.read_bytes()
    # D=16 tiles render 4x4; 2 rows x 3 cols with 2-px separators
    assert raw.startswith(b"P5\n16 10\n255\n")
    img = data.read_pgm(grid_path)[:, :, 0]
    with open(out / "zs.csv") as fh:
        zs = [[float(v) for v in ln.split(",")]
              for ln in fh.read().splitlines()[1:]]
    eye = np.eye(3)
    for r in range(2):
        for c in range(3):
            u = np.concatenate([zs[r], eye[c]])
            tile = netcore.forward_batch(net, u[None, :])[0].reshape(4, 4)
            got = img[r * 6:r * 6 + 4, c * 6:c * 6 + 4]
            assert np.array_equal(got, data.quantize_unit(tile))


def test_generate_seed_reproducible(tmp_path):
    ckpt, _ = make_checkpoint(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run_cli("generate", "--outdir", out, "--checkpoint", ckpt,
                       "--rows", "3", "--seed", "4") == 0
    assert (a / "grid.pgm").read_bytes() == (b / "grid.pgm").read_bytes()
    assert (a / "zs.csv").read_bytes() == (b / "zs.csv").read_bytes()


def test_generate_cols_must_match_k(tmp_path):
    ckpt, _ = make_checkpoint(tmp_path)
    rc = run_cli("generate", "--outdir", tmp_path / "o", "--checkpoint", ckpt,
                 "--cols", "4")
    assert rc == 1


def test_generate_noise_flag_changes_pixels(tmp_path):
    ckpt, _ = make_checkpoint(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    run_cli("generate", "--outdir", a, "--checkpoint", ckpt, "--seed", "5")
    run_cli("generate", "--outdir", b, "--checkpoint", ckpt, "--seed", "5",
            "--with-noise")
    assert (a / "grid.pgm").read_bytes() != (b / "grid.pgm").read_bytes()


def test_generate_bad_tile_geometry_rejected(tmp_path):
    ckpt, _ = make_checkpoint(tmp_path, D=16)
    rc = run_cli("generate", "--outdir", tmp_path / "o", "--checkpoint", ckpt,
                 "--height", "3", "--width", "4")
    assert rc == 1


# ---------------------------------------------------------------------------
# langevin-sweep
# ---------------------------------------------------------------------------

def test_langevin_sweep_singleton_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        rc = run_cli("langevin-sweep", "--outdir", out, "--synthetic", TINY,
                     "--iters", "3", "--steps-list", "2", "--seed", "1")
        assert rc == 0
    text = (a / "sweep.csv").read_text()
    lines = text.strip().splitlines()
    assert lines[0] == "l,acc"
    assert len(lines) == 2 and lines[1].startswith("2,")
    assert text == (b / "sweep.csv").read_text()


def test_langevin_sweep_needs_labels(tmp_path):
    images = make_rng(7).random((5, 2, 2))
    idx = tmp_path / "im.idx"
    data.write_idx_images(images, idx)
    rc = run_cli("langevin-sweep", "--outdir", tmp_path / "o",
                 "--idx-images", idx, "--iters", "1")
    assert rc == 1


# ---------------------------------------------------------------------------
# pixel commands
# ---------------------------------------------------------------------------

SCENES = "k=2,h=6,w=6,n=4,sep=12"


def test_pixel_train_then_eval(tmp_path):
    out = tmp_path / "t"
    rc = run_cli("pixel-train", "--outdir", out, "--scenes", SCENES,
                 "--iters", "120", "--lr", "0.01", "--langevin-steps", "0",
                 "--seed", "0")
    assert rc == 0
    palette = cli.read_palette_csv(out / "palette.csv")
    assert palette.shape == (2, 1)
    ev_out = tmp_path / "e"
    rc = run_cli("pixel-eval", "--outdir", ev_out, "--scenes", SCENES,
                 "--palette", out / "palette.csv", "--sweeps", "5",
                 "--emit-maps", "2", "--seed", "0")
    assert rc == 0
    with open(ev_out / "report.csv") as fh:
        report = list(csv.DictReader(fh))[0]
    assert float(report["acc"]) >= 0.9
    assert int(report["n"]) == 4 * 6 * 6
    assert (ev_out / "map_000.pgm").exists()
    assert (ev_out / "map_001.pgm").exists()
    assert not (ev_out / "map_002.pgm").exists()


def test_pixel_eval_repeat_is_byte_identical(tmp_path):
    out = tmp_path / "t"
    run_cli("pixel-train", "--outdir", out, "--scenes", SCENES,
            "--iters", "60", "--lr", "0.01", "--langevin-steps", "0",
            "--seed", "0")
    a, b = tmp_path / "a", tmp_path / "b"
    for ev_out in (a, b):
        rc = run_cli("pixel-eval", "--outdir", ev_out, "--scenes", SCENES,
                     "--palette", out / "palette.csv", "--sweeps", "3",
                     "--seed", "2")
        assert rc == 0
    assert (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()
    assert (a / "map_000.pgm").read_bytes() == (b / "map_000.pgm").read_bytes()


def test_pixel_eval_palette_shape_mismatch(tmp_path):
    pal = tmp_path / "p.csv"
    pal.write_text("c0\n0.0\n1.0\n2.0\n")
    rc = run_cli("pixel-eval", "--outdir", tmp_path / "o", "--scenes", SCENES,
                 "--palette", pal)
    assert rc == 1


def test_pixel_train_needs_scene_spec(tmp_path):
    rc = run_cli("pixel-train", "--outdir", tmp_path / "o", "--iters", "1")
    assert rc == 1


# ---------------------------------------------------------------------------
# installed entry point
# ---------------------------------------------------------------------------

def test_console_entry_exit_codes(tmp_path):
    script = "from clustergen.cli import main; main()"
    ok = subprocess.run(
        [sys.executable, "-c", script, "train",
         "--outdir", str(tmp_path / "o"), "--synthetic", TINY,
         "--iters", "2"],
        capture_output=True, text=True)
    assert ok.returncode == 0
    bad = subprocess.run(
        [sys.executable, "-c", script, "train",
         "--outdir", str(tmp_path / "o2"), "--iters", "1"],
        capture_output=True, text=True)
    assert bad.returncode == 1
    assert "error" in bad.stderr
