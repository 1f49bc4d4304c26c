import csv
import os
import subprocess
import sys

import numpy as np
import pytest
import torch
from PIL import Image

from tomoforge import cli, tnsr
from tomoforge import training as T
from tomoforge.radon import ScanGeometry, fbp_reconstruct

SMALL = [
    "geometry.image_size=32", "geometry.n_angles=32", "geometry.n_detectors=32",
    "train.batch_size=2", "train.bridge_channels=4", "train.posterior_channels=8", "train.checkpoint_every=2",
    "gan.z_shape=4,2,2", "gan.critic_depth=3", "gan.critic_channels=4", "gan.n_critic=1",
]


def run(*argv, small=True):
    extra = []
    if small:
        for item in SMALL:
            extra += ["--set", item]
    return cli.main([*map(str, argv), *extra, "--threads", "1"])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("simulate", "--out", d / "r.tnsr", "--count", 3, "--ladder", "--seed", 5) == 0
    assert run("train", "--kind", "posterior", "--run-dir", d / "post", "--steps", 3) == 0
    assert run("train", "--kind", "recon", "--run-dir", d / "recon", "--steps", 4) == 0
    assert run("train", "--kind", "gan", "--run-dir", d / "gan", "--steps", 2,
               "--posterior", d / "post" / "step-9.tnsr", "--init", d / "recon" / "step-4.tnsr") == 0
    return d


def _bytes(p):
    with open(p, "rb") as fh:
        return fh.read()


def _csv(p):
    with open(p, newline="") as fh:
        return list(csv.reader(fh))


def test_simulate_seeded_and_in_range(work, tmp_path):
    data = tnsr.load(work / "r.tnsr")
    assert set(data) >= {"phantom", "sinogram", "readings", "signal", "geometry", "noise"}
    assert data["readings"].shape == (3, 32, 32)
    assert data["readings"].max() <= 2**16 - 1 and data["readings"].min() >= 0
    np.testing.assert_array_equal(data["readings"], np.round(data["readings"]))
    assert run("simulate", "--out", tmp_path / "a.tnsr", "--count", 3, "--ladder", "--seed", 5) == 0
    assert _bytes(tmp_path / "a.tnsr") == _bytes(work / "r.tnsr")
    assert run("simulate", "--out", tmp_path / "b.tnsr", "--count", 3, "--ladder", "--seed", 6) == 0
    assert _bytes(tmp_path / "b.tnsr") != _bytes(work / "r.tnsr")


def test_simulate_preview_and_shepp_logan(tmp_path):
    assert run("simulate", "--out", tmp_path / "s.tnsr", "--count", 2, "--phantom", "shepp_logan",
               "--preview", tmp_path / "p.png", "--signal", 6.0) == 0
    with Image.open(tmp_path / "p.png") as im:
        assert im.mode.startswith("I;16") and im.size == (2 * 32 + 2, 32)
    assert np.all(tnsr.load(tmp_path / "s.tnsr")["signal"] == 6.0)


def test_simulate_from_ct_png(tmp_path):
    rows, cols = np.indices((80, 80))
    hu = np.where(np.hypot(rows - 40, cols - 40) <= 30, 0.0, -1000.0)
    Image.fromarray((hu + 32768).astype(np.uint16)).save(tmp_path / "ct.png")
    Image.fromarray(np.full((20, 20), 32768 - 1000, dtype=np.uint16)).save(tmp_path / "air.png")
    rc = run("simulate", "--out", tmp_path / "ct.tnsr", "--ct", tmp_path / "ct.png", tmp_path / "air.png",
             "--set", "data.hu_threshold=-950")
    assert rc == 0
    assert tnsr.load(tmp_path / "ct.tnsr")["phantom"].shape == (1, 32, 32)


def test_fbp_readings_use_posterior_mean(work, tmp_path, capsys):
    post = work / "post" / "step-9.tnsr"
    assert run("fbp", "--input", work / "r.tnsr", "--posterior", post, "--out", tmp_path / "f.png",
               "--out-tnsr", tmp_path / "f.tnsr") == 0
    assert "ssim" in capsys.readouterr().out
    with Image.open(tmp_path / "f.png") as im:
        assert im.mode.startswith("I;16")
    data = tnsr.load(work / "r.tnsr")
    mu, _ = T.posterior_of(T.restore_model(T.load_checkpoint(post), "posterior"), data["readings"], data["signal"])
    expected = fbp_reconstruct(mu[:, 0].double().numpy(), ScanGeometry(32, 32, 32, 0.05))
    np.testing.assert_array_equal(tnsr.load(tmp_path / "f.tnsr")["reconstruction"], expected)


def test_fbp_sinogram_and_oracle_fallback(work, tmp_path):
    assert run("fbp", "--input", work / "r.tnsr", "--input-kind", "sinogram", "--out", tmp_path / "s.png",
               "--out-tnsr", tmp_path / "s.tnsr") == 0
    data = tnsr.load(work / "r.tnsr")
    np.testing.assert_array_equal(tnsr.load(tmp_path / "s.tnsr")["reconstruction"],
                                  fbp_reconstruct(data["sinogram"], ScanGeometry(32, 32, 32, 0.05)))
    assert run("fbp", "--input", work / "r.tnsr", "--index", 0, "--out", tmp_path / "o.png") == 0


def test_loss_csv_one_row_per_step(work):
    assert [r[0] for r in _csv(work / "recon" / "loss.csv")[1:]] == ["0", "1", "2", "3"]
    post = _csv(work / "post" / "loss.csv")
    assert post[0] == ["step", "stage", "loss"]
    assert [r[1] for r in post[1:]] == ["mu"] * 3 + ["sigma"] * 3 + ["posterior"] * 3
    assert len(_csv(work / "gan" / "loss.csv")) == 3
    assert sorted(os.listdir(work / "recon")) == ["config.ini", "loss.csv", "step-2.tnsr", "step-4.tnsr"]


@pytest.mark.parametrize("kind,steps,resume_at,extra", [
    ("recon", 4, 2, []),
    ("posterior", 3, 4, []),
    ("gan", 4, 2, ["--posterior", "post/step-9.tnsr"]),
])
def test_resume_is_identical_continuation(work, tmp_path, kind, steps, resume_at, extra):
    extra = [str(work / e) if e.endswith(".tnsr") else e for e in extra]
    total = steps * (3 if kind == "posterior" else 1)
    assert run("train", "--kind", kind, "--run-dir", tmp_path / "full", "--steps", steps, *extra) == 0
    assert run("train", "--kind", kind, "--run-dir", tmp_path / "part", "--steps", steps, *extra) == 0
    for name in os.listdir(tmp_path / "part"):
        if name.startswith("step-") and name != f"step-{resume_at}.tnsr":
            os.remove(tmp_path / "part" / name)
    assert run("train", "--kind", kind, "--run-dir", tmp_path / "part", "--steps", steps,
               "--resume", tmp_path / "part" / f"step-{resume_at}.tnsr") == 0
    final = f"step-{total}.tnsr"
    assert _bytes(tmp_path / "full" / final) == _bytes(tmp_path / "part" / final)
    assert _csv(tmp_path / "full" / "loss.csv") == _csv(tmp_path / "part" / "loss.csv")


def test_sample_grid_layout_and_determinism(work, tmp_path):
    ck = work / "gan" / "step-2.tnsr"
    args = ("sample", "--checkpoint", ck, "--input", work / "r.tnsr", "--index", 0, 1, "--n", 4, "--truth")
    assert run(*args, "--out", tmp_path / "a.png", "--out-tnsr", tmp_path / "a.tnsr") == 0
    assert run(*args, "--out", tmp_path / "b.png") == 0
    with Image.open(tmp_path / "a.png") as im:
        assert im.mode.startswith("I;16")
        # truth, FBP(mu), 4 samples; two readings
        assert im.size == (6 * 32 + 5 * 2, 2 * 32 + 2)
    assert _bytes(tmp_path / "a.png") == _bytes(tmp_path / "b.png")
    samples = tnsr.load(tmp_path / "a.tnsr")["samples"]
    assert samples.shape == (2, 4, 32, 32)
    for i in range(4):
        for j in range(i):
            assert not np.array_equal(samples[0, i], samples[0, j])


def test_refine_outputs(work, tmp_path, capsys):
    out = tmp_path / "ref"
    assert run("refine", "--checkpoint", work / "gan" / "step-2.tnsr", "--input", work / "r.tnsr",
               "--iters", 6, "--snapshots", 3, "--out", out) == 0
    rows = _csv(out / "objective.csv")
    assert rows[0] == ["iteration", "objective"]
    assert [int(r[0]) for r in rows[1:]] == list(range(7))
    snaps = sorted(p for p in os.listdir(out) if p.startswith("snapshot-"))
    assert snaps == ["snapshot-00000.png", "snapshot-00003.png", "snapshot-00006.png"]
    printed = capsys.readouterr().out
    assert f"final objective {rows[-1][1]} " in printed
    assert run("refine", "--checkpoint", work / "gan" / "step-2.tnsr", "--input", work / "r.tnsr",
               "--iters", 2, "--snapshots", 9, "--out", out) == cli.EXIT_CONFIG


def test_eval_report(work, tmp_path):
    args = ("eval", "--checkpoint", work / "recon" / "step-4.tnsr", work / "gan" / "step-2.tnsr",
            "--n-samples", 2)
    assert run(*args, "--out", tmp_path / "a.csv") == 0
    assert run(*args, "--out", tmp_path / "b.csv") == 0
    rows = _csv(tmp_path / "a.csv")
    assert rows[0] == list(T.CSV_COLUMNS)
    assert {r[2] for r in rows[1:]} == {"fbp", "step-4:model", "step-2:generator"}
    assert _bytes(tmp_path / "a.csv") == _bytes(tmp_path / "b.csv")
    summary = _csv(tmp_path / "a-summary.csv")
    assert summary[0][0] == "method" and len(summary[0]) == 4
    assert summary[1][0] == "fbp"


def test_malformed_config_exit_code_names_key(tmp_path, capsys):
    assert run("config", "dump", "--set", "train.bogus=1") == cli.EXIT_CONFIG
    assert "train.bogus" in capsys.readouterr().err
    bad = tmp_path / "bad.ini"
    bad.write_text("[geometry]\nimage_size = lots\n")
    assert run("config", "dump", "--config", bad) == cli.EXIT_CONFIG
    assert "geometry.image_size" in capsys.readouterr().err


def test_full_scale_profile_refuses_small_geometry(tmp_path, capsys):
    rc = run("train", "--kind", "recon", "--run-dir", tmp_path, "--steps", 1, "--set", "train.profile=paper",
             "--set", "geometry.image_size=32")
    assert rc == cli.EXIT_CONFIG
    assert "train.profile" in capsys.readouterr().err


def test_io_errors(tmp_path):
    assert run("fbp", "--input", tmp_path / "missing.tnsr", "--out", tmp_path / "x.png") == cli.EXIT_IO
    (tmp_path / "junk.tnsr").write_bytes(b"not a tensor file")
    assert run("fbp", "--input", tmp_path / "junk.tnsr", "--out", tmp_path / "x.png") == cli.EXIT_IO


def test_divergence_exit_code(tmp_path):
    rc = run("train", "--kind", "recon", "--run-dir", tmp_path, "--steps", 6, "--set", "train.lr_peak=1e30",
             "--set", "train.warmup_batches=1")
    assert rc == cli.EXIT_DIVERGED


def test_threads_flag_and_env(monkeypatch):
    before = torch.get_num_threads()
    try:
        assert cli.main(["config", "dump", "--threads", "1"]) == 0
        assert torch.get_num_threads() == 1
        monkeypatch.setenv("TOMOFORGE_THREADS", "2")
        assert cli.main(["config", "dump"]) == 0
        assert torch.get_num_threads() == 2
    finally:
        torch.set_num_threads(before)


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "tomoforge.cli", "config", "dump"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "[geometry]" in out.stdout and "image_size = 64" in out.stdout
