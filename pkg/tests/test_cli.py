import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from mcmr import cli
from mcmr.container import read_dataset, read_result, write_result
from mcmr.data import ImageSequence

SMALL = ["--frames", "4", "--size", "32", "--coils", "3", "--center-lines", "2", "--seed", "7"]
FAST = ["--iters", "2", "--cg-iters", "5"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    out = d / "d.mcmr"
    assert cli.main(["phantom", *SMALL, "--accel", "4", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def recon(dataset):
    out = dataset.parent / "r.mcmr"
    assert cli.main(["recon", "--in", str(dataset), "--mode", "unrolled", *FAST, "--no-early-stop",
                     "--out", str(out)]) == 0
    return out


def test_phantom_writes_readable_dataset_and_manifest(dataset):
    ds = read_dataset(dataset)
    assert ds.kspace.data.shape == (4, 3, 32, 32) and ds.reference is not None and ds.gt_motion is not None
    man = json.loads((dataset.parent / "d.mcmr.manifest.json").read_text(encoding="utf-8"))
    assert man["command"] == "phantom" and man["args"]["seed"] == 7
    assert set(man["versions"]) >= {"mcmr", "numpy", "scipy"}


def test_phantom_full_sampling(tmp_path):
    out = tmp_path / "full.mcmr"
    assert cli.main(["phantom", *SMALL, "--accel", "1", "--out", str(out)]) == 0
    assert all(len(l) == 32 for l in read_dataset(out).masks.lines)


def test_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["phantom", *SMALL])
    assert exc.value.code == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_mode_is_usage_error(dataset, tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["recon", "--in", str(dataset), "--mode", "magic", "--out", str(tmp_path / "r")])
    assert exc.value.code == 1


def test_zero_iterations_is_validation_error(dataset, tmp_path):
    assert cli.main(["recon", "--in", str(dataset), "--iters", "0", "--out", str(tmp_path / "r")]) == 2


def test_unreadable_dataset(tmp_path):
    bad = tmp_path / "bad.mcmr"
    bad.write_bytes(b"not a container at all")
    assert cli.main(["recon", "--in", str(bad), "--out", str(tmp_path / "r")]) == 2
    assert cli.main(["recon", "--in", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == 2


def test_recon_history_has_one_entry_per_iteration(recon):
    hist = json.loads((recon.parent / "r.mcmr.history.json").read_text(encoding="utf-8"))
    assert hist["n_iterations"] == 2 and len(hist["iterations"]) == 2
    res = read_result(recon)
    assert res.motion is not None and res.meta["mode"] == "unrolled"


def test_recon_mode_none_fully_sampled(tmp_path):
    ds = tmp_path / "full.mcmr"
    cli.main(["phantom", *SMALL, "--accel", "1", "--noise", "0", "--out", str(ds)])
    out = tmp_path / "r.mcmr"
    assert cli.main(["recon", "--in", str(ds), "--mode", "none", "--out", str(out)]) == 0
    assert read_result(out).meta["psnr_mean"] > 40


def test_recon_fixed_motion(dataset, tmp_path):
    out = tmp_path / "f.mcmr"
    assert cli.main(["recon", "--in", str(dataset), "--mode", "fixed-motion", *FAST, "--out", str(out)]) == 0
    assert read_result(out).meta["n_iterations"] == 2


def test_threads_one_bit_identical(dataset, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"r{k}.mcmr"
        cli.main(["recon", "--in", str(dataset), *FAST, "--threads", "1", "--out", str(out)])
        outs.append(read_result(out).recon.frames.tobytes())
    assert outs[0] == outs[1]


def test_eval_text_and_json_agree(recon, dataset, tmp_path, capsys):
    js = tmp_path / "m.json"
    assert cli.main(["eval", "--recon", str(recon), "--ref", str(dataset), "--json", str(js)]) == 0
    text = capsys.readouterr().out
    report = json.loads(js.read_text(encoding="utf-8"))
    rows = [l.split() for l in text.splitlines()[1:5]]
    for row, rec in zip(rows, report["frames"]):
        assert abs(float(row[1]) - rec["psnr"]) < 1e-9 and abs(float(row[2]) - rec["ssim"]) < 1e-9
    std_line = next(l for l in text.splitlines() if l.startswith("psnr_mean")).split()
    assert abs(float(std_line[3]) - report["psnr"]["std"]) < 1e-9
    assert abs(report["psnr"]["std"] - np.std([r["psnr"] for r in report["frames"]])) < 1e-9
    assert "epe" in report and "wall_time" in report


def test_eval_identical_is_exact(dataset, tmp_path, capsys):
    ref = read_dataset(dataset).reference
    same = tmp_path / "same.mcmr"
    write_result(same, ref)
    js = tmp_path / "m.json"
    assert cli.main(["eval", "--recon", str(same), "--ref", str(dataset), "--json", str(js)]) == 0
    report = json.loads(js.read_text(encoding="utf-8"))
    assert report["psnr"]["mean"] == "exact" and report["ssim"]["mean"] == 1.0
    assert "psnr_mean exact" in capsys.readouterr().out


def test_eval_requires_reference(tmp_path, recon):
    ds = tmp_path / "noref.mcmr"
    from mcmr.container import write_dataset

    full = read_dataset(recon.parent / "d.mcmr")
    write_dataset(ds, full.kspace, full.coils, full.masks)
    assert cli.main(["eval", "--recon", str(recon), "--ref", str(ds)]) == 2


def test_plot_panels(recon, dataset, tmp_path):
    prefix = str(tmp_path / "fig")
    args = ["plot", "--recon", str(recon), "--recon", str(recon), "--ref", str(dataset),
            "--column", "16", "--scale", "1", "--out", prefix]
    assert cli.main(args) == 0
    xy = Image.open(prefix + "_xy.png")
    yt = Image.open(prefix + "_yt.png")
    assert xy.size == (2 * 32 + 2, 32) and yt.size == (2 * 4 + 2, 32)
    first = (open(prefix + "_xy.png", "rb").read(), open(prefix + "_yt.png", "rb").read())
    assert cli.main(args) == 0
    assert first == (open(prefix + "_xy.png", "rb").read(), open(prefix + "_yt.png", "rb").read())


def test_plot_column_out_of_range(recon, tmp_path):
    assert cli.main(["plot", "--recon", str(recon), "--column", "32", "--out", str(tmp_path / "f")]) == 2


def test_panel_geometry_and_gray_mapping():
    rng = np.random.default_rng(0)
    x = ImageSequence(rng.standard_normal((5, 12, 9)) + 1j * rng.standard_normal((5, 12, 9)))
    assert cli.yt_panel(x, 3).shape == (12, 5)
    g = cli.to_gray(np.array([[0.0, 1.0], [2.0, 4.0]]))
    assert g.tolist() == [[0, 64], [128, 255]]
    assert np.all(cli.to_gray(np.zeros((3, 3))) == 0)


def test_rerun_reproduces_metrics(recon, tmp_path, capsys):
    man = recon.parent / "r.mcmr.manifest.json"
    out = tmp_path / "again.mcmr"
    assert cli.main(["rerun", "--manifest", str(man), "--out", str(out)]) == 0
    old = json.loads(man.read_text(encoding="utf-8"))["metrics"]
    new = json.loads((tmp_path / "again.mcmr.manifest.json").read_text(encoding="utf-8"))["metrics"]
    assert abs(old["psnr_mean"] - new["psnr_mean"]) <= 1e-6
    assert read_result(out).recon.frames.tobytes() == read_result(recon).recon.frames.tobytes()


def test_bench_report(tmp_path, capsys):
    out = tmp_path / "bench.json"
    assert cli.main(["bench", "--frames", "4", "--size", "32", "--coils", "3", "--center-lines", "2",
                     "--accels", "4", "--modes", "none,fixed-motion", "--oracle", *FAST, "--out", str(out)]) == 0
    rows = json.loads(out.read_text(encoding="utf-8"))["rows"]
    assert [r["mode"] for r in rows] == ["none", "fixed-motion", "oracle"]
    assert "PSNR dB / SSIM" in capsys.readouterr().out


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mcmr", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "phantom" in proc.stdout
