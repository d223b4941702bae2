import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from sdrct.cli import main, parse_grid
from sdrct.core import header_path, read_sinogram, read_volume
from sdrct.experiment import load_scenario, parse_scenario

CONFIGS = Path(__file__).resolve().parents[1] / "src" / "sdrct" / "configs"


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture
def chain(tmp_path):
    """phantom -> project -> degrade on a 16^3 grid."""
    vol, clean, noisy = tmp_path / "vol.raw", tmp_path / "clean.raw", tmp_path / "noisy.raw"
    assert main(["phantom", "--size", "16", "--out", str(vol)]) == 0
    assert main(["project", "--volume", str(vol), "--angles", "12", "--out", str(clean)]) == 0
    assert main(["degrade", "--sino", str(clean), "--sigma", "0.5", "--max-shift", "1",
                 "--seed", "3", "--out", str(noisy)]) == 0
    return tmp_path, vol, clean, noisy


def test_parse_grid():
    assert len(parse_grid("0:0.25:3")) == 13
    assert parse_grid("0:0.25:3")[-1] == 3.0
    assert parse_grid("0,0.005,0.015,0.03,0.04") == [0, 0.005, 0.015, 0.03, 0.04]
    for bad in ("a:b", "1:0:2", "3:1:2", "", "x,1"):
        with pytest.raises(ValueError):
            parse_grid(bad)


def test_phantom(tmp_path, capsys):
    out = tmp_path / "p.raw"
    assert main(["phantom", "--size", "16", "--out", str(out)]) == 0
    assert out.stat().st_size == 16**3 * 4
    assert "16x16x16" in capsys.readouterr().out
    first = sha(out)
    assert main(["phantom", "--size", "16", "--out", str(out)]) == 0
    assert sha(out) == first


def test_phantom_size_guard(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["phantom", "--size", "4", "--out", str(tmp_path / "p.raw")])
    assert exc.value.code != 0
    assert "usage" in capsys.readouterr().err


def test_project_shapes(chain, tmp_path):
    _, vol, clean, _ = chain
    s = read_sinogram(clean)
    assert json.loads(header_path(clean).read_text())["dims"] == [16, 12, 16]
    assert s.valid.all()
    one = tmp_path / "one.raw"
    assert main(["project", "--volume", str(vol), "--angles", "1", "--out", str(one)]) == 0
    assert read_sinogram(one).data.shape == (16, 1, 16)


def test_project_zero_volume(tmp_path):
    vol = tmp_path / "z.raw"
    from sdrct.core import GridGeometry, Volume, write_volume
    write_volume(Volume(GridGeometry(8, 1, 2), np.zeros((2, 8, 8))), vol)
    out = tmp_path / "s.raw"
    assert main(["project", "--volume", str(vol), "--angles", "4", "--out", str(out)]) == 0
    assert np.all(read_sinogram(out).data == 0)


def test_project_missing_file(tmp_path):
    assert main(["project", "--volume", str(tmp_path / "nope.raw"), "--angles", "4",
                 "--out", str(tmp_path / "s.raw")]) != 0
    assert not (tmp_path / "s.raw").exists()


def test_degrade(chain, capsys):
    tmp_path, _, clean, _ = chain
    same = tmp_path / "same.raw"
    assert main(["degrade", "--sino", str(clean), "--sigma", "0", "--max-shift", "0",
                 "--out", str(same)]) == 0
    assert same.read_bytes() == clean.read_bytes()
    a, b = tmp_path / "a.raw", tmp_path / "b.raw"
    for p in (a, b):
        assert main(["degrade", "--sino", str(clean), "--sigma", "1", "--max-shift", "2",
                     "--seed", "5", "--out", str(p)]) == 0
    assert sha(a) == sha(b)
    assert "masked fraction" in capsys.readouterr().out
    assert main(["degrade", "--sino", str(clean), "--max-shift", "8", "--out", str(tmp_path / "c.raw")]) != 0
    assert not (tmp_path / "c.raw").exists()


def test_recon_methods(chain):
    tmp_path, _, _, noisy = chain
    fbp = tmp_path / "fbp.raw"
    assert main(["recon", "--sino", str(noisy), "--method", "fbp", "--out", str(fbp)]) == 0
    assert not Path(str(fbp) + ".trace.csv").exists()
    sdr, trace = tmp_path / "sdr.raw", tmp_path / "sdr_trace.csv"
    assert main(["recon", "--sino", str(noisy), "--method", "sdr", "--max-iter", "20",
                 "--tol", "0", "--out", str(sdr), "--trace", str(trace), "--threads", "1"]) == 0
    rows = trace.read_text().strip().split("\n")
    assert rows[0] == "iteration,relative_change" and 1 <= len(rows) - 1 <= 20
    assert read_volume(sdr).data.shape == (16, 16, 16)
    for m in ("ossirt", "tvart"):
        assert main(["recon", "--sino", str(noisy), "--method", m, "--max-iter", "3",
                     "--out", str(tmp_path / f"{m}.raw")]) == 0


def test_recon_unknown_method(chain, capsys):
    tmp_path, _, _, noisy = chain
    with pytest.raises(SystemExit) as exc:
        main(["recon", "--sino", str(noisy), "--method", "art", "--out", str(tmp_path / "x.raw")])
    assert exc.value.code != 0
    assert "fbp, ossirt, tvart, sdr" in capsys.readouterr().err


def test_recon_sdr_single_slice(tmp_path, capsys):
    from sdrct.core import GridGeometry, SinogramStack, write_sinogram
    path = tmp_path / "s.raw"
    write_sinogram(SinogramStack(GridGeometry(8, 4, 1), np.ones((1, 4, 8))), path)
    out = tmp_path / "r.raw"
    assert main(["recon", "--sino", str(path), "--method", "sdr", "--out", str(out)]) != 0
    assert "tvart" in capsys.readouterr().err
    assert not out.exists()


def test_metrics(tmp_path):
    vol = tmp_path / "vol.raw"
    assert main(["phantom", "--size", "32", "--out", str(vol)]) == 0
    out = tmp_path / "m.csv"
    assert main(["metrics", "--recon", str(vol), "--truth", str(vol), "--roi", "phantom",
                 "--out", str(out)]) == 0
    lines = out.read_text().strip().split("\n")
    mid = [l for l in lines if ",mid20," in l]
    assert len(mid) == 1
    fields = mid[0].split(",")
    assert fields[2] == "inf" and fields[3] == "1"
    assert len(lines) == 1 + 32 + 1
    assert fields[4] == "inf"  # constant regions


def test_metrics_without_truth(chain, tmp_path):
    _, vol, _, _ = chain
    out = tmp_path / "m.csv"
    assert main(["metrics", "--recon", str(vol), "--out", str(out)]) == 0
    for line in out.read_text().strip().split("\n")[1:]:
        f = line.split(",")
        assert f[2] == f[3] == f[4] == "" and f[5] != ""


def test_metrics_missing_prerequisite(chain, tmp_path, capsys):
    _, vol, _, _ = chain
    assert main(["metrics", "--recon", str(vol), "--metrics", "snr", "--out", str(tmp_path / "m.csv")]) != 0
    assert "--truth" in capsys.readouterr().err
    assert main(["metrics", "--recon", str(vol), "--truth", str(vol), "--metrics", "cnr"]) != 0
    assert "--roi" in capsys.readouterr().err


def test_metrics_mid20_on_128_slices(tmp_path):
    from sdrct.core import GridGeometry, Volume, write_volume
    rng = np.random.default_rng(0)
    a, b = tmp_path / "a.raw", tmp_path / "b.raw"
    g = GridGeometry(8, 1, 128)
    truth = rng.random((128, 8, 8))
    write_volume(Volume(g, truth), a)
    write_volume(Volume(g, truth + 0.1 * rng.normal(size=truth.shape)), b)
    out = tmp_path / "m.csv"
    assert main(["metrics", "--recon", str(b), "--truth", str(a), "--out", str(out)]) == 0
    lines = out.read_text().strip().split("\n")
    per = {l.split(",")[1]: float(l.split(",")[2]) for l in lines[1:]}
    expected = np.mean([per[f"slice{k}"] for k in range(54, 74)])
    assert per["mid20"] == pytest.approx(expected, rel=1e-5)


def test_tune(chain, tmp_path, capsys):
    _, _, _, noisy = chain
    out = tmp_path / "t.csv"
    assert main(["tune", "--sino", str(noisy), "--param", "lambda1", "--grid", "0:0.25:3",
                 "--max-iter", "3", "--out", str(out)]) == 0
    rows = out.read_text().strip().split("\n")
    assert len(rows) == 14
    assert "selected lambda1" in capsys.readouterr().out
    assert main(["tune", "--sino", str(noisy), "--param", "lambda1", "--grid", "0.5",
                 "--out", str(tmp_path / "u.csv")]) != 0
    assert "curvature" in capsys.readouterr().err
    assert main(["tune", "--sino", str(noisy), "--param", "lambda2", "--grid", "0:1",
                 "--out", str(tmp_path / "v.csv")]) != 0
    out2 = tmp_path / "l2.csv"
    assert main(["tune", "--sino", str(noisy), "--param", "lambda2", "--grid",
                 "0,0.005,0.015,0.03,0.04", "--out", str(out2)]) == 0
    sel = float(capsys.readouterr().out.strip().split("=")[-1])
    assert sel in (0, 0.005, 0.015, 0.03, 0.04)


def small_config(tmp_path, **extra):
    cfg = {"name": "tiny", "side_length": 16, "angle_count": 12, "noise": "high", "max_shift": 1,
           "seed": 2, "recon": {"max_outer_iterations": 3}, "output_dir": str(tmp_path / "out")}
    cfg.update(extra)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_experiment_deterministic(tmp_path):
    path = small_config(tmp_path)
    assert main(["experiment", "--config", str(path), "--output-dir", str(tmp_path / "a")]) == 0
    assert main(["experiment", "--config", str(path), "--output-dir", str(tmp_path / "b")]) == 0
    for name in ("table.csv", "traces.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = (tmp_path / "a" / "table.csv").read_text().strip().split("\n")
    assert [r.split(",")[0] for r in rows[1:]] == ["fbp", "ossirt", "tvart", "sdr"]
    assert (tmp_path / "a" / "traces.png").stat().st_size > 0
    assert (tmp_path / "a" / "slices.png").stat().st_size > 0


def test_experiment_matches_chained_commands(tmp_path):
    path = small_config(tmp_path, methods=["sdr"], figures=False, side_length=32)
    assert main(["experiment", "--config", str(path)]) == 0
    vol, clean, noisy, rec = (tmp_path / n for n in ("v.raw", "c.raw", "n.raw", "r.raw"))
    assert main(["phantom", "--size", "32", "--out", str(vol)]) == 0
    assert main(["project", "--volume", str(vol), "--angles", "12", "--out", str(clean)]) == 0
    assert main(["degrade", "--sino", str(clean), "--sigma", "1", "--max-shift", "1", "--seed", "2",
                 "--out", str(noisy)]) == 0
    assert main(["recon", "--sino", str(noisy), "--method", "sdr", "--max-iter", "3",
                 "--out", str(rec)]) == 0
    m = tmp_path / "m.csv"
    assert main(["metrics", "--recon", str(rec), "--truth", str(vol), "--roi", "phantom",
                 "--out", str(m)]) == 0
    chained = [l for l in m.read_text().split("\n") if ",mid20," in l][0].split(",")
    table = (tmp_path / "out" / "table.csv").read_text().strip().split("\n")[1].split(",")
    assert chained[2:6] == table[2:6] and "" not in table[2:6]
    chained_trace = (tmp_path / "r.raw.trace.csv").read_text().strip().split("\n")[1:]
    exp_trace = (tmp_path / "out" / "traces.csv").read_text().strip().split("\n")[1:]
    assert [r.split(",")[1] for r in chained_trace] == [r.split(",")[2] for r in exp_trace]


def test_experiment_unknown_key(tmp_path, capsys):
    path = small_config(tmp_path, colour="blue")
    assert main(["experiment", "--config", str(path)]) != 0
    assert "colour" in capsys.readouterr().err
    path = small_config(tmp_path, recon={"lambda3": 1})
    assert main(["experiment", "--config", str(path)]) != 0
    assert "lambda3" in capsys.readouterr().err


def test_experiment_names_failed_stage(tmp_path, capsys):
    path = small_config(tmp_path, max_shift=9)
    assert main(["experiment", "--config", str(path)]) != 0
    assert "stage 'degrade'" in capsys.readouterr().err
    assert not (tmp_path / "out" / "table.csv").exists()


def test_bundled_configs_parse():
    names = sorted(p.name for p in CONFIGS.glob("*.json"))
    assert {"highnoise-64.json", "lownoise-64.json", "noiseless-64.json"} <= set(names)
    for p in CONFIGS.glob("*.json"):
        sc = load_scenario(p)
        assert sc.methods == ("fbp", "ossirt", "tvart", "sdr")
    with pytest.raises(ValueError, match="name"):
        parse_scenario("{}")


def test_threads_env(monkeypatch):
    from sdrct.cli import _threads

    class A:
        threads = None

    monkeypatch.setenv("SDR_CT_THREADS", "3")
    assert _threads(A()) == 3
    A.threads = 2
    assert _threads(A()) == 2
