import csv
import json
from datetime import timedelta

import numpy as np
import pytest

from heliopress.cli import format_sweep_csv, main, sweep_model_path
from heliopress.codec import reconstruct_in_memory
from heliopress.data import synthetic_sun, timestamp_from_filename
from heliopress.imageio import encode_pgm, read_image, write_image
from heliopress.model import ArchConfig, CodecModel, model_from_bytes, model_to_bytes


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def echoed(out):
    return json.loads(out.splitlines()[0])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    model = CodecModel.initialize(ArchConfig(), seed=2)
    (d / "m.sdw").write_bytes(model_to_bytes(model))
    (d / "other.sdw").write_bytes(model_to_bytes(CodecModel.initialize(ArchConfig(), seed=3)))
    img = synthetic_sun(4, 128, 1)[0][:65, :70]
    (d / "x.pgm").write_bytes(encode_pgm(img, 16))
    return d


# -- train ---------------------------------------------------------------------


def test_train_smoke(tmp_path, capsys):
    out = tmp_path / "m.sdw"
    code, stdout, _ = run(capsys, "train", "--synthetic", 8, "--epochs", 2, "--lambda", "0.0250", "--out", out)
    assert code == 0
    assert out.exists() and (tmp_path / "m.jsonl").exists()
    cfg = echoed(stdout)
    assert cfg["train"]["lam"] == float("0.0250") and cfg["train"]["epochs"] == 2
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines] == [1, 2]
    model_from_bytes(out.read_bytes())
    assert not list(tmp_path.glob(".*partial"))


@pytest.mark.parametrize("lam", ["0", "-0.1"])
def test_invalid_lambda_exit_2(tmp_path, capsys, lam):
    code, _, err = run(capsys, "train", "--synthetic", 8, f"--lambda={lam}", "--out", tmp_path / "m.sdw")
    assert code == 2
    assert "lam" in err
    assert not (tmp_path / "m.sdw").exists()


def test_config_file_precedence(tmp_path, capsys):
    conf = tmp_path / "c.toml"
    conf.write_text("[train]\nlam = 0.0125\nepochs = 1\nbatch_size = 4\n[arch]\nn_slices = 2\n")
    code, stdout, _ = run(capsys, "train", "--config", conf, "--lambda", "0.0035", "--synthetic", 4,
                          "--out", tmp_path / "m.sdw")
    assert code == 0
    cfg = echoed(stdout)
    assert cfg["train"]["lam"] == 0.0035  # flag beats file
    assert cfg["train"]["batch_size"] == 4 and cfg["train"]["epochs"] == 1  # file beats default
    assert cfg["train"]["crop"] == 64  # default
    assert cfg["arch"]["n_slices"] == 2
    assert model_from_bytes((tmp_path / "m.sdw").read_bytes()).arch.n_slices == 2


@pytest.mark.parametrize("text, field", [("[train]\nbogus = 1\n", "train.bogus"),
                                         ("[train]\nepochs = 0\n", "train.epochs"),
                                         ("[nope]\n", "nope"), ("not toml [", "config")])
def test_bad_config_exit_2(tmp_path, capsys, text, field):
    conf = tmp_path / "c.toml"
    conf.write_text(text)
    code, _, err = run(capsys, "train", "--config", conf, "--synthetic", 4, "--out", tmp_path / "m.sdw")
    assert code == 2 and field in err


def test_missing_data_exit_3(tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--data", tmp_path / "absent", "--out", tmp_path / "m.sdw")
    assert code == 3


def test_train_from_directory(tmp_path, capsys):
    d = tmp_path / "data"
    assert run(capsys, "gen-synthetic", d, "--count", 12, "--span-year")[0] == 0
    code, stdout, _ = run(capsys, "train", "--data", d, "--epochs", 1, "--out", tmp_path / "m.sdw")
    assert code == 0
    final = json.loads(stdout.splitlines()[-1])["final"]
    assert "eval_psnr" in final


# -- compress / decompress -----------------------------------------------------


def test_codec_roundtrip_parity(workdir, tmp_path, capsys):
    m, x = workdir / "m.sdw", workdir / "x.pgm"
    code, stdout, _ = run(capsys, "compress", m, x, tmp_path / "a.sdc")
    assert code == 0
    info = json.loads(stdout)
    assert info["bytes"] == (tmp_path / "a.sdc").stat().st_size
    assert (info["width"], info["height"]) == (70, 65)
    run(capsys, "compress", m, x, tmp_path / "b.sdc")
    assert (tmp_path / "a.sdc").read_bytes() == (tmp_path / "b.sdc").read_bytes()

    code, stdout, _ = run(capsys, "decompress", m, tmp_path / "a.sdc", tmp_path / "y.sdt", "--reference", x)
    assert code == 0
    assert json.loads(stdout)["psnr_db"] > 0
    model = model_from_bytes(m.read_bytes())
    y = read_image(tmp_path / "y.sdt")
    assert y.shape == (65, 70)
    assert np.array_equal(y, reconstruct_in_memory(model, read_image(x)))


def test_decompress_to_pgm(workdir, tmp_path, capsys):
    run(capsys, "compress", workdir / "m.sdw", workdir / "x.pgm", tmp_path / "a.sdc")
    assert run(capsys, "decompress", workdir / "m.sdw", tmp_path / "a.sdc", tmp_path / "y.pgm", "--bits", 8)[0] == 0
    assert (tmp_path / "y.pgm").read_bytes().startswith(b"P5\n70 65\n255\n")


def test_wrong_model_exit_5(workdir, tmp_path, capsys):
    run(capsys, "compress", workdir / "m.sdw", workdir / "x.pgm", tmp_path / "a.sdc")
    code, _, err = run(capsys, "decompress", workdir / "other.sdw", tmp_path / "a.sdc", tmp_path / "y.pgm")
    assert code == 5 and "digest" in err
    assert not (tmp_path / "y.pgm").exists()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["a.sdc"]


@pytest.mark.parametrize("where", [45, -1, 30, 39])
def test_corrupt_stream_exit_6(workdir, tmp_path, capsys, where):
    run(capsys, "compress", workdir / "m.sdw", workdir / "x.pgm", tmp_path / "a.sdc")
    blob = bytearray((tmp_path / "a.sdc").read_bytes())
    blob[where] ^= 0x10
    (tmp_path / "a.sdc").write_bytes(bytes(blob))
    code, _, err = run(capsys, "decompress", workdir / "m.sdw", tmp_path / "a.sdc", tmp_path / "y.pgm")
    assert code == 6 and "corrupt" in err
    assert not (tmp_path / "y.pgm").exists()


def test_truncated_stream_exit_6(workdir, tmp_path, capsys):
    run(capsys, "compress", workdir / "m.sdw", workdir / "x.pgm", tmp_path / "a.sdc")
    blob = (tmp_path / "a.sdc").read_bytes()
    (tmp_path / "a.sdc").write_bytes(blob[:-3])
    assert run(capsys, "decompress", workdir / "m.sdw", tmp_path / "a.sdc", tmp_path / "y.pgm")[0] == 6


def test_missing_inputs_exit_3(workdir, tmp_path, capsys):
    assert run(capsys, "compress", tmp_path / "none.sdw", workdir / "x.pgm", tmp_path / "a.sdc")[0] == 3
    assert run(capsys, "compress", workdir / "m.sdw", tmp_path / "none.pgm", tmp_path / "a.sdc")[0] == 3
    (tmp_path / "bad.pgm").write_bytes(b"garbage")
    assert run(capsys, "compress", workdir / "m.sdw", tmp_path / "bad.pgm", tmp_path / "a.sdc")[0] == 3
    assert not (tmp_path / "a.sdc").exists()


def test_sdt_input(workdir, tmp_path, capsys):
    img = np.random.default_rng(0).uniform(size=(64, 64))
    write_image(tmp_path / "x.sdt", img)
    assert run(capsys, "compress", workdir / "m.sdw", tmp_path / "x.sdt", tmp_path / "a.sdc")[0] == 0


# -- evaluate / rd-sweep -------------------------------------------------------


def test_evaluate(workdir, capsys):
    code, stdout, _ = run(capsys, "evaluate", workdir / "m.sdw", "--synthetic", 10)
    assert code == 0
    rep = json.loads(stdout)
    assert rep["images"] == 4 and rep["bpp"] > 0


def test_rd_sweep_csv(tmp_path, capsys):
    models = tmp_path / "models"
    models.mkdir()
    lams = [0.0550, 0.0015, 0.0125]
    for i, lam in enumerate(lams):
        sweep_model_path(models, lam).write_bytes(model_to_bytes(CodecModel.initialize(ArchConfig(), seed=i)))
    out = tmp_path / "rd.csv"
    code, stdout, _ = run(capsys, "rd-sweep", "--models-dir", models, "--lambdas", *lams, "--synthetic", 4,
                          "--output", out, "--report-monotone")
    assert code == 0
    assert "bpp non-decreasing in lambda:" in stdout
    rows = list(csv.DictReader(out.open()))
    assert list(rows[0]) == ["lambda", "bpp", "psnr_db", "msssim_db", "perc"]
    assert [float(r["lambda"]) for r in rows] == sorted(lams)
    assert all(len(r["bpp"].split(".")[1]) == 6 for r in rows)


def test_rd_sweep_missing_model_exit_3(tmp_path, capsys):
    code, _, err = run(capsys, "rd-sweep", "--models-dir", tmp_path, "--lambdas", 0.025, "--synthetic", 4,
                       "--output", tmp_path / "rd.csv")
    assert code == 3 and "0.0250" in err
    assert not (tmp_path / "rd.csv").exists()


def test_rd_sweep_train_first(tmp_path, capsys):
    code, _, _ = run(capsys, "rd-sweep", "--models-dir", tmp_path / "m", "--lambdas", 0.0035, 0.025,
                     "--train-first", "--synthetic", 4, "--epochs", 1, "--output", tmp_path / "rd.csv")
    assert code == 0
    assert sweep_model_path(tmp_path / "m", 0.0035).exists()
    assert len((tmp_path / "rd.csv").read_text().splitlines()) == 3


def test_sweep_csv_reparse():
    rows = [{"lambda": lam, "bpp": 1 / 3 + i, "psnr_db": 20 + np.pi, "msssim_db": 7.123456789, "perc": 0.1}
            for i, lam in enumerate([0.041, 0.0015, 0.0035, 0.007, 0.0125, 0.025, 0.055])]
    parsed = list(csv.DictReader(format_sweep_csv(rows).splitlines()))
    assert len(parsed) == 7
    by_lam = {r["lambda"]: r for r in rows}
    for p in parsed:
        src = by_lam[float(p["lambda"])]
        for k in ("bpp", "psnr_db", "msssim_db", "perc"):
            assert float(p[k]) == round(src[k], 6)


# -- synthetic data / split ----------------------------------------------------


def test_gen_synthetic_hourly(tmp_path, capsys):
    code, _, _ = run(capsys, "gen-synthetic", tmp_path / "a", "--count", 24, "--seed", 5)
    assert code == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(names) == 24
    ts = [timestamp_from_filename(n) for n in names]
    assert all(b - a == timedelta(hours=1) for a, b in zip(ts, ts[1:]))
    run(capsys, "gen-synthetic", tmp_path / "b", "--count", 24, "--seed", 5)
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_gen_synthetic_bad_size(tmp_path, capsys):
    assert run(capsys, "gen-synthetic", tmp_path, "--size", 100)[0] == 2


def test_gen_synthetic_unwritable(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(capsys, "gen-synthetic", blocker / "sub")[0] == 3


def test_split_months_year(tmp_path, capsys):
    run(capsys, "gen-synthetic", tmp_path / "y", "--count", 48, "--span-year")
    code, stdout, _ = run(capsys, "split-months", tmp_path / "y", "--output", tmp_path / "split.json")
    assert code == 0
    rep = json.loads(stdout)
    assert rep["train_months"] == list(range(1, 9)) and rep["test_months"] == [9, 10, 11, 12]
    full = json.loads((tmp_path / "split.json").read_text())
    assert not {r["path"] for r in full["train"]} & {r["path"] for r in full["test"]}
    assert rep["train"] + rep["test"] == 48


def test_split_months_missing(tmp_path, capsys):
    assert run(capsys, "split-months", tmp_path / "nothing")[0] == 3


def test_usage_error_exit_2(capsys):
    assert run(capsys, "compress")[0] == 2
