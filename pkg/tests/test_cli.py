import subprocess
import sys

import numpy as np
import pytest

from salfau import checkpoint
from salfau.cli import DEFAULTS, UsageError, main, parse_config, resolve_config
from salfau.data import read_image, write_pgm, write_ppm
from salfau.network import NetworkConfig, build_network

TOY = "base_channels = 2\ninput_size = 16\nbatch = 2  # small\n"


@pytest.fixture
def dataset(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--count", "4", "--size", "16", "--seed", "3"]) == 0
    (tmp_path / "toy.cfg").write_text(TOY, encoding="utf-8")
    return tmp_path


def train(root, name, iters, seed=0):
    out = root / name
    code = main(["train", "--data", str(root / "d" / "manifest.txt"), "--config", str(root / "toy.cfg"),
                 "--out", str(out), "--iters", str(iters), "--seed", str(seed)])
    assert code == 0
    return out


class TestConfig:
    def test_defaults_follow_full_scale_recipe(self):
        assert DEFAULTS["batch"] == 12 and DEFAULTS["input_size"] == 288 and DEFAULTS["lr"] == 1e-3

    def test_precedence(self, tmp_path):
        (tmp_path / "c.cfg").write_text("batch = 3\nseed = 5\n", encoding="utf-8")
        cfg = resolve_config(tmp_path / "c.cfg", {"batch": 7, "seed": None})
        assert cfg["batch"] == 7 and cfg["seed"] == 5 and cfg["iters"] == DEFAULTS["iters"]

    def test_unknown_key(self):
        with pytest.raises(UsageError, match="learning_rate"):
            parse_config("learning_rate = 0.1\n")

    def test_bad_value(self):
        with pytest.raises(UsageError):
            parse_config("batch = many\n")


class TestGenData:
    def test_writes_pairs(self, tmp_path):
        out = tmp_path / "d"
        assert main(["gen-data", "--out", str(out), "--count", "8", "--size", "64", "--seed", "7"]) == 0
        assert len((out / "manifest.txt").read_text().splitlines()) == 8
        first = {p.name: p.read_bytes() for p in out.rglob("*") if p.is_file()}
        assert main(["gen-data", "--out", str(out), "--count", "8", "--size", "64", "--seed", "7"]) == 0
        assert first == {p.name: p.read_bytes() for p in out.rglob("*") if p.is_file()}

    def test_zero_count(self, tmp_path, capsys):
        assert main(["gen-data", "--out", str(tmp_path), "--count", "0"]) == 2
        assert "count" in capsys.readouterr().err


class TestTrain:
    def test_zero_iterations(self, dataset):
        out = train(dataset, "m.sfau", 0)
        model, opt = checkpoint.load(out)
        init = build_network(NetworkConfig(base_channels=2, input_size=16), seed=0).state_dict()
        for k, v in init.items():
            np.testing.assert_array_equal(model[k], v)
        assert opt["step"][0] == 0
        assert (dataset / "m.sfau.loss.tsv").read_text() == ""

    def test_deterministic(self, dataset):
        a, b = train(dataset, "a.sfau", 3), train(dataset, "b.sfau", 3)
        assert a.read_bytes() == b.read_bytes()
        log = (dataset / "a.sfau.loss.tsv").read_text()
        assert log == (dataset / "b.sfau.loss.tsv").read_text()
        assert [ln.split("\t")[0] for ln in log.splitlines()] == ["1", "2", "3"]

    def test_unknown_config_key(self, dataset, capsys):
        (dataset / "bad.cfg").write_text("dropout = 0.5\n", encoding="utf-8")
        code = main(["train", "--data", str(dataset / "d" / "manifest.txt"), "--config", str(dataset / "bad.cfg"),
                     "--out", str(dataset / "x.sfau")])
        assert code == 2
        assert "dropout" in capsys.readouterr().err

    def test_missing_manifest(self, dataset):
        code = main(["train", "--data", str(dataset / "nope.txt"), "--config", str(dataset / "toy.cfg"),
                     "--out", str(dataset / "x.sfau"), "--iters", "0"])
        assert code == 1


class TestPredict:
    @pytest.fixture
    def model(self, dataset):
        return train(dataset, "m.sfau", 2)

    def run(self, model, image, out, size=32):
        return main(["predict", "--model", str(model), "--input", str(image), "--output", str(out),
                     "--size", str(size)])

    def test_output_matches_input_size_and_is_stable(self, model, tmp_path):
        image = tmp_path / "in.ppm"
        write_ppm(image, np.random.default_rng(0).integers(0, 256, size=(3, 21, 37)).astype(np.uint8))
        assert self.run(model, image, tmp_path / "a.pgm") == 0
        assert self.run(model, image, tmp_path / "b.pgm") == 0
        assert read_image(tmp_path / "a.pgm").shape == (1, 21, 37)
        assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()

    def test_truncated_checkpoint(self, model, tmp_path, capsys):
        broken = tmp_path / "broken.sfau"
        broken.write_bytes(model.read_bytes()[:200])
        image = tmp_path / "in.ppm"
        write_ppm(image, np.zeros((3, 8, 8), np.uint8))
        assert self.run(broken, image, tmp_path / "o.pgm") == 1
        err = capsys.readouterr().err
        assert "truncated" in err and "tensor '" in err

    def test_bad_magic(self, tmp_path, capsys):
        fake = tmp_path / "fake.sfau"
        fake.write_bytes(b"GIF89a....")
        image = tmp_path / "in.ppm"
        write_ppm(image, np.zeros((3, 8, 8), np.uint8))
        assert self.run(fake, image, tmp_path / "o.pgm") == 1
        assert "not a SFAU1 checkpoint" in capsys.readouterr().err

    def test_size_must_divide(self, model, tmp_path):
        assert self.run(model, tmp_path / "x.ppm", tmp_path / "o.pgm", size=30) == 2


class TestEval:
    @pytest.fixture
    def maps(self, tmp_path):
        rng = np.random.default_rng(0)
        gt = tmp_path / "gt"
        gt.mkdir()
        for k in range(3):
            m = np.zeros((12, 12))
            r, c = rng.integers(0, 6, size=2)
            m[r:r + 5, c:c + 5] = 1
            write_pgm(gt / f"img{k}.pgm", m)
        return tmp_path

    def test_perfect(self, maps, capsys):
        report = maps / "r.tsv"
        assert main(["eval", "--pred", str(maps / "gt"), "--gt", str(maps / "gt"), "--report", str(report)]) == 0
        mean = report.read_text().splitlines()[-1].split("\t")
        assert mean[0] == "MEAN"
        assert [float(v) for v in mean[1:4]] == [0.0, 1.0, 1.0]
        assert float(mean[4]) >= 0.99

    def test_skip_and_rerun(self, maps):
        pred = maps / "pred"
        pred.mkdir()
        for p in (maps / "gt").glob("*.pgm"):
            (pred / p.name).write_bytes(p.read_bytes())
        (pred / "img1.pgm").write_bytes(b"P5\n12 12\n255\n\x00")
        args = ["eval", "--pred", str(pred), "--gt", str(maps / "gt"), "--report"]
        assert main(args + [str(maps / "a.tsv")]) == 0
        assert main(args + [str(maps / "b.tsv")]) == 0
        text = (maps / "a.tsv").read_text()
        assert "# skipped img1:" in text
        assert [ln.split("\t")[0] for ln in text.splitlines() if not ln.startswith("#")] == ["img0", "img2", "MEAN"]
        assert (maps / "a.tsv").read_bytes() == (maps / "b.tsv").read_bytes()

    def test_no_common_names(self, maps, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["eval", "--pred", str(empty), "--gt", str(maps / "gt"), "--report", str(tmp_path / "r")]) == 1


class TestShapes:
    def test_full_scale_plan(self, capsys):
        assert main(["shapes", "--base-channels", "64", "--input-size", "288"]) == 0
        out = capsys.readouterr().out
        assert "enc4: 1024×18×18" in out
        assert out.strip().splitlines()[-1] == "fuse: 1×288×288"

    def test_toy_plan_from_config(self, tmp_path, capsys):
        (tmp_path / "c.cfg").write_text("base_channels = 8\ninput_size = 64\n", encoding="utf-8")
        assert main(["shapes", "--config", str(tmp_path / "c.cfg")]) == 0
        assert "enc4: 128×4×4" in capsys.readouterr().out

    def test_indivisible_size(self):
        assert main(["shapes", "--input-size", "100"]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "salfau", "shapes", "--base-channels", "1", "--input-size", "16"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert "enc4: 16×1×1" in proc.stdout
