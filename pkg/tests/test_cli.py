import csv
import hashlib
import io
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from clsr.cli import main
from clsr.data import read_spacing, read_volume, write_volume
from clsr.models import parameter_hash

TINY = [
    "data.hr_shape=[24,24,24]", "data.n_ids=12", "data.counts=[4,4,2,2]",
    "network.base_channels=4", "network.n_rcab_blocks=1", "network.reduction=2", "network.disc_stages=2",
    "patch.lr_patch=[12,12,12]", "optim.batch_size=2", "optim.epochs=1", "optim.steps_per_epoch=2",
]


def tiny_args(tmp: Path, *extra: str) -> list[str]:
    args = []
    for s in TINY + [f"data_dir={tmp / 'data'}", f"out_dir={tmp / 'out'}", *extra]:
        args += ["--set", s]
    return args


def tree_hash(root: Path, pattern: str = "*") -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob(pattern)) if p.is_file()}


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    assert main(["build-dataset", *tiny_args(tmp)]) == 0
    return tmp


class TestBuildDataset:
    def test_rebuild_identical(self, built, tmp_path):
        other = tmp_path
        assert main(["build-dataset", *tiny_args(other)]) == 0
        a, b = tree_hash(built / "data"), tree_hash(other / "data")
        a.pop("config.json"), b.pop("config.json")  # holds the paths themselves
        assert a == b and len(a) > 10

    def test_lr_shapes_122(self, tmp_path):
        assert main(["build-dataset", *tiny_args(tmp_path, "network.factors=[1,2,2]")]) == 0
        lr = sorted((tmp_path / "data" / "lr").glob("*.vol"))
        assert lr and all(read_volume(p).shape == (24, 12, 12) for p in lr)
        assert read_spacing(lr[0]) == [1.0, 2.0, 2.0]

    def test_unwritable(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["build-dataset", *tiny_args(tmp_path, f"data_dir={blocker / 'sub'}")]) == 2
        assert "error" in capsys.readouterr().err

    def test_bad_factor(self, tmp_path):
        assert main(["build-dataset", *tiny_args(tmp_path, "network.factors=[5,2,2]")]) == 2


class TestDegrade:
    def test_constant(self, tmp_path):
        write_volume(tmp_path / "c", np.full((32, 32, 32), 0.7, dtype=np.float32))
        assert main(["degrade", str(tmp_path / "c.vol"), str(tmp_path / "o")]) == 0
        out = read_volume(tmp_path / "o")
        assert out.shape == (16, 16, 16)
        np.testing.assert_allclose(out, 0.7, atol=1e-6)
        assert read_spacing(tmp_path / "o") == [2.0, 2.0, 2.0]

    def test_cosine(self, tmp_path):
        x = np.arange(8)
        vol = np.broadcast_to(np.cos(np.pi * x / 4), (8, 8, 8)).astype(np.float32)
        write_volume(tmp_path / "c", vol)
        assert main(["degrade", str(tmp_path / "c"), str(tmp_path / "o"), "--factors", "1,1,2"]) == 0
        np.testing.assert_allclose(read_volume(tmp_path / "o")[0, 0], [1, 0, -1, 0], atol=1e-6)

    def test_missing_input(self, tmp_path):
        assert main(["degrade", str(tmp_path / "none"), str(tmp_path / "o")]) == 2

    def test_bad_factors(self, tmp_path):
        write_volume(tmp_path / "c", np.zeros((6, 6, 6), dtype=np.float32))
        assert main(["degrade", str(tmp_path / "c"), str(tmp_path / "o"), "--factors", "4,4,4"]) == 2


@pytest.fixture(scope="module")
def trained(built):
    assert main(["train", *tiny_args(built)]) == 0
    assert main(["eval", *tiny_args(built)]) == 0
    return built / "out"


class TestTrainEval:
    def test_train_outputs(self, trained):
        train = trained / "train"
        for name in ("best.pt", "last.pt", "train_log.jsonl", "config.json"):
            assert (train / name).is_file()
        recs = [json.loads(line) for line in (train / "train_log.jsonl").read_text().splitlines()]
        assert [r["step"] for r in recs] == [1, 2]
        assert all(r["lr_generator"] == 2e-4 and r["lr_discriminator"] == 5e-5 for r in recs)

    def test_eval_report(self, trained):
        ev = trained / "eval"
        rep = json.loads(next(ev.glob("*.json")).read_text())
        rows = list(csv.DictReader(io.StringIO(next(ev.glob("*.csv")).read_text())))
        assert {r["method"] for r in rows} == {"model", "trilinear", "tricubic"}
        model = [r for r in rows if r["method"] == "model"]
        assert len(model) == 2
        p = np.array([float(r["psnr"]) for r in model])
        agg = rep["aggregates"]["model"]
        assert agg["psnr_mean"] == pytest.approx(p.mean(), abs=1e-9)
        assert agg["psnr_std"] == pytest.approx(p.std(), abs=1e-9)
        assert len(list((ev / "error_maps").glob("*.png"))) == 4

    def test_eval_missing_checkpoint(self, built, tmp_path):
        assert main(["eval", *tiny_args(built), "--checkpoint", str(tmp_path / "x.pt")]) == 2

    def test_train_without_dataset(self, tmp_path):
        assert main(["train", *tiny_args(tmp_path)]) == 2

    def test_checkpoint_hash_reproducible(self, trained, built, tmp_path):
        assert main(["train", *tiny_args(built, f"out_dir={tmp_path}")]) == 0
        a = torch.load(trained / "train" / "last.pt", weights_only=False)["trainer"]["nets"]
        b = torch.load(tmp_path / "train" / "last.pt", weights_only=False)["trainer"]["nets"]
        ha = parameter_hash(torch.nn.ParameterList([torch.nn.Parameter(v) for v in a.values()]))
        hb = parameter_hash(torch.nn.ParameterList([torch.nn.Parameter(v) for v in b.values()]))
        assert ha == hb

    def test_divergence_exit_code(self, built, tmp_path, capsys):
        args = tiny_args(built, f"out_dir={tmp_path}", "optim.lr_generator=1e30", "optim.steps_per_epoch=5")
        assert main(["train", *args]) == 3
        assert "non-finite" in capsys.readouterr().err


@pytest.fixture(scope="module")
def swept(built):
    args = tiny_args(built, "optim.steps_per_epoch=1")
    assert main(["sweep", *args]) == 0
    return built / "out" / "sweep", args


class TestSweep:
    def test_rows(self, swept):
        rows = list(csv.DictReader(open(swept[0] / "sweep.csv")))
        assert len(rows) == 10
        assert {(r["fraction"], r["cl_on"]) for r in rows} == {
            (repr(f), str(c)) for f in (1.0, 0.7, 0.5, 0.3, 0.1) for c in (True, False)}
        assert all(len(r["fingerprint"]) == 16 for r in rows)
        assert len({r["fingerprint"] for r in rows}) == 10

    def test_rerun_byte_identical(self, swept, tmp_path):
        first = (swept[0] / "sweep.csv").read_bytes()
        assert main(["sweep", *swept[1], "--set", f"out_dir={tmp_path}"]) == 0
        assert (tmp_path / "sweep" / "sweep.csv").read_bytes() == first

    def test_resume_skips_done_cells(self, swept):
        before = tree_hash(swept[0], "*.pt")
        assert main(["sweep", *swept[1]]) == 0
        assert tree_hash(swept[0], "*.pt") == before

    def test_corrupt_cell_rerun(self, swept):
        cell = swept[0] / "f0.10_cloff" / "cell.json"
        good = cell.read_text()
        cell.write_text("{not json")
        assert main(["sweep", *swept[1]]) == 0
        assert cell.read_text() == good

    def test_plot(self, swept):
        pytest.importorskip("matplotlib")
        assert main(["plot", str(swept[0])]) == 0
        assert (swept[0] / "sweep_psnr.png").is_file()


def test_bad_override(tmp_path):
    assert main(["train", "--set", "optim.nonexistent=3", "--set", f"data_dir={tmp_path}"]) == 2


def test_env_out_dir(built, tmp_path, monkeypatch):
    monkeypatch.setenv("CLSR_OUT_DIR", str(tmp_path / "env"))
    assert main(["train", *tiny_args(built, "optim.steps_per_epoch=1")]) == 0
    assert (tmp_path / "env" / "train" / "best.pt").is_file()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "clsr.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "build-dataset" in res.stdout
