import csv
import filecmp
import shutil

import numpy as np
import pytest

from mrmil import checkpoint, cli
from mrmil.data import read_gray
from mrmil.pooling import pool_lse_lba
from mrmil.train import TrainingDiverged

TINY = """\
image_size = 16
n_train = 24
n_val = 12
n_test = 12
focal_radius_range = 2,3
levels = 2
base_channels = 2
channels_per_level = 4,8
dense_depth = 1
growth_rate = 3
fuse_channels = 4
saliency_resolution = 8
max_epochs = 1
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.txt").write_text(TINY)
    assert cli.main(["gen", "--config", str(root / "tiny.txt"), "--seed", "7", "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--config", str(root / "tiny.txt"), "--data", str(root / "data"),
                     "--out", str(root / "run")]) == 0
    return root


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _without_out(path):
    return [l for l in path.read_text().splitlines() if not l.startswith("out =")]


def _dirs_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    same, diff, err = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not diff and not err and all(_dirs_equal(a / d, b / d) for d in cmp.common_dirs)


class TestGen:
    def test_byte_identical_reruns(self, workdir):
        out = workdir / "data2"
        assert cli.main(["gen", "--config", str(workdir / "tiny.txt"), "--seed", "7", "--out", str(out)]) == 0
        for split in ("train", "val", "test"):
            assert _dirs_equal(workdir / "data" / split, out / split)
        assert _without_out(workdir / "data" / "config.txt") == _without_out(out / "config.txt")

    def test_printed_counts_match_labels(self, workdir, capsys):
        out = workdir / "data3"
        cli.main(["gen", "--config", str(workdir / "tiny.txt"), "--seed", "7", "--out", str(out)])
        printed = capsys.readouterr().out
        for split in ("train", "val", "test"):
            rows = _rows(out / split / "labels.csv")
            focal = sum(int(r["label_1"]) for r in rows)
            diffuse = sum(int(r["label_2"]) for r in rows)
            assert f"{split}: {len(rows)} samples, positives focal={focal}, diffuse={diffuse}" in printed

    def test_masks_exactly_for_positives(self, workdir):
        split = workdir / "data" / "train"
        expected = {f"{r['filename'][:-4]}_{k}.pgm" for r in _rows(split / "labels.csv")
                    for k in range(2) if r[f"label_{k + 1}"] == "1"}
        assert {p.name for p in (split / "masks").iterdir()} == expected

    def test_refuses_non_empty_without_force(self, workdir, capsys):
        args = ["gen", "--config", str(workdir / "tiny.txt"), "--out", str(workdir / "data")]
        assert cli.main(args) == 1
        assert "--force" in capsys.readouterr().err

    def test_force_overwrites(self, tmp_path):
        (tmp_path / "tiny.txt").write_text(TINY)
        out = tmp_path / "d"
        out.mkdir()
        (out / "stale.txt").write_text("x")
        assert cli.main(["gen", "--config", str(tmp_path / "tiny.txt"), "--out", str(out), "--force"]) == 0
        assert (out / "train" / "labels.csv").is_file()


class TestTrain:
    def test_outputs(self, workdir):
        run = workdir / "run"
        rows = _rows(run / "history.csv")
        assert list(rows[0]) == ["epoch", "train_loss", "val_mean_auc", "r_eff", "wall_time"]
        assert len(rows) == 1
        assert float(rows[0]["r_eff"]) == pytest.approx(5.0 + np.exp(0.0))
        assert (run / "checkpoint.bin").is_file()
        assert "r0 = 5.0" in (run / "config.txt").read_text()

    def test_resolved_config_reproduces_run(self, workdir):
        again = workdir / "run_again"
        assert cli.main(["train", "--config", str(workdir / "run" / "config.txt"), "--out", str(again)]) == 0
        for name in ("history.csv", "checkpoint.bin"):
            assert (again / name).read_bytes() == (workdir / "run" / name).read_bytes()
        assert _without_out(again / "config.txt") == _without_out(workdir / "run" / "config.txt")

    def test_beta_init_sets_first_r_eff(self, workdir):
        out = workdir / "run_beta"
        assert cli.main(["train", "--config", str(workdir / "tiny.txt"), "--data", str(workdir / "data"),
                         "--set", "beta_init=1.5", "--set", "r0=10", "--out", str(out)]) == 0
        assert float(_rows(out / "history.csv")[0]["r_eff"]) == pytest.approx(10 + np.exp(1.5))

    def test_in_memory_synthetic_data(self, tmp_path):
        (tmp_path / "tiny.txt").write_text(TINY)
        assert cli.main(["train", "--config", str(tmp_path / "tiny.txt"), "--out", str(tmp_path / "r")]) == 0

    def test_missing_data_dir_rejected_before_compute(self, workdir, capsys):
        assert cli.main(["train", "--data", str(workdir / "nope"), "--out", str(workdir / "x")]) == 1
        assert "data directory not found" in capsys.readouterr().err
        assert not (workdir / "x").exists()

    def test_unknown_key_rejected(self, workdir, capsys):
        assert cli.main(["train", "--set", "learning_rate=1", "--out", str(workdir / "x")]) == 1
        assert "unknown config key" in capsys.readouterr().err

    def test_divergence_exit_code(self, workdir, monkeypatch, capsys):
        def boom(*args, **kwargs):
            raise TrainingDiverged(3, 7, [6.0])

        monkeypatch.setattr(cli, "train", boom)
        code = cli.main(["train", "--config", str(workdir / "tiny.txt"), "--data", str(workdir / "data"),
                         "--out", str(workdir / "diverged")])
        assert code == 2
        assert "epoch 3, batch 7" in capsys.readouterr().err


@pytest.fixture(scope="module")
def evaluated(workdir):
    out = workdir / "eval"
    code = cli.main(["eval", "--config", str(workdir / "tiny.txt"), "--data", str(workdir / "data" / "test"),
                     "--checkpoint", str(workdir / "run" / "checkpoint.bin"), "--tau", "0.1,0.4,0.8",
                     "--out", str(out)])
    assert code == 0
    return out


class TestEval:
    def test_iobb_rows_for_requested_taus(self, evaluated):
        taus = {r["parameter"].split(";")[0] for r in _rows(evaluated / "metrics.csv")
                if r["metric"] == "iobb_accuracy"}
        assert taus == {"tau=0.1", "tau=0.4", "tau=0.8"}

    def test_saliency_files(self, evaluated, workdir):
        names = [r["filename"][:-4] for r in _rows(workdir / "data" / "test" / "labels.csv")]
        expected = {f"{n}_{c}.pgm" for n in names for c in ("focal", "diffuse")}
        assert {p.name for p in (evaluated / "saliency").iterdir()} == expected

    def test_exported_saliency_repools_to_predictions(self, evaluated, workdir):
        model = checkpoint.load(workdir / "run" / "checkpoint.bin")
        beta = float(model.beta.data[0])
        for row in _rows(evaluated / "predictions.csv"):
            for name in ("focal", "diffuse"):
                S = read_gray(evaluated / "saliency" / f"{row['sample']}_{name}.pgm")
                p = pool_lse_lba(S, model.config.r0, beta).p
                assert abs(p - float(row[f"p_{name}"])) <= 1 / 255

    def test_single_class_dataset(self, workdir, tmp_path, capsys):
        src = workdir / "data" / "train"
        rows = _rows(src / "labels.csv")
        keep = next(r for r in rows if r["label_1"] == "1")
        dst = tmp_path / "one"
        (dst / "images").mkdir(parents=True)
        (dst / "masks").mkdir()
        shutil.copy(src / "images" / keep["filename"], dst / "images")
        for m in (src / "masks").glob(f"{keep['filename'][:-4]}_*.pgm"):
            shutil.copy(m, dst / "masks")
        with open(dst / "labels.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(keep), lineterminator="\n")
            w.writeheader()
            w.writerow(keep)
        code = cli.main(["eval", "--data", str(dst), "--checkpoint", str(workdir / "run" / "checkpoint.bin"),
                         "--out", str(tmp_path / "ev")])
        assert code == 0
        assert "AUC not computed for class 'focal'" in capsys.readouterr().err
        metrics = {(r["class"], r["metric"]) for r in _rows(tmp_path / "ev" / "metrics.csv")}
        assert ("focal", "dice") in metrics and ("focal", "auc") not in metrics

    def test_class_count_mismatch(self, workdir, tmp_path, capsys):
        d = tmp_path / "k3"
        (d / "images").mkdir(parents=True)
        src = workdir / "data" / "test"
        first = _rows(src / "labels.csv")[0]["filename"]
        shutil.copy(src / "images" / first, d / "images")
        (d / "labels.csv").write_text(f"filename,label_1,label_2,label_3\n{first},1,0,1\n")
        code = cli.main(["eval", "--data", str(d), "--checkpoint", str(workdir / "run" / "checkpoint.bin"),
                         "--out", str(tmp_path / "ev")])
        assert code == 1
        assert "classes" in capsys.readouterr().err

    def test_missing_checkpoint(self, workdir, tmp_path):
        assert cli.main(["eval", "--data", str(workdir / "data"), "--checkpoint", str(tmp_path / "none.bin"),
                         "--out", str(tmp_path / "ev")]) == 1


class TestGradcheck:
    def test_passes_and_lists_every_op_once(self, capsys):
        assert cli.main(["gradcheck", "--seeds", "1"]) == 0
        lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith(("PASS", "FAIL"))]
        ops = [l.split()[1] for l in lines]
        assert len(ops) == len(set(ops))
        assert set(ops) >= set(cli.gradcheck.OPS) | {"pool_lse_lba", "model_end_to_end"}

    def test_corrupted_op_fails(self, capsys):
        assert cli.main(["gradcheck", "--seeds", "1", "--corrupt", "avg_pool2x2"]) == 2
        captured = capsys.readouterr()
        assert "FAIL avg_pool2x2" in captured.out
        assert "avg_pool2x2" in captured.err


class TestSweep:
    def test_one_group_per_r0(self, workdir, capsys):
        out = workdir / "sweep"
        code = cli.main(["sweep-r0", "--config", str(workdir / "tiny.txt"), "--data", str(workdir / "data"),
                         "--r0", "0,10", "--jobs", "2", "--out", str(out)])
        assert code == 0
        rows = _rows(out / "sweep.csv")
        assert [(r["r0"], r["class"]) for r in rows] == [("0.0", "focal"), ("0.0", "diffuse"),
                                                         ("10.0", "focal"), ("10.0", "diffuse")]
        assert (out / "r0_0" / "history.csv").is_file() and (out / "r0_10" / "checkpoint.bin").is_file()
        assert "r0=10 focal" in capsys.readouterr().out

    def test_parallel_matches_serial(self, workdir):
        args = ["sweep-r0", "--config", str(workdir / "tiny.txt"), "--data", str(workdir / "data"), "--r0", "0,10"]
        assert cli.main(args + ["--out", str(workdir / "sweep_serial")]) == 0
        assert (workdir / "sweep_serial" / "sweep.csv").read_bytes() == (workdir / "sweep" / "sweep.csv").read_bytes()
