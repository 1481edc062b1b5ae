"""End-to-end CLI runs at miniature scale, exit codes, and output determinism."""

import numpy as np
import pytest

from ognet.cli import main
from ognet.data import load_manifest, read_image_u8

MINI_NET = """
# two-layer miniature network
stages = 4x1, 4x1
decoder = 4:4:8:8, 4:4:8:8
attention = ogam
residual = true
conv_e_size = 3
initial_lr = 0.05
max_iter = 12
batch_size = 2
size = 16
seed = 3
"""


@pytest.fixture()
def config_file(tmp_path):
    path = tmp_path / "mini.cfg"
    path.write_text(MINI_NET)
    return str(path)


@pytest.fixture()
def dataset(tmp_path):
    out = tmp_path / "data"
    assert main(["synth", "--count", "6", "--size", "16", "--seed", "5",
                 "--out", str(out)]) == 0
    return out / "manifest.tsv"


def run_ok(argv):
    assert main(argv) == 0


class TestSynth:
    def test_creates_dataset(self, tmp_path):
        out = tmp_path / "ds"
        run_ok(["synth", "--count", "4", "--size", "32", "--seed", "1", "--out", str(out)])
        manifest = load_manifest(out / "manifest.tsv")
        assert len(manifest) == 4

    def test_deterministic_bytes(self, tmp_path):
        for name in ("a", "b"):
            run_ok(["synth", "--count", "3", "--size", "16", "--seed", "9",
                    "--out", str(tmp_path / name)])
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


class TestPipelineCommands:
    def test_full_flow(self, tmp_path, config_file, dataset):
        s1 = tmp_path / "s1"
        run_ok(["train-stage1", "--manifest", str(dataset), "--config", config_file,
                "--out", str(s1)])
        ckpt1 = s1 / "stage1.ckpt"
        assert ckpt1.is_file() and (s1 / "stage1_log.csv").is_file()

        masks = tmp_path / "masks"
        run_ok(["gen-diffmaps", "--manifest", str(dataset), "--checkpoint", str(ckpt1),
                "--config", config_file, "--size", "16", "--out", str(masks)])
        masked_manifest = masks / "manifest_masks.tsv"
        entries = load_manifest(masked_manifest)
        assert all(e.mask_path is not None for e in entries)

        s2 = tmp_path / "s2"
        run_ok(["train-stage2", "--manifest", str(masked_manifest), "--config", config_file,
                "--out", str(s2)])
        final = s2 / "final.ckpt"
        assert final.is_file()
        log_header = (s2 / "stage2_log.csv").read_text().splitlines()[0]
        assert log_header == "iter,lr,side1,side2,iaf,total"

        maps = tmp_path / "maps"
        run_ok(["infer", "--manifest", str(dataset), "--checkpoint", str(final),
                "--size", "16", "--out", str(maps)])
        names = {e.name for e in load_manifest(dataset)}
        produced = {p.stem for p in maps.glob("*.png")}
        assert produced == names
        one = read_image_u8(next(iter(maps.glob("*.png"))))
        assert one.dtype == np.uint8 and one.shape == (16, 16)

        ev = tmp_path / "ev"
        run_ok(["eval", "--manifest", str(dataset), "--checkpoint", str(final),
                "--size", "16", "--out", str(ev)])
        assert (ev / "eval.csv").is_file() and (ev / "curves.csv").is_file()

        ev2 = tmp_path / "ev2"
        run_ok(["eval", "--manifest", str(dataset), "--maps", str(maps),
                "--size", "16", "--out", str(ev2)])
        live = (ev / "eval.csv").read_text()
        from_maps = (ev2 / "eval.csv").read_text()
        assert live == from_maps

    def test_train_determinism(self, tmp_path, config_file, dataset):
        for name in ("r1", "r2"):
            run_ok(["train-stage1", "--manifest", str(dataset), "--config", config_file,
                    "--out", str(tmp_path / name)])
        assert ((tmp_path / "r1" / "stage1.ckpt").read_bytes()
                == (tmp_path / "r2" / "stage1.ckpt").read_bytes())
        assert ((tmp_path / "r1" / "stage1_log.csv").read_text()
                == (tmp_path / "r2" / "stage1_log.csv").read_text())


class TestAblate:
    def test_attention_grid(self, tmp_path, config_file, dataset):
        out = tmp_path / "ab"
        run_ok(["ablate", "--manifest", str(dataset), "--config", config_file,
                "--attention", "none,se,cbam,ogam", "--iters", "6", "--out", str(out)])
        lines = (out / "ablation.csv").read_text().splitlines()
        assert lines[0] == "variant,dataset,mae,f,s"
        assert len(lines) == 5
        variants = [line.split(",")[0] for line in lines[1:]]
        assert variants == ["none-e3", "se-e3", "cbam-e3", "ogam-e3"]
        for v in variants:
            assert (out / f"train_{v}.csv").is_file()

    def test_conv_e_sweep(self, tmp_path, config_file, dataset):
        out = tmp_path / "sweep"
        run_ok(["ablate", "--manifest", str(dataset), "--config", config_file,
                "--attention", "ogam", "--conv-e-size", "1,3,5,7", "--iters", "4",
                "--out", str(out)])
        lines = (out / "ablation.csv").read_text().splitlines()
        assert [line.split(",")[0] for line in lines[1:]] == [
            "ogam-e1", "ogam-e3", "ogam-e5", "ogam-e7"]

    def test_ablate_deterministic(self, tmp_path, config_file, dataset):
        for name in ("x", "y"):
            run_ok(["ablate", "--manifest", str(dataset), "--config", config_file,
                    "--attention", "se", "--iters", "4", "--out", str(tmp_path / name)])
        assert ((tmp_path / "x" / "ablation.csv").read_text()
                == (tmp_path / "y" / "ablation.csv").read_text())
        assert ((tmp_path / "x" / "se-e3.ckpt").read_bytes()
                == (tmp_path / "y" / "se-e3.ckpt").read_bytes())


class TestFailureModes:
    def test_missing_manifest_nonzero_and_clean(self, tmp_path, config_file, capsys):
        out = tmp_path / "never"
        rc = main(["train-stage1", "--manifest", str(tmp_path / "ghost.tsv"),
                   "--config", config_file, "--out", str(out)])
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("ognet: error:") and err.count("\n") == 1
        assert not out.exists()

    def test_bad_checkpoint_cleaned_up(self, tmp_path, dataset, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint at all")
        out = tmp_path / "maps"
        rc = main(["infer", "--manifest", str(dataset), "--checkpoint", str(bad),
                   "--out", str(out)])
        assert rc == 1
        assert not out.exists()
        assert capsys.readouterr().err.startswith("ognet: error:")

    def test_eval_requires_one_source(self, tmp_path, dataset, capsys):
        rc = main(["eval", "--manifest", str(dataset), "--out", str(tmp_path / "e")])
        assert rc == 1
        assert "exactly one" in capsys.readouterr().err

    def test_partial_outputs_removed_midway(self, tmp_path, config_file, dataset, capsys):
        # second command writes into a dir that already has unrelated content;
        # only the new partial outputs must be removed
        out = tmp_path / "mix"
        out.mkdir()
        keep = out / "keep.txt"
        keep.write_text("precious")
        rc = main(["eval", "--manifest", str(dataset), "--maps", str(tmp_path / "nomaps"),
                   "--size", "16", "--out", str(out)])
        assert rc == 1
        assert keep.read_text() == "precious"
        assert list(out.iterdir()) == [keep]
