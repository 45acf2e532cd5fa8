import csv
import filecmp

import pytest

from fusionbooster.cli import EXIT_FAILED, EXIT_NO_DATA, EXIT_OK, main, read_config
from fusionbooster.imaging import load_image, read_manifest

TINY = ["--epochs", "2", "--patch", "16", "--patches-per-pair", "2", "--lr", "1e-3"]


def run(*argv):
    return main([str(a) for a in argv])


def snapshot(directory):
    lines = (directory / "run_config.txt").read_text().splitlines()
    return dict(line.split("=", 1) for line in lines if "=" in line and not line.startswith("#"))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--scenario", "modality", "--pairs", 3, "--size", "64x64", "--seed", 4,
               "--out", root / "pairs") == EXIT_OK
    assert run("fuse", "--manifest", root / "pairs" / "manifest.tsv", "--out", root / "fused") == EXIT_OK
    assert run("train", "--manifest", root / "fused" / "manifest.tsv", "--out", root / "model" / "m.fbst",
               *TINY) in (EXIT_OK, EXIT_FAILED)
    return root


class TestSynth:
    def test_counts(self, dataset):
        files = sorted(p.name for p in (dataset / "pairs").glob("*.pgm"))
        assert len(files) == 6
        assert read_manifest(dataset / "pairs" / "manifest.tsv").ids() == ["pair_0000", "pair_0001", "pair_0002"]

    def test_same_seed_identical(self, tmp_path):
        for name in ("x", "y"):
            assert run("synth", "--scenario", "focus", "--pairs", 2, "--size", "64x64", "--seed", 9,
                       "--out", tmp_path / name) == EXIT_OK
        cmp = filecmp.dircmp(tmp_path / "x", tmp_path / "y")
        assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
        for f in cmp.common_files:
            assert (tmp_path / "x" / f).read_bytes() == (tmp_path / "y" / f).read_bytes()

    def test_bad_scenario(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            run("synth", "--scenario", "thermal", "--out", tmp_path)
        assert exc.value.code == 2
        assert "exposure, focus, modality" in capsys.readouterr().err

    def test_refuses_non_empty(self, dataset):
        with pytest.raises(SystemExit) as exc:
            run("synth", "--scenario", "modality", "--out", dataset / "pairs")
        assert exc.value.code == 2

    def test_snapshot(self, dataset):
        snap = snapshot(dataset / "pairs")
        assert snap["command"] == "synth" and snap["seed"] == "4" and "version" in snap


class TestFuse:
    def test_degrade_identity(self, dataset, tmp_path):
        assert run("fuse", "--manifest", dataset / "pairs" / "manifest.tsv", "--degrade", "0,0,1",
                   "--out", tmp_path / "d") == EXIT_OK
        for f in (dataset / "fused").glob("pair_*.pgm"):
            assert f.read_bytes() == (tmp_path / "d" / f.name).read_bytes()

    def test_pyramid_one_level_is_mean(self, dataset, tmp_path):
        assert run("fuse", "--manifest", dataset / "pairs" / "manifest.tsv", "--backbone", "pyramid:1",
                   "--out", tmp_path / "p") == EXIT_OK
        for f in (dataset / "fused").glob("pair_*.pgm"):
            assert f.read_bytes() == (tmp_path / "p" / f.name).read_bytes()

    def test_mean_of_identical_pair(self, tmp_path):
        from fusionbooster.imaging import synth_pair, save_image
        a, _ = synth_pair(1, "modality", 64, 64)
        save_image(a, tmp_path / "a.pgm")
        (tmp_path / "m.tsv").write_text("same\ta.pgm\ta.pgm\n")
        assert run("fuse", "--manifest", tmp_path / "m.tsv", "--out", tmp_path / "o") == EXIT_OK
        assert (tmp_path / "o" / "same.pgm").read_bytes() == (tmp_path / "a.pgm").read_bytes()

    def test_external_without_fused(self, dataset, tmp_path, capsys):
        code = run("fuse", "--manifest", dataset / "pairs" / "manifest.tsv", "--backbone", "external",
                   "--out", tmp_path / "e")
        assert code == EXIT_FAILED
        assert "pair_0000" in capsys.readouterr().err

    def test_unknown_config_key(self, dataset, tmp_path):
        (tmp_path / "c.cfg").write_text("# comment\nbackbone=max\ncolour=blue\n")
        with pytest.raises(SystemExit) as exc:
            run("fuse", "--config", tmp_path / "c.cfg", "--manifest", dataset / "pairs" / "manifest.tsv",
                "--out", tmp_path / "o")
        assert exc.value.code == 2

    def test_flag_overrides_config(self, dataset, tmp_path):
        (tmp_path / "c.cfg").write_text("backbone=max\n")
        assert run("fuse", "--config", tmp_path / "c.cfg", "--backbone", "mean",
                   "--manifest", dataset / "pairs" / "manifest.tsv", "--out", tmp_path / "o") == EXIT_OK
        assert snapshot(tmp_path / "o")["backbone"] == "mean"

    def test_read_config(self, tmp_path):
        (tmp_path / "c.cfg").write_text("# x\n\npatches-per-pair = 3\n")
        assert read_config(tmp_path / "c.cfg") == {"patches_per_pair": "3"}


class TestTrain:
    def test_outputs(self, dataset):
        assert (dataset / "model" / "m.fbst").exists()
        with open(dataset / "model" / "m_losses.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["phase"] for r in rows] == ["probe", "probe", "ase", "ase"]
        assert snapshot(dataset / "model")["epochs"] == "2"

    def test_default_hyperparameters(self, tmp_path, dataset, monkeypatch):
        # intercept training so only flag resolution is exercised
        import fusionbooster.cli as cli
        seen = {}

        def fake(triples, cfg, log=None):
            seen["cfg"] = cfg
            raise cli.ContractError("stop")

        monkeypatch.setattr(cli, "train_probe", fake)
        assert run("train", "--manifest", dataset / "fused" / "manifest.tsv", "--out", tmp_path / "m.fbst") \
            == EXIT_FAILED
        cfg = seen["cfg"]
        assert (cfg.k, cfg.epochs, cfg.batch, cfg.lr, cfg.patch) == (3, 10, 2, 1e-4, 128)

    def test_same_seed_same_checkpoint(self, dataset, tmp_path):
        run("train", "--manifest", dataset / "fused" / "manifest.tsv", "--out", tmp_path / "again.fbst", *TINY)
        assert (tmp_path / "again.fbst").read_bytes() == (dataset / "model" / "m.fbst").read_bytes()

    def test_missing_fused_column(self, dataset, tmp_path):
        assert run("train", "--manifest", dataset / "pairs" / "manifest.tsv", "--out", tmp_path / "x.fbst",
                   *TINY) == EXIT_FAILED


@pytest.fixture(scope="module")
def boosted(dataset):
    out = dataset / "boosted"
    assert run("boost", "--ckpt", dataset / "model" / "m.fbst", "--manifest",
               dataset / "fused" / "manifest.tsv", "--out", out) == EXIT_OK
    return out


class TestBoostAndEval:
    def test_count_and_timing(self, boosted, capsys):
        assert len(list(boosted.glob("pair_*.pgm"))) == 3
        with open(boosted / "timing.csv") as fh:
            times = [float(r["boost_time"]) for r in csv.DictReader(fh)]
        assert len(times) == 3 and all(t > 0 for t in times)

    def test_total_time_line(self, dataset, tmp_path, capsys):
        run("boost", "--ckpt", dataset / "model" / "m.fbst", "--manifest", dataset / "fused" / "manifest.tsv",
            "--out", tmp_path / "b", "--k", 0)
        assert "total_added_time=+" in capsys.readouterr().out

    def test_bad_checkpoint_writes_nothing(self, dataset, tmp_path):
        (tmp_path / "bad.fbst").write_bytes(b"nope")
        assert run("boost", "--ckpt", tmp_path / "bad.fbst", "--manifest", dataset / "fused" / "manifest.tsv",
                   "--out", tmp_path / "o") == EXIT_FAILED
        assert not (tmp_path / "o").exists()

    def test_eval_identical_dirs(self, dataset, tmp_path):
        fused = dataset / "fused"
        assert run("eval", "--manifest", fused / "manifest.tsv", "--fused", fused, "--boosted", fused,
                   "--out", tmp_path) == EXIT_OK
        with open(tmp_path / "delta.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["id", "en", "sd", "ei", "qabf", "vif"]
        assert all(float(v) == 0 for r in rows[1:-1] for v in r[1:])

    def test_eval_boosted(self, dataset, boosted, tmp_path, capsys):
        assert run("eval", "--manifest", dataset / "fused" / "manifest.tsv", "--fused", dataset / "fused",
                   "--boosted", boosted, "--out", tmp_path) == EXIT_OK
        out = capsys.readouterr().out
        assert "en_improved=" in out and "status=ok" in out
        assert (tmp_path / "metrics_boosted.csv").exists()

    def test_eval_failed_row(self, dataset, tmp_path):
        assert run("eval", "--manifest", dataset / "pairs" / "manifest.tsv", "--fused", tmp_path / "none",
                   "--out", tmp_path / "r") == EXIT_FAILED

    def test_eval_empty(self, tmp_path):
        (tmp_path / "m.tsv").write_text("# nothing\n")
        assert run("eval", "--manifest", tmp_path / "m.tsv", "--out", tmp_path / "r") == EXIT_NO_DATA


class TestAblateAndStudy:
    def test_bad_mode(self, dataset, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("ablate", "--mode", "e", "--manifest", dataset / "fused" / "manifest.tsv", "--out", tmp_path)
        assert exc.value.code == 2

    @pytest.mark.parametrize("mode", ["a", "b", "full"])
    def test_modes(self, dataset, tmp_path, mode):
        extra = ["--ckpt", dataset / "model" / "m.fbst"] if mode == "full" else []
        assert run("ablate", "--mode", mode, "--manifest", dataset / "fused" / "manifest.tsv",
                   "--out", tmp_path / mode, *extra) == EXIT_OK
        assert len(list((tmp_path / mode).glob("pair_*.pgm"))) == 3
        assert (tmp_path / mode / f"metrics_{mode}.csv").exists()

    def test_source_ase_mode(self, dataset, tmp_path):
        assert run("ablate", "--mode", "c", "--manifest", dataset / "fused" / "manifest.tsv",
                   "--out", tmp_path / "c", *TINY) == EXIT_OK

    def test_degradation_study(self, dataset, tmp_path, capsys):
        assert run("degradation-study", "--ckpt", dataset / "model" / "m.fbst", "--manifest",
                   dataset / "fused" / "manifest.tsv", "--levels", "0,0.05,0.1,0.2,0.3",
                   "--out", tmp_path) == EXIT_OK
        with open(tmp_path / "degradation.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 5
        assert "spearman=" in capsys.readouterr().out


def test_loaded_outputs_are_images(dataset):
    img = load_image(dataset / "fused" / "pair_0000.pgm")
    assert img.shape == (64, 64)
