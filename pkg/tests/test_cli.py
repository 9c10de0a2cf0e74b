import json

import jsonschema
import pytest

from vsanet.cli import main
from vsanet.evaluation import report_schema

CONFIG = {"image_size": 32, "width_divisor": 16, "latent_dim": 16, "batch_size": 2, "iterations": 3}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, dict(line.split("\t", 1) for line in out.out.splitlines()), out


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Corpus plus both stage checkpoints, produced through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.json").write_text(json.dumps(CONFIG))
    assert main(["synth-data", "--subjects", "6", "--per-subject", "6", "--seed", "3",
                 "--out", str(root / "data"), "--image-size", "32"]) == 0
    manifest = root / "data" / "manifest.csv"
    assert main(["train", "--stage", "svae", "--config", str(root / "cfg.json"), "--manifest", str(manifest),
                 "--out", str(root / "svae.vsan")]) == 0
    assert main(["train", "--stage", "translation", "--config", str(root / "cfg.json"),
                 "--manifest", str(manifest), "--svae-ckpt", str(root / "svae.vsan"),
                 "--out", str(root / "trans.vsan")]) == 0
    return root


class TestSynthData:
    def test_writes_corpus(self, capsys, tmp_path):
        code, out, _ = run(capsys, "synth-data", "--subjects", 16, "--per-subject", 12, "--seed", 3,
                           "--out", tmp_path, "--image-size", 32)
        assert code == 0
        assert out["images"] == "192"
        assert (tmp_path / "manifest.csv").exists()
        assert len(list((tmp_path / "images").glob("*.png"))) == 192

    def test_missing_out(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["synth-data", "--subjects", "4", "--per-subject", "4"])
        assert exc.value.code == 1

    def test_one_subject(self, capsys, tmp_path):
        code, _, err = run(capsys, "synth-data", "--subjects", 1, "--per-subject", 4, "--out", tmp_path)
        assert code == 1 and "error" in err.err

    def test_env_seed(self, capsys, tmp_path, monkeypatch):
        args = ("synth-data", "--subjects", 2, "--per-subject", 2, "--image-size", 32)
        monkeypatch.setenv("VSANET_SEED", "11")
        run(capsys, *args, "--out", tmp_path / "env")
        run(capsys, *args, "--out", tmp_path / "flag", "--seed", 11)
        run(capsys, *args, "--out", tmp_path / "other", "--seed", 12)
        a, b, c = ((tmp_path / d / "manifest.csv").read_bytes() for d in ("env", "flag", "other"))
        imgs = [sorted(p.read_bytes() for p in (tmp_path / d / "images").iterdir())
                for d in ("env", "flag", "other")]
        assert a == b and imgs[0] == imgs[1] and imgs[0] != imgs[2]

    def test_bad_env_seed(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("VSANET_SEED", "seven")
        code, _, _ = run(capsys, "synth-data", "--subjects", 2, "--per-subject", 2, "--out", tmp_path)
        assert code == 1


class TestTrain:
    def test_checkpoints_and_logs(self, workdir):
        for name in ("svae", "trans"):
            assert (workdir / f"{name}.vsan").stat().st_size > 0
            rows = (workdir / f"{name}.ndjson").read_text().splitlines()
            assert len(rows) == CONFIG["iterations"]

    def test_translation_needs_svae(self, capsys, workdir, tmp_path):
        code, _, err = run(capsys, "train", "--stage", "translation", "--manifest",
                           workdir / "data" / "manifest.csv", "--out", tmp_path / "t.vsan")
        assert code == 1 and "--svae-ckpt" in err.err

    def test_reproducible_log(self, capsys, workdir, tmp_path):
        code, out, _ = run(capsys, "train", "--stage", "svae", "--config", workdir / "cfg.json",
                           "--manifest", workdir / "data" / "manifest.csv", "--out", tmp_path / "s.vsan",
                           "--plot", tmp_path / "loss.png")
        assert code == 0 and out["iterations"] == "3"
        assert (tmp_path / "s.ndjson").read_bytes() == (workdir / "svae.ndjson").read_bytes()
        assert (tmp_path / "s.vsan").read_bytes() == (workdir / "svae.vsan").read_bytes()
        assert (tmp_path / "loss.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_seed_flag_beats_env(self, capsys, workdir, tmp_path, monkeypatch):
        common = ("train", "--stage", "svae", "--config", workdir / "cfg.json",
                  "--manifest", workdir / "data" / "manifest.csv")
        monkeypatch.setenv("VSANET_SEED", "5")
        run(capsys, *common, "--out", tmp_path / "env.vsan")
        run(capsys, *common, "--out", tmp_path / "flag.vsan", "--seed", 0)
        assert (tmp_path / "flag.ndjson").read_bytes() == (workdir / "svae.ndjson").read_bytes()
        assert (tmp_path / "env.ndjson").read_bytes() != (workdir / "svae.ndjson").read_bytes()

    def test_invalid_config(self, capsys, workdir, tmp_path):
        (tmp_path / "bad.json").write_text(json.dumps({"image_size": 30}))
        code, _, _ = run(capsys, "train", "--stage", "svae", "--config", tmp_path / "bad.json",
                         "--manifest", workdir / "data" / "manifest.csv", "--out", tmp_path / "s.vsan")
        assert code == 1

    def test_divergence_is_runtime_failure(self, capsys, workdir, tmp_path):
        (tmp_path / "hot.json").write_text(json.dumps({**CONFIG, "lr": 1e30, "iterations": 10}))
        code, _, err = run(capsys, "train", "--stage", "svae", "--config", tmp_path / "hot.json",
                           "--manifest", workdir / "data" / "manifest.csv", "--out", tmp_path / "s.vsan")
        assert code == 2 and "TrainingError" in err.err


def images(workdir, spectrum, n):
    rows = (workdir / "data" / "manifest.csv").read_text().splitlines()[1:]
    paths = [workdir / "data" / r.split(",")[0] for r in rows if r.split(",")[2] == spectrum]
    return paths[:n]


class TestTranslate:
    def test_exemplar_grid(self, capsys, workdir, tmp_path):
        nir, vis = images(workdir, "NIR", 3), images(workdir, "VIS", 3)
        code, _, out = run(capsys, "translate", "--ckpt", workdir / "trans.vsan", "--input", *nir,
                           "--mode", "exemplar", "--exemplar", *vis, "--out", tmp_path)
        assert code == 0
        outputs = [line.split("\t")[1] for line in out.out.splitlines() if line.startswith("output")]
        assert len(outputs) == 9
        assert (tmp_path / "grid.png").exists()
        assert outputs[1].endswith(f"{nir[0].stem}__{vis[1].stem}.png")

    def test_exemplar_needs_exemplar(self, capsys, workdir, tmp_path):
        code, _, _ = run(capsys, "translate", "--ckpt", workdir / "trans.vsan",
                         "--input", *images(workdir, "NIR", 1), "--mode", "exemplar", "--out", tmp_path)
        assert code == 1

    def test_prior_mode(self, capsys, workdir, tmp_path):
        code, _, out = run(capsys, "translate", "--ckpt", workdir / "trans.vsan",
                           "--input", *images(workdir, "NIR", 2), "--mode", "prior", "--out", tmp_path)
        assert code == 0
        assert len(list(tmp_path.glob("*__prior.png"))) == 2

    def test_idempotent(self, capsys, workdir, tmp_path):
        args = ("translate", "--ckpt", workdir / "trans.vsan", "--input", *images(workdir, "NIR", 2),
                "--exemplar", *images(workdir, "VIS", 2))
        run(capsys, *args, "--out", tmp_path / "a")
        run(capsys, *args, "--out", tmp_path / "b")
        for p in (tmp_path / "a").iterdir():
            assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes(), p.name

    def test_stage1_checkpoint_rejected(self, capsys, workdir, tmp_path):
        code, _, _ = run(capsys, "translate", "--ckpt", workdir / "svae.vsan", "--mode", "prior",
                         "--input", *images(workdir, "NIR", 1), "--out", tmp_path)
        assert code == 1


class TestEvaluate:
    def test_with_checkpoint(self, capsys, workdir, tmp_path):
        code, out, _ = run(capsys, "evaluate", "--manifest", workdir / "data" / "manifest.csv",
                           "--ckpt", workdir / "trans.vsan", "--report", tmp_path / "r.json",
                           "--scores", tmp_path / "scores.csv", "--figures", tmp_path / "fig")
        assert code == 0
        report = json.loads((tmp_path / "r.json").read_text())
        jsonschema.validate(report, report_schema())
        assert {"raw_nir", "translated"} <= set(report)
        assert float(out["translated.rank1"]) == pytest.approx(report["translated"]["rank1"], abs=1e-6)
        assert (tmp_path / "scores_translated.csv").exists()
        assert sorted(p.name for p in (tmp_path / "fig").iterdir()) == ["scores_raw_nir.png",
                                                                          "scores_translated.png"]

    def test_without_checkpoint(self, capsys, workdir, tmp_path):
        code, out, _ = run(capsys, "evaluate", "--manifest", workdir / "data" / "manifest.csv",
                           "--image-size", 32, "--report", tmp_path / "r.json")
        assert code == 0
        report = json.loads((tmp_path / "r.json").read_text())
        jsonschema.validate(report, report_schema())
        assert "translated" not in report and "raw_nir.rank1" in out

    def test_idempotent(self, capsys, workdir, tmp_path):
        args = ("evaluate", "--manifest", workdir / "data" / "manifest.csv", "--ckpt", workdir / "trans.vsan")
        run(capsys, *args, "--report", tmp_path / "a.json", "--figures", tmp_path / "fa")
        run(capsys, *args, "--report", tmp_path / "b.json", "--figures", tmp_path / "fb")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        for name in ("scores_raw_nir.png", "scores_translated.png"):
            assert (tmp_path / "fa" / name).read_bytes() == (tmp_path / "fb" / name).read_bytes()

    def test_missing_manifest(self, capsys, tmp_path):
        code, _, _ = run(capsys, "evaluate", "--manifest", tmp_path / "nope.csv", "--report", tmp_path / "r.json")
        assert code == 2
