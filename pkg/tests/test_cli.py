import json

import pytest

from haltpred.cli import main
from haltpred.corpus import Corpus
from haltpred.model import ModelConfig, init_model, save_checkpoint

TINY_FLAGS = ["--d-model", "8", "--n-heads", "2", "--n-layers", "1", "--d-ff", "16", "--max-len", "64"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def corpus_path(workdir):
    path = workdir / "c.jsonl"
    assert main(["gen", "--size", "100", "--ratio", "0.05", "--seed", "7", "--out", str(path), "--quiet"]) == 0
    return path


@pytest.fixture(scope="module")
def checkpoints(workdir):
    paths = []
    for s in range(2):
        p = workdir / f"m{s}.best.json"
        save_checkpoint(init_model(ModelConfig(d_model=8, n_heads=2, n_layers=1, d_ff=16, max_len=64, seed=s)), p)
        paths.append(p)
    return paths


def write_spec(path, kind, members):
    path.write_text(json.dumps({"kind": kind, "members": members}))
    return path


class TestGen:
    def test_counts_and_manifest(self, tmp_path, capsys):
        out = tmp_path / "c.jsonl"
        code, stdout, _ = run(capsys, "gen", "--size", "100", "--ratio", "0.02", "--seed", "7", "--out", str(out))
        assert code == 0
        header = json.loads(out.read_text().splitlines()[0])
        assert (header["n0"], header["n1"]) == (98, 2)
        manifest = json.loads((tmp_path / "c.jsonl.manifest.json").read_text())
        assert str(out) in manifest["outputs"] and manifest["seeds"]["seed"] == 7
        assert json.loads(stdout)["n1"] == 2

    def test_byte_identical(self, tmp_path, capsys):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for p in (a, b):
            run(capsys, "gen", "--size", "60", "--ratio", "0.05", "--seed", "3", "--out", str(p))
        assert a.read_bytes() == b.read_bytes()

    def test_bad_ratio(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen", "--size", "100", "--ratio", "0.6", "--out", str(tmp_path / "x.jsonl"))
        assert code == 2 and "minority_ratio must be < 0.5" in err

    def test_unknown_flag(self, tmp_path, capsys):
        code, _, _ = run(capsys, "gen", "--sizes", "100", "--out", str(tmp_path / "x.jsonl"))
        assert code == 2

    def test_config_file_and_flag_precedence(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"size": 50, "ratio": 0.1, "seed": 2}))
        out = tmp_path / "c.jsonl"
        run(capsys, "gen", "--config", str(cfg), "--size", "40", "--out", str(out))
        corpus = Corpus.load(out)
        assert len(corpus) == 40 and corpus.n1 == 4 and corpus.seed == 2


class TestTrain:
    def test_config_echo(self, workdir, corpus_path, capsys):
        prefix = workdir / "focal"
        code, stdout, _ = run(
            capsys, "train", "--corpus", str(corpus_path), "--loss", "focal", "--gamma", "2.0", "--cas",
            "--max-epochs", "1", "--batch-size", "16", "--out", str(prefix), "--quiet", *TINY_FLAGS,
        )
        assert code == 0
        report = json.loads((workdir / "focal.report.json").read_text())
        assert report["config"]["loss"]["gamma"] == 2.0 and report["config"]["use_cas"] is True
        assert (workdir / "focal.best.json").is_file() and (workdir / "focal.history.png").is_file()
        manifest = json.loads((workdir / "focal.manifest.json").read_text())
        assert set(manifest["outputs"]) == {str(workdir / f"focal.{s}") for s in ("best.json", "report.json", "history.png")}
        assert json.loads(stdout)["epochs_run"] == 1

    def test_missing_corpus(self, workdir, capsys):
        code, _, err = run(capsys, "train", "--corpus", str(workdir / "nope.jsonl"), "--out", str(workdir / "x"))
        assert code == 2 and "nope.jsonl" in err

    @pytest.mark.slow
    def test_default_desk_corpus_respects_epoch_bound(self, workdir, capsys):
        desk = workdir / "desk.jsonl"
        assert main(["gen", "--out", str(desk), "--quiet"]) == 0
        capsys.readouterr()
        code, stdout, _ = run(capsys, "train", "--corpus", str(desk), "--loss", "ce", "--out", str(workdir / "desk"),
                              "--no-figures", "--quiet")
        assert code == 0 and json.loads(stdout)["epochs_run"] <= 7


class TestEval:
    def test_checkpoint_vs_single_member(self, workdir, corpus_path, checkpoints, capsys):
        spec = write_spec(workdir / "one.json", "E1", [{"checkpoint": checkpoints[0].name, "loss": "ce", "use_cas": False}])
        _, single, _ = run(capsys, "eval", "--checkpoint", str(checkpoints[0]), "--corpus", str(corpus_path))
        _, ensemble, _ = run(capsys, "eval", "--ensemble", str(spec), "--corpus", str(corpus_path))
        _, again, _ = run(capsys, "eval", "--ensemble", str(spec), "--corpus", str(corpus_path))
        assert single == ensemble == again
        assert set(json.loads(single)) == {"auc", "map", "accuracy", "f1", "threshold", "n_pos", "n_neg"}

    def test_e3_with_ce_member(self, workdir, corpus_path, checkpoints, capsys):
        spec = write_spec(
            workdir / "bad.json",
            "E3",
            [
                {"checkpoint": checkpoints[0].name, "loss": "focal", "use_cas": True},
                {"checkpoint": checkpoints[1].name, "loss": "ce", "use_cas": True},
            ],
        )
        code, _, _ = run(capsys, "eval", "--ensemble", str(spec), "--corpus", str(corpus_path))
        assert code == 5

    def test_writes_figure_and_manifest(self, workdir, corpus_path, checkpoints, capsys):
        code, _, _ = run(capsys, "eval", "--checkpoint", str(checkpoints[1]), "--corpus", str(corpus_path),
                         "--out", str(workdir / "ev"))
        assert code == 0
        assert (workdir / "ev.pr.png").is_file() and (workdir / "ev.eval.json").is_file()


class TestExplain:
    def test_exact_on_long_program(self, checkpoints, capsys):
        src = "x := 5; while x > 0 { x := x - 1 }; y := 1"
        code, _, err = run(capsys, "explain", "--checkpoint", str(checkpoints[0]), "--source", src, "--method", "exact")
        assert code == 6 and "12" in err

    def test_sampled_is_byte_identical(self, workdir, checkpoints, capsys):
        prog = workdir / "loop.while"
        prog.write_text("while 1 > 0 { skip }")
        spec = write_spec(
            workdir / "e3.json",
            "E3",
            [{"checkpoint": p.name, "loss": loss, "use_cas": True} for p, loss in zip(checkpoints, ("focal", "ldam"))],
        )
        outs = []
        for k in range(2):
            out = workdir / f"att{k}.json"
            code, stdout, _ = run(capsys, "explain", "--ensemble", str(spec), "--program", str(prog), "--method", "sampled",
                                  "--seed", "3", "--out-json", str(out), "--out-dot", str(workdir / f"att{k}.dot"))
            assert code == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
        doc = json.loads(stdout)
        assert doc["verdict"] in ("terminating", "non-terminating") and 0 < doc["probability"] < 1

    def test_unparseable_program(self, checkpoints, capsys):
        code, _, _ = run(capsys, "explain", "--checkpoint", str(checkpoints[0]), "--source", "while {")
        assert code == 2
