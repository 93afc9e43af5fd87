import numpy as np
import pytest

from mtlsv import cli
from mtlsv import trials as tr
from mtlsv.config import RunConfig, parse_config_text
from mtlsv.network import ConfigError

TINY_CFG = """\
# small corpus and network for end-to-end runs
num_speakers = 8
num_phrases = 3
num_phonemes = 6
phonemes_per_phrase = 3
min_frames_per_phoneme = 4
max_frames_per_phoneme = 6
feature_dim = 5
hidden_dim = 16
epochs = 2
batch_size = 16
chunk_len = 12
lr = 0.003
seed = 3
"""


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return path


def run_ok(*argv):
    assert cli.run([str(a) for a in argv]) == 0


def full_pipeline(root, cfg_path, preset="S4", backend="plda"):
    corpus, model_dir = root / "corpus", root / "model"
    run_ok("synth", "--config", cfg_path, "--out", corpus)
    run_ok("train", "--config", cfg_path, "--manifest", corpus / "background.tsv", "--out", model_dir,
           "--preset", preset)
    run_ok("extract", "--model", model_dir / "model.pmtl", "--manifest", corpus / "development.tsv",
           "--out", root / "dev")
    run_ok("extract", "--model", model_dir / "model.pmtl", "--manifest", corpus / "background.tsv",
           "--out", root / "bg")
    run_ok("score", "--config", cfg_path, "--manifest", corpus / "development.tsv", "--embeddings", root / "dev",
           "--background", root / "bg", "--background-manifest", corpus / "background.tsv",
           "--backend", backend, "--out", root / "dev.scores")
    run_ok("eval", "--scores", root / "dev.scores", "--out", root / "report.csv")
    return [model_dir / "model.pmtl", root / "dev.feat", root / "dev.scores", root / "report.csv"]


class TestConfig:
    def test_parse(self):
        items = parse_config_text(TINY_CFG)
        assert items["hidden_dim"] == "16"

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_text("hiden_dim = 3\n")

    def test_malformed_line(self):
        with pytest.raises(ConfigError, match="key = value"):
            parse_config_text("just words\n")

    def test_preset_toggles_are_fixed(self):
        rc = RunConfig.load(None, preset="S1", use_se="true")
        with pytest.raises(ConfigError, match="fixes use_se"):
            rc.network(4, 3)
        rc = RunConfig.load(None, preset="S6", pooling_mode="phone_att_literal")
        assert rc.network(4, 3).pooling_mode.value == "phone_att_literal"
        with pytest.raises(ConfigError):
            RunConfig.load(None, preset="S6", pooling_mode="stats").network(4, 3)

    def test_typed_values(self, cfg_path):
        rc = RunConfig.load(str(cfg_path))
        assert rc.synth().num_speakers == 8
        assert rc.schedule().lr == 0.003
        assert rc.network(6, 4).hidden_dim == 16
        with pytest.raises(ConfigError):
            RunConfig.load(None, epochs="many").schedule()


class TestCommands:
    def test_synth_deterministic(self, tmp_path, cfg_path):
        run_ok("synth", "--config", cfg_path, "--out", tmp_path / "a")
        run_ok("synth", "--config", cfg_path, "--out", tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert len(files) > 8 * 3 * 9
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_synth_seed_flag_changes_output(self, tmp_path, cfg_path):
        run_ok("synth", "--config", cfg_path, "--out", tmp_path / "a")
        run_ok("synth", "--config", cfg_path, "--seed", 4, "--out", tmp_path / "b")
        name = "features/spk0000_p00_s1.feat"
        assert (tmp_path / "a" / name).read_bytes() != (tmp_path / "b" / name).read_bytes()

    def test_gradcheck_tiny(self, capsys):
        assert cli.run(["gradcheck", "--preset", "S6", "--tiny"]) == 0
        out = capsys.readouterr().out
        assert "max_relative_error" in out and "status = pass" in out

    def test_eval_fixture(self, tmp_path, capsys):
        trials = [tr.Trial("m", f"t{i}", "TC") for i in range(4)] + [tr.Trial("m", f"n{i}", "IC") for i in range(4)]
        scores = [0.9, 0.8, 0.7, 0.3, 0.6, 0.4, 0.2, 0.1]
        tr.write_scores(tmp_path / "s.tsv", tr.ScoreSet(trials, np.array(scores)))
        run_ok("eval", "--scores", tmp_path / "s.tsv", "--out", tmp_path / "r.csv")
        parsed = tr.read_report_csv((tmp_path / "r.csv").read_text())
        eer, thr = tr.compute_eer(scores[:4], scores[4:])
        assert parsed == {"IC": (100.0 * eer, thr)}
        assert parsed["IC"][0] == 25.0
        assert "no TW trials" in capsys.readouterr().out

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as info:
            cli.run(["frobnicate"])
        assert info.value.code == 2

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as info:
            cli.run(["eval", "--scores", "x", "--bogus"])
        assert info.value.code == 2

    def test_missing_file_is_one_line_error(self, tmp_path, capsys):
        assert cli.run(["eval", "--scores", str(tmp_path / "missing.tsv")]) == 1
        err = capsys.readouterr().err
        assert err.startswith("mtlsv eval: error:") and err.count("\n") == 1

    def test_single_task_rejects_alignments(self, tmp_path, cfg_path, capsys):
        run_ok("synth", "--config", cfg_path, "--out", tmp_path / "c")
        code = cli.run(["train", "--config", str(cfg_path), "--manifest", str(tmp_path / "c" / "background.tsv"),
                        "--out", str(tmp_path / "m"), "--preset", "S5"])
        assert code == 1
        assert "rejects phoneme-label" in capsys.readouterr().err

    @pytest.mark.parametrize("preset", ["S3", "S4", "S6"])
    def test_phonetic_presets_need_alignments(self, tmp_path, cfg_path, preset, capsys):
        run_ok("synth", "--config", cfg_path, "--out", tmp_path / "c", "--no-alignments")
        code = cli.run(["train", "--config", str(cfg_path), "--manifest", str(tmp_path / "c" / "background.tsv"),
                        "--out", str(tmp_path / "m"), "--preset", preset])
        assert code == 1
        assert "needs a manifest with alignments" in capsys.readouterr().err

    def test_single_task_trains_without_alignments(self, tmp_path, cfg_path):
        run_ok("synth", "--config", cfg_path, "--out", tmp_path / "c", "--no-alignments")
        run_ok("train", "--config", cfg_path, "--manifest", tmp_path / "c" / "background.tsv",
               "--out", tmp_path / "m", "--preset", "S5")
        assert (tmp_path / "m" / "model.pmtl").exists()

    def test_info(self, tmp_path, cfg_path, capsys):
        run_ok("synth", "--config", cfg_path, "--out", tmp_path / "c")
        run_ok("train", "--config", cfg_path, "--manifest", tmp_path / "c" / "background.tsv",
               "--out", tmp_path / "m", "--preset", "S1")
        capsys.readouterr()
        run_ok("info", "--model", tmp_path / "m" / "model.pmtl")
        lines = capsys.readouterr().out.splitlines()
        assert all(" = " in line for line in lines)
        keys = dict(line.split(" = ", 1) for line in lines)
        assert keys["pooling_mode"] == "stats"
        assert keys["trainer.epoch"] == "2"
        assert int(keys["num_parameter_values"]) > 0


class TestEndToEnd:
    @pytest.mark.parametrize("backend", ["cosine", "plda"])
    def test_pipeline_is_deterministic(self, tmp_path, cfg_path, backend):
        first = full_pipeline(tmp_path / "run1", cfg_path, backend=backend)
        second = full_pipeline(tmp_path / "run2", cfg_path, backend=backend)
        for a, b in zip(first, second):
            assert a.read_bytes() == b.read_bytes(), a.name
        report = tr.read_report_csv(first[-1].read_text())
        assert set(report) == {"TW", "IC", "IW"}
        scores = tr.read_scores(first[2])
        rep = tr.report(scores)
        for row in rep.rows:
            assert report[row.condition] == (100.0 * row.eer, row.threshold)

    def test_stage_rerun_from_disk(self, tmp_path, cfg_path):
        files = full_pipeline(tmp_path / "run", cfg_path, preset="S6")
        run_ok("score", "--config", cfg_path, "--manifest", tmp_path / "run" / "corpus" / "development.tsv",
               "--embeddings", tmp_path / "run" / "dev", "--background", tmp_path / "run" / "bg",
               "--background-manifest", tmp_path / "run" / "corpus" / "background.tsv",
               "--out", tmp_path / "again.scores")
        assert (tmp_path / "again.scores").read_bytes() == files[2].read_bytes()
        assert (tmp_path / "again.trials").read_bytes() == (tmp_path / "run" / "dev.trials").read_bytes()

    def test_speaker_phrase_plda_classes(self, tmp_path, cfg_path):
        full_pipeline(tmp_path / "run", cfg_path, preset="S1", backend="cosine")
        run = tmp_path / "run"
        assert cli.run(["score", "--config", str(cfg_path), "--manifest", str(run / "corpus" / "development.tsv"),
                        "--embeddings", str(run / "dev"), "--background", str(run / "bg"),
                        "--background-manifest", str(run / "corpus" / "background.tsv"), "--backend", "plda",
                        "--out", str(tmp_path / "sp.scores")]) == 0
        cfg_sp = tmp_path / "sp.cfg"
        cfg_sp.write_text(TINY_CFG + "plda_classes = speaker_phrase\n")
        run_ok("score", "--config", cfg_sp, "--manifest", run / "corpus" / "development.tsv",
               "--embeddings", run / "dev", "--background", run / "bg",
               "--background-manifest", run / "corpus" / "background.tsv", "--backend", "plda",
               "--out", tmp_path / "sp2.scores")
        assert (tmp_path / "sp.scores").read_bytes() != (tmp_path / "sp2.scores").read_bytes()
