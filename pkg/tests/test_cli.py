import pytest

from cyclestyle import cli
from cyclestyle.cli import ConfigError, RunConfig, main, parse_config
from cyclestyle.training import NumericalError, TrainConfig

TINY = ["--hidden", "8", "--emb", "6", "--filters", "4", "--batch-size", "32", "--max-epochs", "1", "--lr", "0.01"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["gen-synth", "--vocab", "30", "--marked", "4", "--per-style", "60", "--seed", "3", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def checkpoint(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "model.ckpt"
    assert main(["train", "--data", str(data_dir), "--out", str(out), *TINY]) == 0
    return out


class TestConfigFile:
    def test_value_parses(self, tmp_path):
        (tmp_path / "c.cfg").write_text("# defaults\nlr = 0.0005  # Adam\n\nno_attention = true\nwidths = 1,2\n")
        assert parse_config(tmp_path / "c.cfg") == {"lr": 0.0005, "no_attention": True, "widths": (1, 2)}

    def test_bad_value_cites_line(self, tmp_path):
        (tmp_path / "c.cfg").write_text("hidden = 10\nlr = fast\n")
        with pytest.raises(ConfigError) as exc:
            parse_config(tmp_path / "c.cfg")
        assert exc.value.key == "lr" and exc.value.line == 2 and "line 2" in str(exc.value)

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.cfg").write_text("learning_rate = 0.1\n")
        with pytest.raises(ConfigError, match="learning_rate"):
            parse_config(tmp_path / "c.cfg")

    def test_empty_file_gives_defaults(self, tmp_path):
        (tmp_path / "c.cfg").write_text("")
        cfg = RunConfig().with_values(parse_config(tmp_path / "c.cfg"))
        assert cfg.train == TrainConfig()
        assert (cfg.train.hidden, cfg.train.lr, cfg.train.batch_size) == (200, 0.0005, 64)

    def test_flags_override_file(self, tmp_path):
        (tmp_path / "c.cfg").write_text("hidden = 10\nemb = 7\n")
        args = cli.build_parser().parse_args(["train", "--data", "d", "--out", "o", "--config",
                                              str(tmp_path / "c.cfg"), "--hidden", "12", "--no-back-transfer"])
        cfg = cli.run_config(args)
        assert (cfg.train.hidden, cfg.train.emb, cfg.train.no_back_transfer) == (12, 7, True)


class TestGenSynth:
    def test_four_files_and_byte_identical_rerun(self, tmp_path):
        argv = ["gen-synth", "--vocab", "60", "--marked", "8", "--per-style", "200", "--seed", "7"]
        assert main(argv + ["--out", str(tmp_path / "a")]) == 0
        assert main(argv + ["--out", str(tmp_path / "b")]) == 0
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == ["manifest.json", "oracle.tsv", "style0.txt", "style1.txt"]
        for n in names:
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
        assert len((tmp_path / "a" / "oracle.tsv").read_text().splitlines()) == 8

    def test_refuses_to_overwrite(self, tmp_path, capsys):
        argv = ["gen-synth", "--per-style", "50", "--out", str(tmp_path)]
        assert main(argv) == 0
        before = (tmp_path / "style0.txt").read_bytes()
        assert main(argv + ["--seed", "8"]) == cli.EXIT_IO
        assert (tmp_path / "style0.txt").read_bytes() == before
        assert main(argv + ["--seed", "8", "--force"]) == 0


class TestTrain:
    def test_outputs(self, checkpoint):
        log = checkpoint.with_name("model.ckpt.log").read_text().splitlines()
        assert log[0].startswith("epoch\trec") and len(log) == 2
        assert checkpoint.with_name("model.ckpt.vocab").exists()
        assert checkpoint.read_bytes()[:4] == b"CYST"

    def test_rerun_identical(self, data_dir, checkpoint, tmp_path):
        out = tmp_path / "again.ckpt"
        assert main(["train", "--data", str(data_dir), "--out", str(out), *TINY]) == 0
        assert out.read_bytes() == checkpoint.read_bytes()
        assert (tmp_path / "again.ckpt.log").read_text() == checkpoint.with_name("model.ckpt.log").read_text()

    def test_bad_key_exit_2(self, data_dir, tmp_path, capsys):
        (tmp_path / "c.cfg").write_text("hiden = 3\n")
        code = main(["train", "--data", str(data_dir), "--out", str(tmp_path / "m"), "--config", str(tmp_path / "c.cfg")])
        assert code == cli.EXIT_CONFIG and "hiden" in capsys.readouterr().err

    def test_bad_flag_value_exit_2(self, data_dir, tmp_path):
        assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / "m"), "--lr", "fast"]) == cli.EXIT_CONFIG

    def test_numerical_abort_exit_3(self, data_dir, tmp_path, monkeypatch):
        def boom(*a, **kw):
            raise NumericalError("class_td", float("nan"))

        monkeypatch.setattr(cli, "train", boom)
        assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / "m"), *TINY]) == cli.EXIT_NUMERICAL

    def test_missing_data_exit_4(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "m")]) == cli.EXIT_IO


class TestTransfer:
    def test_line_counts_and_oov(self, checkpoint, tmp_path):
        (tmp_path / "in.txt").write_text("w1 m0 w2\nzzz qqq\n\nw3 w4 w5 w6\n")
        before = (tmp_path / "in.txt").read_bytes()
        assert main(["transfer", "--model", str(checkpoint), "--input", str(tmp_path / "in.txt"),
                     "--output", str(tmp_path / "out.txt")]) == 0
        assert len((tmp_path / "out.txt").read_text().splitlines()) == 4
        assert (tmp_path / "in.txt").read_bytes() == before

    def test_empty_input(self, checkpoint, tmp_path):
        (tmp_path / "in.txt").write_text("")
        assert main(["transfer", "--model", str(checkpoint), "--input", str(tmp_path / "in.txt"),
                     "--output", str(tmp_path / "out.txt")]) == 0
        assert (tmp_path / "out.txt").read_text() == ""

    def test_bad_checkpoint_exit_4(self, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"nope")
        (tmp_path / "in.txt").write_text("a b\n")
        assert main(["transfer", "--model", str(tmp_path / "bad.ckpt"), "--input", str(tmp_path / "in.txt"),
                     "--output", str(tmp_path / "out.txt")]) == cli.EXIT_IO


class TestEvaluate:
    def test_summary_and_oracle_mode(self, data_dir, checkpoint, tmp_path, capsys):
        out = tmp_path / "test.out"
        assert main(["transfer", "--model", str(checkpoint), "--data", str(data_dir), "--output", str(out)]) == 0
        src = tmp_path / "test.out.source"
        assert len(src.read_text().splitlines()) == len(out.read_text().splitlines())
        capsys.readouterr()
        argv = ["evaluate", "--source", str(src), "--transferred", str(out), "--data", str(data_dir),
                "--report", str(tmp_path / "rep.tsv"), "--lm-emb", "6", "--lm-hidden", "8", "--lm-max-epochs", "1",
                "--emb", "6", "--filters", "4", "--judge-epochs", "1"]
        assert main(argv + ["--oracle", str(data_dir / "oracle.tsv")]) == 0
        line = capsys.readouterr().out.strip()
        assert [kv.split("=")[0] for kv in line.split()] == ["acc", "cp", "ppl"]
        assert (tmp_path / "rep.tsv.summary").read_text().strip() == line
        assert main(argv) == 0

    def test_misaligned_files(self, data_dir, tmp_path):
        (tmp_path / "a.txt").write_text("x y\nz w\n")
        (tmp_path / "b.txt").write_text("x y\n")
        code = main(["evaluate", "--source", str(tmp_path / "a.txt"), "--transferred", str(tmp_path / "b.txt"),
                     "--data", str(data_dir), "--report", str(tmp_path / "r.tsv")])
        assert code == cli.EXIT_IO
