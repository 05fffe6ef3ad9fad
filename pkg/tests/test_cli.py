import hashlib
import json

import pytest

from trialign import cli, encoders, trainer
from trialign.diffcore import NumericError


def digest_dir(path):
    """sha256 of every output under ``path``, keyed by name.

    Config echoes and checkpoint metadata record where files live, so they
    are compared with their path settings removed.
    """
    strip = lambda cfg: {k: v for k, v in cfg.items() if k not in cli.PATH_KEYS}
    out = {}
    for p in sorted(path.iterdir()):
        if p.name.endswith(".config.json"):
            out[p.name] = strip(json.loads(p.read_text()))
        elif p.name.startswith("ckpt-") and p.suffix == ".json":
            meta = json.loads(p.read_text())
            out[p.name] = {**meta, "config": strip(meta["config"])}
        elif p.is_file():
            out[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def only(path, pattern):
    hits = sorted(path.glob(pattern))
    assert len(hits) == 1, hits
    return hits[0]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--out", str(root / "data"), "--seed", "5", "--train-size", "200", "--test-size", "40"]) == 0
    assert cli.main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--steps", "6", "--batch-size", "16"]) == 0
    ckpt = only(root / "run", "ckpt-*.bin").with_suffix("")
    return root, ckpt


class TestGenData:
    def test_files(self, pipeline):
        root, _ = pipeline
        d = root / "data"
        assert len((d / "train.jsonl").read_text().splitlines()) == 200
        assert len((d / "test.jsonl").read_text().splitlines()) == 40
        assert json.loads((d / "manifest.json").read_text())["seed"] == 5
        echo = json.loads(only(d, "gen-data-*.config.json").read_text())
        assert echo["train-size"] == 200 and echo["noise"] == 0.05

    def test_deterministic(self, tmp_path):
        args = ["gen-data", "--seed", "9", "--train-size", "30", "--test-size", "10"]
        assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
        assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
        assert digest_dir(tmp_path / "a") == digest_dir(tmp_path / "b")

    def test_empty_train(self, tmp_path):
        assert cli.main(["gen-data", "--out", str(tmp_path), "--train-size", "0", "--test-size", "3"]) == 0
        assert (tmp_path / "train.jsonl").read_text() == ""

    def test_config_echo_reruns(self, tmp_path):
        assert cli.main(["gen-data", "--out", str(tmp_path / "a"), "--seed", "3", "--train-size", "12", "--test-size", "4"]) == 0
        echo = only(tmp_path / "a", "gen-data-*.config.json")
        assert cli.main(["gen-data", "--config", str(echo), "--out", str(tmp_path / "b")]) == 0
        assert digest_dir(tmp_path / "a") == digest_dir(tmp_path / "b")

    def test_flag_beats_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 1, "train-size": 4, "test-size": 2}))
        assert cli.main(["gen-data", "--config", str(cfg), "--seed", "2", "--out", str(tmp_path / "o")]) == 0
        assert json.loads((tmp_path / "o" / "manifest.json").read_text())["seed"] == 2

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"sed": 1}))
        assert cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path)]) == 2

    def test_missing_out(self):
        assert cli.main(["gen-data"]) == 2

    def test_capacity(self, tmp_path):
        assert cli.main(["gen-data", "--out", str(tmp_path), "--train-size", "2000000", "--test-size", "0"]) == 2


class TestTrain:
    def test_outputs(self, pipeline):
        root, ckpt = pipeline
        run = root / "run"
        log = only(run, "train-*.log.jsonl").read_text().splitlines()
        assert len(log) == 6 and json.loads(log[0])["step"] == 1
        fp = only(run, "train-*.config.json").name.split("-")[1].split(".")[0]
        assert ckpt.name == f"ckpt-{fp}" and len(fp) == 12

    def test_deterministic(self, pipeline, tmp_path):
        root, _ = pipeline
        args = ["train", "--data", str(root / "data"), "--steps", "3", "--batch-size", "8", "--loss", "triangle+dtm"]
        assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
        assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
        assert digest_dir(tmp_path / "a") == digest_dir(tmp_path / "b")

    def test_zero_steps_is_init(self, pipeline, tmp_path):
        root, _ = pipeline
        assert cli.main(["train", "--data", str(root / "data"), "--out", str(tmp_path), "--steps", "0", "--seed", "4"]) == 0
        params, _ = encoders.load_checkpoint(only(tmp_path, "ckpt-*.bin").with_suffix(""))
        from trialign import datagen

        split = datagen.load_dataset(root / "data")
        cfg = trainer.TrainConfig(steps=0, seed=4)
        assert encoders.params_equal(params, encoders.init_params(trainer.model_spec(cfg, split), 4))

    def test_missing_data_is_io(self, tmp_path):
        assert cli.main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 4

    def test_bad_setting_is_config(self, pipeline, tmp_path):
        root, _ = pipeline
        assert cli.main(["train", "--data", str(root / "data"), "--out", str(tmp_path), "--tau", "-1"]) == 2

    def test_numeric_abort_exit(self, pipeline, tmp_path, monkeypatch):
        root, _ = pipeline

        def boom(*a, **k):
            raise NumericError("injected")

        monkeypatch.setattr(trainer, "compute_loss", boom)
        assert cli.main(["train", "--data", str(root / "data"), "--out", str(tmp_path), "--steps", "2", "--batch-size", "8"]) == 3
        assert list(tmp_path.glob("ckpt-*-abort.bin"))

    def test_clip_flag_default_value(self):
        parser = cli.build_parser()
        bare = parser.parse_args(["train", "--data", "d", "--out", "o", "--clip-grad-norm"])
        assert cli.resolve("train", bare)["clip-grad-norm"] == 1.0
        given = parser.parse_args(["train", "--data", "d", "--out", "o", "--clip-grad-norm", "0.5"])
        assert cli.resolve("train", given)["clip-grad-norm"] == 0.5
        unset = parser.parse_args(["train", "--data", "d", "--out", "o"])
        assert cli.resolve("train", unset)["clip-grad-norm"] is None


class TestEval:
    def test_report_and_self_baseline(self, pipeline, tmp_path):
        root, ckpt = pipeline
        base = ["eval", "--checkpoint", str(ckpt), "--data", str(root / "data"), "--resamples", "200"]
        assert cli.main(base + ["--out", str(tmp_path / "a")]) == 0
        report = json.loads(only(tmp_path / "a", "eval-*.report.json").read_text())
        assert set(report) >= {"T2AV", "AV2T"}
        for m in report.values():
            assert 0.0 <= m["r1"] <= m["r10"] <= 1.0 and m["n"] == 40
        ranks = only(tmp_path / "a", "eval-*.report.ranks.json")
        assert cli.main(base + ["--out", str(tmp_path / "b"), "--baseline-ranks", str(ranks)]) == 0
        again = json.loads(only(tmp_path / "b", "eval-*.report.json").read_text())
        assert again["T2AV"]["pVsBaseline"]["r1"] == 1.0

    def test_deterministic(self, pipeline, tmp_path):
        root, ckpt = pipeline
        args = ["eval", "--checkpoint", str(ckpt), "--data", str(root / "data")]
        assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
        assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
        assert digest_dir(tmp_path / "a") == digest_dir(tmp_path / "b")

    def test_tampered_fingerprint(self, pipeline, tmp_path):
        root, ckpt = pipeline
        meta = json.loads(ckpt.with_suffix(".json").read_text())
        meta["config"]["tau"] = 0.5
        bad = tmp_path / "ckpt"
        bad.with_suffix(".json").write_text(json.dumps(meta))
        bad.with_suffix(".bin").write_bytes(ckpt.with_suffix(".bin").read_bytes())
        assert cli.main(["eval", "--checkpoint", str(bad), "--data", str(root / "data"), "--out", str(tmp_path / "o")]) == 2

    def test_corrupt_checkpoint_is_io(self, pipeline, tmp_path):
        root, ckpt = pipeline
        bad = tmp_path / "ckpt"
        bad.with_suffix(".json").write_text(ckpt.with_suffix(".json").read_text())
        bad.with_suffix(".bin").write_bytes(ckpt.with_suffix(".bin").read_bytes()[:-4])
        assert cli.main(["eval", "--checkpoint", str(bad), "--data", str(root / "data"), "--out", str(tmp_path / "o")]) == 4

    def test_fusion_scoring_without_layer(self, pipeline, tmp_path):
        root, ckpt = pipeline
        args = ["eval", "--checkpoint", str(ckpt), "--data", str(root / "data"), "--out", str(tmp_path), "--scoring", "fusion"]
        assert cli.main(args) == 2


class TestAnalyze:
    def test_outputs(self, pipeline, tmp_path):
        root, ckpt = pipeline
        assert cli.main(["analyze", "--checkpoint", str(ckpt), "--data", str(root / "data"), "--out", str(tmp_path), "--n", "10"]) == 0
        doc = json.loads(only(tmp_path, "analyze-*.geometry.json").read_text())
        assert len(doc["records"]) == 20
        assert len(only(tmp_path, "analyze-*.geometry.csv").read_text().splitlines()) == 21

    @pytest.mark.parametrize("n", ["1", "41"])
    def test_bad_n(self, pipeline, tmp_path, n):
        root, ckpt = pipeline
        assert cli.main(["analyze", "--checkpoint", str(ckpt), "--data", str(root / "data"), "--out", str(tmp_path), "--n", n]) == 2


class TestGradcheck:
    def test_zero_trials_warns(self):
        with pytest.warns(UserWarning):
            assert cli.main(["gradcheck", "--trials", "0"]) == 0

    def test_geometry_passes(self, capsys):
        assert cli.main(["gradcheck", "--module", "geometry", "--trials", "3"]) == 0
        assert "passed" in capsys.readouterr().out

    def test_negative_trials(self):
        assert cli.main(["gradcheck", "--trials", "-1"]) == 2
