import hashlib
import json
import re

import numpy as np
import pytest

from trialign import datagen as dg

CAPTION_RE = re.compile(
    r"^This video contains ([1-4]) shapes: "
    r"((?:[a-z]+ [a-z]+)(?:, [a-z]+ [a-z]+)*)\.$"
)


def scene(*pairs):
    return dg.Scene(tuple(dg.ShapeItem(shape, color, 0, 0) for color, shape in pairs))


class TestHashing:
    def test_splitmix64_reference_stream(self):
        # first two outputs of the reference generator started at state 0
        assert dg.splitmix64(0) == 0xE220A8397B1DCDAF
        assert dg.splitmix64(0x9E3779B97F4A7C15) == 0x6E789E6AA1B965F4

    def test_fnv1a64_reference(self):
        assert dg.fnv1a64(b"") == 0xCBF29CE484222325
        assert dg.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
        assert dg.fnv1a64(b"foobar") == 0x85944171F73967E8

    def test_keyed_blocks(self):
        a = dg.keyed_unit_block(1, "video/star/red/0", 128, nonneg=True)
        assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-15) and a.min() >= 0
        np.testing.assert_array_equal(a, dg.keyed_unit_block(1, "video/star/red/0", 128, nonneg=True))
        assert not np.array_equal(a, dg.keyed_unit_block(2, "video/star/red/0", 128, nonneg=True))
        signed = dg.keyed_unit_block(1, "audio/star/red", 64)
        assert signed.min() < 0 < signed.max()


class TestCaptions:
    def test_single_shape(self):
        assert dg.caption_of(scene(("red", "star"))) == "This video contains 1 shapes: red star."

    def test_three_shapes(self):
        s = scene(("magenta", "ring"), ("yellow", "star"), ("red", "nonagon"))
        assert dg.caption_of(s) == "This video contains 3 shapes: magenta ring, yellow star, red nonagon."

    def test_two_shapes(self):
        assert dg.caption_of(scene(("red", "star"), ("blue", "circle"))) == "This video contains 2 shapes: red star, blue circle."

    def test_text_features_count_tokens(self):
        s = scene(("red", "star"), ("red", "circle"))
        f = dg.text_features(dg.caption_of(s))
        idx = {w: k for k, w in enumerate(dg.VOCAB)}
        assert f[idx["red"]] == 2 and f[idx["star"]] == 1 and f[idx["2"]] == 1 and f.sum() == 4 + 1 + 4

    @pytest.mark.parametrize("pairs", [(), (("red", "star"),) * 2, (("puce", "star"),)])
    def test_invalid_scenes(self, pairs):
        with pytest.raises(ValueError):
            dg.Scene(tuple(dg.ShapeItem(s, c, 0, 0) for c, s in pairs))


class TestGenerate:
    def test_seed7_byte_identical(self, tmp_path):
        a = dg.write_jsonl(dg.generate_dataset(60, 20, seed=7), tmp_path / "a.jsonl")
        b = dg.write_jsonl(dg.generate_dataset(60, 20, seed=7), tmp_path / "b.jsonl")
        assert a.read_bytes() == b.read_bytes()

    def test_empty_train(self, tmp_path):
        split = dg.generate_dataset(0, 5, seed=1)
        assert split.train == [] and len(split.test) == 5
        paths = dg.write_dataset(split, tmp_path, 0.05)
        assert paths["train"].read_text() == ""
        assert dg.load_dataset(tmp_path).train == []

    def test_default_full_scan(self, default_split):
        assert len(default_split.train) == 8000 and len(default_split.test) == 1000
        train_ids = {t.scene_id for t in default_split.train}
        test_ids = {t.scene_id for t in default_split.test}
        assert not train_ids & test_ids
        for t in default_split.train + default_split.test:
            m = CAPTION_RE.match(t.caption)
            assert m, t.caption
            items = m.group(2).split(", ")
            assert int(m.group(1)) == len(items)
            for item in items:
                color, shape = item.split(" ")
                assert color in dg.COLORS and shape in dg.SHAPES
            assert np.all(np.isfinite(t.video)) and np.all(np.isfinite(t.audio))

    def test_captions_unique_by_content(self, default_split):
        keys = [frozenset(re.findall(r"([a-z]+ [a-z]+)(?:,|\.)", t.caption)) for t in default_split.train + default_split.test]
        assert len(set(keys)) == len(keys)

    def test_capacity_error(self):
        with pytest.raises(dg.CapacityError):
            dg.generate_scenes(dg.scene_capacity() + 1, seed=0)

    def test_capacity_value(self):
        # 80 distinct (shape, colour) pairs, 1 to 4 per scene
        assert dg.scene_capacity() == 80 + 3160 + 82160 + 1581580

    def test_linear_probe_on_shape_count(self):
        # multinomial logistic regression on standardized video features
        split = dg.generate_dataset(3000, 1000, seed=5, noise_level=0.05)

        def xy(items):
            return np.stack([t.video for t in items]), np.array([int(t.caption.split()[3]) for t in items])

        Xtr, ktr = xy(split.train)
        Xte, kte = xy(split.test)
        mu, sd = Xtr.mean(0), Xtr.std(0) + 1e-12

        def design(X):
            return np.hstack([(X - mu) / sd, np.ones((len(X), 1))])

        A, Y = design(Xtr), np.eye(4)[ktr - 1]
        W = np.zeros((A.shape[1], 4))
        for _ in range(2000):  # run to convergence; early iterates oscillate
            L = A @ W
            P = np.exp(L - L.max(1, keepdims=True))
            P /= P.sum(1, keepdims=True)
            W -= 0.5 * A.T @ (P - Y) / len(A)
        acc = np.mean(np.argmax(design(Xte) @ W, axis=1) + 1 == kte)
        assert acc >= 0.95

    def test_noise_free_distinct(self):
        split = dg.generate_dataset(2000, 0, seed=9, noise_level=0.0)
        V = np.stack([t.video for t in split.train])
        assert len(np.unique(V, axis=0)) == len(V)

    def test_views_carry_the_same_scene(self):
        # audio ignores size and motion; video ignores nothing
        a = scene(("red", "star"))
        b = dg.Scene((dg.ShapeItem("star", "red", 2, 3),))
        np.testing.assert_array_equal(dg.audio_features(a, 0), dg.audio_features(b, 0))
        assert not np.array_equal(dg.video_features(a, 0), dg.video_features(b, 0))


class TestJsonl:
    def test_round_trip_100(self, tmp_path):
        split = dg.generate_dataset(70, 30, seed=11)
        path = dg.write_jsonl(split, tmp_path / "d.jsonl")
        back = dg.read_jsonl(path)
        assert back.train == split.train and back.test == split.test

    def test_line_keys(self, tmp_path):
        path = dg.write_jsonl(dg.generate_dataset(1, 0, seed=0), tmp_path / "d.jsonl")
        rec = json.loads(path.read_text().splitlines()[0])
        assert set(rec) == {"sceneId", "caption", "videoFeat", "audioFeat", "textFeat", "split"}

    def test_truncated_last_line(self, tmp_path):
        path = dg.write_jsonl(dg.generate_dataset(5, 0, seed=0), tmp_path / "d.jsonl")
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 40])
        with pytest.raises(dg.DatasetFormatError) as err:
            dg.read_jsonl(path)
        assert err.value.line == 5

    def test_wrong_length_feature(self, tmp_path):
        path = dg.write_jsonl(dg.generate_dataset(2, 0, seed=0), tmp_path / "d.jsonl")
        lines = path.read_text().splitlines()
        rec = json.loads(lines[1])
        rec["audioFeat"] = rec["audioFeat"][:-1]
        path.write_text(lines[0] + "\n" + json.dumps(rec) + "\n")
        with pytest.raises(dg.DatasetFormatError) as err:
            dg.read_jsonl(path)
        assert err.value.line == 2

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        split = dg.read_jsonl(path)
        assert split.train == [] and split.test == []

    def test_manifest(self, tmp_path):
        split = dg.generate_dataset(10, 4, seed=3)
        dg.write_dataset(split, tmp_path, 0.05)
        m = json.loads((tmp_path / "manifest.json").read_text())
        assert (m["seed"], m["trainSize"], m["testSize"], m["noiseLevel"]) == (3, 10, 4, 0.05)
        assert m["vocabularyHash"] == hashlib.sha256("\n".join(dg.VOCAB).encode()).hexdigest()[:16]
        assert dg.load_dataset(tmp_path).generator_seed == 3
