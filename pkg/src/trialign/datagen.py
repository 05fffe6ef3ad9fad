"""Deterministic synthetic scenes of coloured shapes, rendered as three views.

Each scene yields a video-like vector, an audio-like vector and the
bag-of-tokens count vector of its caption. Feature blocks are keyed
pseudo-random unit vectors derived from ``(seed, key string)`` with FNV-1a and
SplitMix64, so the bytes do not depend on any platform RNG. Scene sampling
and additive noise use numpy's PCG64 generator seeded from the same seed.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .geometry import ConfigError

SHAPES = ("circle", "ring", "star", "triangle", "square", "pentagon", "hexagon", "nonagon", "cross", "diamond")
COLORS = ("red", "blue", "green", "yellow", "magenta", "cyan", "white", "orange")
SIZE_BUCKETS = 3
MOTION_BUCKETS = 4
MAX_SHAPES = 4
TEMPLATE_WORDS = ("this", "video", "contains", "shapes")
VOCAB = TEMPLATE_WORDS + tuple(str(k) for k in range(1, MAX_SHAPES + 1)) + SHAPES + COLORS
VIDEO_DIM = 128
AUDIO_DIM = 64

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class CapacityError(ValueError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.line = line


def splitmix64(x: int) -> int:
    z = (x + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & _MASK
    return h


@lru_cache(maxsize=4096)
def _keyed_block(seed: int, key: str, dim: int, nonneg: bool) -> tuple[float, ...]:
    state = splitmix64((seed & _MASK) ^ fnv1a64(key.encode("utf-8")))
    vals = []
    for _ in range(dim):
        state = (state + _GOLDEN) & _MASK
        u = (splitmix64(state) >> 11) * (1.0 / (1 << 53))
        vals.append(u if nonneg else 2.0 * u - 1.0)
    norm = math.sqrt(math.fsum(v * v for v in vals))
    return tuple(v / norm for v in vals)


def keyed_unit_block(seed: int, key: str, dim: int, nonneg: bool = False) -> np.ndarray:
    """Unit vector whose entries come from SplitMix64 on ``fnv1a64(key) ^ seed``.

    Entries are uniform in ``[0, 1)`` when ``nonneg`` else ``[-1, 1)`` before
    normalization.
    """
    return np.array(_keyed_block(int(seed), key, dim, nonneg))


@dataclass(frozen=True)
class ShapeItem:
    shape: str
    color: str
    size: int
    motion: int


@dataclass(frozen=True)
class Scene:
    shapes: tuple[ShapeItem, ...]

    def __post_init__(self):
        if not 1 <= len(self.shapes) <= MAX_SHAPES:
            raise ValueError(f"scene must hold 1..{MAX_SHAPES} shapes")
        pairs = [(s.shape, s.color) for s in self.shapes]
        if len(set(pairs)) != len(pairs):
            raise ValueError("duplicate (shape, color) in scene")
        for s in self.shapes:
            if s.shape not in SHAPES or s.color not in COLORS:
                raise ValueError(f"unknown shape/color {s.shape}/{s.color}")

    @property
    def content_key(self) -> frozenset:
        return frozenset((s.shape, s.color) for s in self.shapes)


def caption_of(scene: Scene) -> str:
    items = ", ".join(f"{s.color} {s.shape}" for s in scene.shapes)
    return f"This video contains {len(scene.shapes)} shapes: {items}."


def tokenize(caption: str) -> list[str]:
    return caption.lower().replace(",", " ").replace(":", " ").replace(".", " ").split()


def text_features(caption: str) -> np.ndarray:
    index = {w: k for k, w in enumerate(VOCAB)}
    out = np.zeros(len(VOCAB))
    for tok in tokenize(caption):
        out[index[tok]] += 1.0
    return out


def video_features(scene: Scene, seed: int) -> np.ndarray:
    out = np.zeros(VIDEO_DIM)
    for s in scene.shapes:
        out += keyed_unit_block(seed, f"video/{s.shape}/{s.color}/{s.size}", VIDEO_DIM, nonneg=True)
        out += 0.5 * keyed_unit_block(seed, f"motion/{s.motion}", VIDEO_DIM, nonneg=True)
    return out


def audio_features(scene: Scene, seed: int) -> np.ndarray:
    # per-shape signatures are superposed, not placed in order-dependent slots
    out = np.zeros(AUDIO_DIM)
    for s in scene.shapes:
        out += keyed_unit_block(seed, f"audio/{s.shape}/{s.color}", AUDIO_DIM)
    out += 0.5 * keyed_unit_block(seed, f"tone/{len(scene.shapes)}", AUDIO_DIM)
    return out


@dataclass
class TriModalTriplet:
    scene_id: int
    caption: str
    video: np.ndarray
    audio: np.ndarray
    text: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, TriModalTriplet):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.caption == other.caption
            and np.array_equal(self.video, other.video)
            and np.array_equal(self.audio, other.audio)
            and np.array_equal(self.text, other.text)
        )


@dataclass
class DatasetSplit:
    train: list[TriModalTriplet] = field(default_factory=list)
    test: list[TriModalTriplet] = field(default_factory=list)
    generator_seed: int | None = None

    def arrays(self, part: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(text, video, audio)`` feature matrices for ``"train"`` or ``"test"``."""
        items = getattr(self, part)
        dims = (len(VOCAB), VIDEO_DIM, AUDIO_DIM)
        if not items:
            return tuple(np.zeros((0, d)) for d in dims)
        return (
            np.stack([t.text for t in items]),
            np.stack([t.video for t in items]),
            np.stack([t.audio for t in items]),
        )


def scene_capacity() -> int:
    pairs = len(SHAPES) * len(COLORS)
    return sum(math.comb(pairs, k) for k in range(1, MAX_SHAPES + 1))


def _sample_scene(rng: np.random.Generator) -> Scene:
    k = int(rng.integers(1, MAX_SHAPES + 1))
    picks = rng.choice(len(SHAPES) * len(COLORS), size=k, replace=False)
    items = []
    for p in picks:
        shape, color = SHAPES[int(p) // len(COLORS)], COLORS[int(p) % len(COLORS)]
        items.append(ShapeItem(shape, color, int(rng.integers(SIZE_BUCKETS)), int(rng.integers(MOTION_BUCKETS))))
    return Scene(tuple(items))


def render(scene: Scene, scene_id: int, seed: int, noise: np.ndarray | None = None) -> TriModalTriplet:
    caption = caption_of(scene)
    video = video_features(scene, seed)
    audio = audio_features(scene, seed)
    if noise is not None:
        video = video + noise[:VIDEO_DIM]
        audio = audio + noise[VIDEO_DIM:]
    return TriModalTriplet(scene_id, caption, video, audio, text_features(caption))


def generate_scenes(n: int, seed: int, dedup: bool = True) -> list[Scene]:
    if dedup and n > scene_capacity():
        raise CapacityError(f"requested {n} scenes but only {scene_capacity()} distinct captions exist")
    rng = np.random.default_rng([int(seed), 0])
    seen: set = set()
    scenes = []
    while len(scenes) < n:
        scene = _sample_scene(rng)
        if dedup:
            if scene.content_key in seen:
                continue
            seen.add(scene.content_key)
        scenes.append(scene)
    return scenes


def generate_dataset(n_train: int = 8000, n_test: int = 1000, seed: int = 42, noise_level: float = 0.05, dedup: bool = True) -> DatasetSplit:
    """Sample distinct scenes and render them into train and test triplets.

    Scenes are distinct by caption content (the set of coloured shapes), so
    every text query has exactly one matching audio-video pair. Train takes
    scene ids ``0..n_train-1`` and test the ids after.
    """
    if n_train < 0 or n_test < 0:
        raise ConfigError("dataset sizes must be non-negative")
    if noise_level < 0:
        raise ConfigError("noise level must be non-negative")
    scenes = generate_scenes(n_train + n_test, seed, dedup=dedup)
    noise_rng = np.random.default_rng([int(seed), 1])
    triplets = []
    for sid, scene in enumerate(scenes):
        noise = noise_rng.standard_normal(VIDEO_DIM + AUDIO_DIM) * noise_level
        triplets.append(render(scene, sid, seed, noise))
    return DatasetSplit(triplets[:n_train], triplets[n_train:], seed)


# ---------------------------------------------------------------------------
# JSONL


def _fmt_floats(values: np.ndarray) -> str:
    return "[" + ",".join(format(float(v), ".17g") for v in values) + "]"


def _record_line(t: TriModalTriplet, part: str) -> str:
    return (
        "{"
        f'"sceneId":{t.scene_id},'
        f'"split":{json.dumps(part)},'
        f'"caption":{json.dumps(t.caption)},'
        f'"videoFeat":{_fmt_floats(t.video)},'
        f'"audioFeat":{_fmt_floats(t.audio)},'
        f'"textFeat":{_fmt_floats(t.text)}'
        "}\n"
    )


def write_jsonl(split: DatasetSplit, path, parts: tuple[str, ...] = ("train", "test")) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for part in parts:
            for t in getattr(split, part):
                fh.write(_record_line(t, part))
    return path


_KEYS = {"sceneId", "split", "caption", "videoFeat", "audioFeat", "textFeat"}


def read_jsonl(path) -> DatasetSplit:
    path = Path(path)
    out = DatasetSplit()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise DatasetFormatError(path, lineno, f"malformed JSON ({err.msg})") from None
            if not isinstance(rec, dict) or not _KEYS <= rec.keys():
                raise DatasetFormatError(path, lineno, f"record lacks keys {sorted(_KEYS - set(rec or {}))}")
            if rec["split"] not in ("train", "test"):
                raise DatasetFormatError(path, lineno, f"unknown split {rec['split']!r}")
            try:
                trip = TriModalTriplet(
                    int(rec["sceneId"]),
                    rec["caption"],
                    np.array(rec["videoFeat"], dtype=np.float64),
                    np.array(rec["audioFeat"], dtype=np.float64),
                    np.array(rec["textFeat"], dtype=np.float64),
                )
            except (TypeError, ValueError) as err:
                raise DatasetFormatError(path, lineno, str(err)) from None
            if trip.video.shape != (VIDEO_DIM,) or trip.audio.shape != (AUDIO_DIM,) or trip.text.shape != (len(VOCAB),):
                raise DatasetFormatError(path, lineno, "feature vector has the wrong length")
            getattr(out, rec["split"]).append(trip)
    return out


def vocabulary_hash() -> str:
    return hashlib.sha256("\n".join(VOCAB).encode()).hexdigest()[:16]


def write_dataset(split: DatasetSplit, out_dir, noise_level: float, dedup: bool = True) -> dict[str, Path]:
    """Write ``train.jsonl``, ``test.jsonl`` and ``manifest.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "train": write_jsonl(split, out_dir / "train.jsonl", ("train",)),
        "test": write_jsonl(split, out_dir / "test.jsonl", ("test",)),
    }
    manifest = {
        "seed": split.generator_seed,
        "trainSize": len(split.train),
        "testSize": len(split.test),
        "noiseLevel": noise_level,
        "dedup": dedup,
        "vocabulary": list(VOCAB),
        "vocabularyHash": vocabulary_hash(),
        "videoDim": VIDEO_DIM,
        "audioDim": AUDIO_DIM,
    }
    paths["manifest"] = out_dir / "manifest.json"
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths


def load_dataset(path) -> DatasetSplit:
    """Read a dataset directory written by :func:`write_dataset`, or a single JSONL file."""
    path = Path(path)
    if path.is_file():
        return read_jsonl(path)
    split = DatasetSplit()
    for part in ("train", "test"):
        f = path / f"{part}.jsonl"
        if f.exists():
            getattr(split, part).extend(getattr(read_jsonl(f), part))
    manifest = path / "manifest.json"
    if manifest.exists():
        split.generator_seed = json.loads(manifest.read_text()).get("seed")
    return split
