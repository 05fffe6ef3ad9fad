"""Per-modality MLP encoders, parameter containers and checkpoint files."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from . import diffcore
from .diffcore import DimensionError, Tensor
from .geometry import ConfigError

MODALITIES = ("text", "video", "audio")


class DegenerateEncodingError(ValueError):
    def __init__(self, row: int, norm: float):
        super().__init__(f"encoder output row {row} has norm {norm:.3e} before normalization")
        self.row = row


class CheckpointError(IOError):
    """Checkpoint files are missing, truncated or inconsistent."""


@dataclass
class MlpEncoder:
    """Linear layers with ReLU in between.

    ``layers`` holds ``(weight[in, out], bias[out])`` pairs, either numpy
    arrays or tape-bound :class:`Tensor` leaves. When ``normalize`` is set the
    output rows are projected onto the unit sphere.
    """

    layers: list[tuple[Any, Any]]
    normalize: bool = True

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    @property
    def hidden_dims(self) -> list[int]:
        return [w.shape[1] for w, _ in self.layers[:-1]]


@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int
    hidden: tuple[int, ...] = (256,)
    output_dim: int = 128

    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_encoder(spec: EncoderSpec, rng: np.random.Generator, normalize: bool = True) -> MlpEncoder:
    dims = spec.dims()
    if any(int(d) <= 0 for d in dims):
        raise ConfigError(f"encoder dimensions must be positive, got {dims}")
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        b = glorot_bound(fan_in, fan_out)
        layers.append((rng.uniform(-b, b, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return MlpEncoder(layers, normalize=normalize)


def forward(enc: MlpEncoder, x) -> Tensor:
    """Run the MLP; output rows are unit norm when ``enc.normalize``."""
    x = diffcore.as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != enc.input_dim:
        raise DimensionError(f"encoder expects (n, {enc.input_dim}) input, got {x.shape}")
    h = x
    last = len(enc.layers) - 1
    for k, (w, b) in enumerate(enc.layers):
        h = diffcore.add_row(diffcore.matmul(h, w), b)
        if k < last:
            h = diffcore.relu(h)
    if not enc.normalize:
        return h
    try:
        return diffcore.row_l2_normalize(h)
    except diffcore.DegenerateInputError as err:
        raise DegenerateEncodingError(err.row, err.norm) from None


def encode(enc: MlpEncoder, x) -> np.ndarray:
    """Forward pass without gradient tracking."""
    return forward(_unbound(enc), x).data


def _unbound(enc: MlpEncoder) -> MlpEncoder:
    if enc.layers and isinstance(enc.layers[0][0], Tensor):
        return MlpEncoder([(w.data, b.data) for w, b in enc.layers], enc.normalize)
    return enc


@dataclass
class ModelParams:
    text: MlpEncoder
    video: MlpEncoder
    audio: MlpEncoder
    fusion: MlpEncoder | None = None
    dtm_head: MlpEncoder | None = None

    def encoders(self) -> Iterator[tuple[str, MlpEncoder]]:
        for name in ("text", "video", "audio", "fusion", "dtm_head"):
            enc = getattr(self, name)
            if enc is not None:
                yield name, enc

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, enc in self.encoders():
            for k, (w, b) in enumerate(enc.layers):
                out[f"{name}.{k}.weight"] = _unbound_array(w)
                out[f"{name}.{k}.bias"] = _unbound_array(b)
        return out

    def with_arrays(self, arrays: dict[str, Any]) -> "ModelParams":
        """Copy of the structure with every parameter looked up in ``arrays``."""
        kwargs = {}
        for name, enc in self.encoders():
            layers = [(arrays[f"{name}.{k}.weight"], arrays[f"{name}.{k}.bias"]) for k in range(len(enc.layers))]
            kwargs[name] = MlpEncoder(layers, enc.normalize)
        return ModelParams(**kwargs)

    def bind(self, tape: diffcore.Tape) -> tuple["ModelParams", dict[str, Tensor]]:
        """Register every parameter as a leaf on ``tape``."""
        leaves = {k: tape.leaf(v, name=k) for k, v in self.named_arrays().items()}
        return self.with_arrays(leaves), leaves

    def architecture(self) -> dict[str, dict]:
        return {
            name: {
                "input_dim": enc.input_dim,
                "hidden": enc.hidden_dims,
                "output_dim": enc.output_dim,
                "normalize": enc.normalize,
            }
            for name, enc in self.encoders()
        }

    def embed(self, text, video, audio) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return encode(self.text, text), encode(self.video, video), encode(self.audio, audio)


def _unbound_array(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else v


@dataclass(frozen=True)
class ModelSpec:
    text_dim: int
    video_dim: int
    audio_dim: int
    hidden: tuple[int, ...] = (256,)
    embed_dim: int = 128
    fusion: bool = False
    fusion_hidden: tuple[int, ...] = (256,)
    dtm_head: bool = False
    dtm_hidden: tuple[int, ...] = (128,)


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """Glorot-uniform weights and zero biases, deterministic under ``seed``.

    Each sub-network draws from its own stream so enabling the fusion layer or
    the matching head leaves the modality encoders unchanged.
    """
    def rng(tag: int) -> np.random.Generator:
        return np.random.default_rng([int(seed), tag])

    d = spec.embed_dim
    params = ModelParams(
        text=init_encoder(EncoderSpec(spec.text_dim, tuple(spec.hidden), d), rng(0)),
        video=init_encoder(EncoderSpec(spec.video_dim, tuple(spec.hidden), d), rng(1)),
        audio=init_encoder(EncoderSpec(spec.audio_dim, tuple(spec.hidden), d), rng(2)),
    )
    if spec.fusion:
        params.fusion = init_encoder(EncoderSpec(2 * d, tuple(spec.fusion_hidden), d), rng(3))
    if spec.dtm_head:
        params.dtm_head = init_encoder(EncoderSpec(4 * d, tuple(spec.dtm_hidden), 1), rng(4), normalize=False)
    return params


# ---------------------------------------------------------------------------
# checkpoint files: <stem>.bin holds little-endian float64 tensors back to back,
# <stem>.json lists names, shapes and offsets (in float64 elements).


def save_checkpoint(params: ModelParams, path: str | Path, fingerprint: str, config: dict | None = None) -> tuple[Path, Path]:
    path = Path(path)
    blob_path, meta_path = path.with_suffix(".bin"), path.with_suffix(".json")
    arrays = params.named_arrays()
    tensors, offset, chunks = [], 0, []
    for name, arr in arrays.items():
        flat = np.ascontiguousarray(arr, dtype="<f8").reshape(-1)
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += flat.size
        chunks.append(flat.tobytes())
    blob = b"".join(chunks)
    blob_path.write_bytes(blob)
    meta = {
        "format": "trialign-checkpoint/1",
        "dtype": "<f8",
        "fingerprint": fingerprint,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "architecture": params.architecture(),
        "tensors": tensors,
        "config": config or {},
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return blob_path, meta_path


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    path = Path(path)
    blob_path, meta_path = path.with_suffix(".bin"), path.with_suffix(".json")
    try:
        meta = json.loads(meta_path.read_text())
        blob = blob_path.read_bytes()
    except (OSError, json.JSONDecodeError) as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    if hashlib.sha256(blob).hexdigest() != meta.get("sha256"):
        raise CheckpointError(f"checkpoint blob {blob_path} does not match its sidecar checksum")
    data = np.frombuffer(blob, dtype="<f8")
    arrays = {}
    for t in meta["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        chunk = data[t["offset"]:t["offset"] + n]
        if chunk.size != n:
            raise CheckpointError(f"tensor {t['name']} runs past the end of {blob_path}")
        arrays[t["name"]] = chunk.astype(np.float64).reshape(t["shape"])
    kwargs = {}
    for name, arch in meta["architecture"].items():
        depth = len(arch["hidden"]) + 1
        try:
            layers = [(arrays[f"{name}.{k}.weight"], arrays[f"{name}.{k}.bias"]) for k in range(depth)]
        except KeyError as err:
            raise CheckpointError(f"checkpoint lacks tensor {err}") from None
        kwargs[name] = MlpEncoder(layers, arch["normalize"])
    return ModelParams(**kwargs), meta


def params_equal(a: ModelParams, b: ModelParams) -> bool:
    x, y = a.named_arrays(), b.named_arrays()
    return x.keys() == y.keys() and all(np.array_equal(x[k], y[k]) for k in x)
