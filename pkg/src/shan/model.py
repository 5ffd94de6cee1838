"""Model parameters, initialisation and the checkpoint container.

Checkpoint layout (all integers little-endian)::

    bytes 0..7     magic b"SHANCKP1"
    bytes 8..15    uint64 H, length of the JSON header
    H bytes        UTF-8 JSON header
    remainder      tensor data, float32 little-endian, row-major, concatenated
                   in header order

The header holds ``config`` (model dims, embedding mode, hyperparameters and
any extra training settings), ``vocab`` (token list, id order) and
``tensors``: a list of ``{"name", "shape", "offset", "frozen"}`` where
``offset`` is in bytes from the start of the data region. The frozen
pretrained table, when present, is stored as ``embed_fixed``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numkit as nk
from .alignment import Hyperparams, PairScores, score_matrix
from .corpus import EMBEDDING_MODES, EmbeddingSource, MiniBatch, Vocabulary
from .encoders import GRU_KEYS
from .errors import FormatError, ParameterError

MAGIC = b"SHANCKP1"
CKPT_DTYPE = np.dtype("<f4")


@dataclass(frozen=True)
class ModelConfig:
    joint_dim: int = 1024
    feature_dim: int = 2048
    word_dim: int = 300  # per embedding component; concat doubles it
    fixed_dim: int = 300
    vocab_size: int = 2
    embedding_mode: str = "concat"
    learned_init: str = "random"  # or "pretrained": start the learned table from the fixed one

    def __post_init__(self):
        if self.embedding_mode not in EMBEDDING_MODES:
            raise ParameterError(f"embedding_mode must be one of {EMBEDDING_MODES}")
        if self.learned_init not in ("random", "pretrained"):
            raise ParameterError("learned_init must be 'random' or 'pretrained'")
        if min(self.joint_dim, self.feature_dim, self.word_dim, self.vocab_size) < 1:
            raise ParameterError("model dimensions must be positive")

    @property
    def input_word_dim(self) -> int:
        return {
            "fixed_only": self.fixed_dim,
            "learned_only": self.word_dim,
            "concat": self.fixed_dim + self.word_dim,
        }[self.embedding_mode]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, dw = cfg.joint_dim, cfg.input_word_dim
    shapes: dict[str, tuple[int, ...]] = {"W_v": (cfg.feature_dim, D), "b_v": (D,)}
    for direction in ("fwd", "bwd"):
        for key in GRU_KEYS:
            shape = (dw, D) if key[0] == "W" else (D, D) if key[0] == "U" else (D,)
            shapes[f"gru_{direction}.{key}"] = shape
    shapes.update(
        W_tilde_v=(D, D),
        W_tilde_t=(D, D),
        W_g=(2 * D, D),
        b_g=(D,),
        W_hat_v=(1, D),
        W_hat_t=(1, D),
    )
    if cfg.embedding_mode != "fixed_only":
        shapes["embed_learned"] = (cfg.vocab_size, cfg.word_dim)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.startswith("W_hat") or name == "embed_learned":
        return shape[1]
    return shape[0]


def init_params(
    cfg: ModelConfig, seed: int = 0, dtype="float32", fixed_table: np.ndarray | None = None
) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, in a fixed name order."""
    dtype = nk.resolve_dtype(dtype)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        bound = 1.0 / np.sqrt(_fan_in(name, shape))
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    if cfg.learned_init == "pretrained" and "embed_learned" in params:
        if fixed_table is None or fixed_table.shape != params["embed_learned"].shape:
            raise ParameterError("learned_init='pretrained' needs a fixed table of the learned table's shape")
        params["embed_learned"] = np.array(fixed_table, dtype=dtype)
    return params


@dataclass
class Model:
    """Everything needed to score pairs: config, weights, vocabulary, frozen table."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    vocab: Vocabulary
    fixed_table: np.ndarray | None = None
    hyper: Hyperparams = field(default_factory=Hyperparams)
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        vocab: Vocabulary,
        embeddings: EmbeddingSource | None,
        hyper: Hyperparams | None = None,
        *,
        joint_dim: int = 1024,
        feature_dim: int = 2048,
        word_dim: int = 300,
        embedding_mode: str = "concat",
        learned_init: str = "random",
        seed: int = 0,
        precision: str = "float32",
    ) -> "Model":
        fixed = None if embeddings is None or embedding_mode == "learned_only" else embeddings.fixed_table
        if embedding_mode != "learned_only" and fixed is None:
            raise ParameterError(f"embedding mode {embedding_mode!r} needs pretrained word vectors")
        if fixed is None and learned_init == "pretrained" and embeddings is not None:
            fixed = embeddings.fixed_table
        cfg = ModelConfig(
            joint_dim=joint_dim,
            feature_dim=feature_dim,
            word_dim=word_dim,
            fixed_dim=0 if fixed is None else fixed.shape[1],
            vocab_size=len(vocab),
            embedding_mode=embedding_mode,
            learned_init=learned_init,
        )
        dtype = nk.resolve_dtype(precision)
        params = init_params(cfg, seed, dtype, fixed)
        if embedding_mode == "learned_only":
            fixed = None
        table = None if fixed is None else np.asarray(fixed, dtype=dtype)
        return cls(cfg, params, vocab, table, hyper or Hyperparams())

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def astype(self, precision) -> "Model":
        dtype = nk.resolve_dtype(precision)
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        fixed = None if self.fixed_table is None else self.fixed_table.astype(dtype)
        return Model(self.config, params, self.vocab, fixed, self.hyper, dict(self.extra))

    def with_params(self, params: Mapping[str, np.ndarray]) -> "Model":
        return Model(self.config, dict(params), self.vocab, self.fixed_table, self.hyper, self.extra)

    def with_hyper(self, hyper: Hyperparams) -> "Model":
        return Model(self.config, self.params, self.vocab, self.fixed_table, hyper, self.extra)

    def score(self, features, token_ids, word_mask, params: Mapping | None = None, trace: bool = False) -> PairScores:
        """Scores of every image in ``features`` against every caption in ``token_ids``."""
        p = self.params if params is None else params
        feats = np.asarray(features, dtype=self.dtype)
        return score_matrix(
            p, feats, token_ids, word_mask, self.hyper, self.config.embedding_mode, self.fixed_table, trace
        )

    def score_batch(self, batch: MiniBatch, params: Mapping | None = None) -> PairScores:
        return self.score(batch.features, batch.token_ids, batch.word_mask, params)


# ---------------------------------------------------------------------------
# checkpoint


def save_checkpoint(model: Model, path: str | Path) -> Path:
    path = Path(path)
    tensors = list(model.params.items())
    frozen = set()
    if model.fixed_table is not None:
        tensors.append(("embed_fixed", model.fixed_table))
        frozen.add("embed_fixed")
    index, offset = [], 0
    for name, arr in tensors:
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "frozen": name in frozen})
        offset += int(np.prod(arr.shape)) * CKPT_DTYPE.itemsize
    header = {
        "format": "shan-checkpoint",
        "version": 1,
        "dtype": "<f4",
        "config": {"model": asdict(model.config), "hyper": asdict(model.hyper), **model.extra},
        "vocab": model.vocab.tokens,
        "min_count": model.vocab.min_count,
        "tensors": index,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype=CKPT_DTYPE).tobytes())
    return path


def load_checkpoint(path: str | Path, precision: str = "float32") -> Model:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc
    data = memoryview(blob)[16 + hlen :]
    dtype = nk.resolve_dtype(precision)
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"]))
        start = entry["offset"]
        end = start + count * CKPT_DTYPE.itemsize
        if end > len(data):
            raise FormatError(f"{path}: tensor {entry['name']!r} runs past end of file")
        arrays[entry["name"]] = np.frombuffer(data[start:end], dtype=CKPT_DTYPE).reshape(entry["shape"]).astype(dtype)
    cfg_blob = dict(header["config"])
    model_cfg = ModelConfig(**cfg_blob.pop("model"))
    hyper = Hyperparams(**cfg_blob.pop("hyper"))
    fixed = arrays.pop("embed_fixed", None)
    expected = param_shapes(model_cfg)
    if set(arrays) != set(expected):
        raise FormatError(f"{path}: tensor names {sorted(arrays)} do not match config {sorted(expected)}")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise FormatError(f"{path}: tensor {name!r} has shape {arrays[name].shape}, expected {shape}")
    params = {name: arrays[name] for name in expected}
    vocab = Vocabulary(list(header["vocab"]), header.get("min_count", 1))
    return Model(model_cfg, params, vocab, fixed, hyper, cfg_blob)

