"""Feature packs, vocabulary, word embeddings and mini-batches.

On-disk feature pack (a directory)::

    manifest.json   {"k": int, "feature_dim": int,
                     "images": [{"id": str, "blob": relpath}, ...],
                     "captions": [{"id": str, "image_id": str, "tokens": [str, ...]}, ...]}
    <blob>          raw little-endian float32, row-major, exactly k * feature_dim values

Pretrained word vectors are plain text, one ``token v1 v2 ... vd`` per line.
"""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numkit as nk
from .errors import FormatError, IntegrityError, LookupFailure, ParameterError

PAD = "<pad>"
UNK = "<unk>"
EMBEDDING_MODES = ("fixed_only", "learned_only", "concat")
BLOB_DTYPE = np.dtype("<f4")

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def tokenize(text: str) -> list[str]:
    """Lowercase, drop ASCII punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass(frozen=True)
class ImageEntry:
    id: str
    features: np.ndarray  # (k, feature_dim) float32


@dataclass(frozen=True)
class CaptionEntry:
    id: str
    image_id: str
    tokens: tuple[str, ...]


@dataclass
class FeaturePack:
    """Validated, read-only corpus of region features and captions."""

    k: int
    feature_dim: int
    images: list[ImageEntry]
    captions: list[CaptionEntry]
    _image_index: dict[str, int] = field(init=False, repr=False)
    _caption_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.images:
            raise IntegrityError("feature pack contains no images")
        if not self.captions:
            raise IntegrityError("feature pack contains no captions")
        self._image_index = {}
        for i, img in enumerate(self.images):
            if img.id in self._image_index:
                raise IntegrityError(f"duplicate image id {img.id!r}")
            if img.features.shape != (self.k, self.feature_dim):
                raise FormatError(
                    f"image {img.id!r}: features have shape {img.features.shape}, "
                    f"expected ({self.k}, {self.feature_dim})"
                )
            self._image_index[img.id] = i
        self._caption_index = {}
        covered = set()
        for i, cap in enumerate(self.captions):
            if cap.id in self._caption_index:
                raise IntegrityError(f"duplicate caption id {cap.id!r}")
            if cap.image_id not in self._image_index:
                raise IntegrityError(f"caption {cap.id!r} references unknown image {cap.image_id!r}")
            if not cap.tokens:
                raise IntegrityError(f"caption {cap.id!r} has no tokens")
            self._caption_index[cap.id] = i
            covered.add(cap.image_id)
        missing = [img.id for img in self.images if img.id not in covered]
        if missing:
            raise IntegrityError(f"images without captions: {missing[:5]}")

    def image(self, image_id: str) -> ImageEntry:
        return self.images[self.image_position(image_id)]

    def caption(self, caption_id: str) -> CaptionEntry:
        return self.captions[self.caption_position(caption_id)]

    def image_position(self, image_id: str) -> int:
        try:
            return self._image_index[image_id]
        except KeyError:
            raise LookupFailure(f"unknown image id {image_id!r}") from None

    def caption_position(self, caption_id: str) -> int:
        try:
            return self._caption_index[caption_id]
        except KeyError:
            raise LookupFailure(f"unknown caption id {caption_id!r}") from None

    def captions_of(self, image_id: str) -> list[int]:
        return [i for i, c in enumerate(self.captions) if c.image_id == image_id]

    def caption_image_positions(self) -> np.ndarray:
        return np.array([self._image_index[c.image_id] for c in self.captions], dtype=np.int64)

    def subset(self, image_ids: Sequence[str]) -> "FeaturePack":
        keep = set(image_ids)
        return FeaturePack(
            self.k,
            self.feature_dim,
            [img for img in self.images if img.id in keep],
            [c for c in self.captions if c.image_id in keep],
        )


def save_feature_pack(pack: FeaturePack, directory: str | Path) -> Path:
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    images = []
    for i, img in enumerate(pack.images):
        rel = f"features/{i:06d}.bin"
        np.ascontiguousarray(img.features, dtype=BLOB_DTYPE).tofile(directory / rel)
        images.append({"id": img.id, "blob": rel})
    manifest = {
        "k": pack.k,
        "feature_dim": pack.feature_dim,
        "images": images,
        "captions": [{"id": c.id, "image_id": c.image_id, "tokens": list(c.tokens)} for c in pack.captions],
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_feature_pack(manifest_path: str | Path) -> FeaturePack:
    """Load and validate a pack from its directory or ``manifest.json`` path."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
        k = int(manifest["k"])
        feature_dim = int(manifest["feature_dim"])
        image_specs = manifest["images"]
        caption_specs = manifest["captions"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc
    if k < 1 or feature_dim < 1:
        raise FormatError(f"{path}: k and feature_dim must be positive")

    expected = k * feature_dim * BLOB_DTYPE.itemsize
    images = []
    for spec in image_specs:
        blob = path.parent / spec["blob"]
        if not blob.exists():
            raise FileNotFoundError(f"image {spec['id']!r}: blob not found: {blob}")
        raw = blob.read_bytes()
        if len(raw) != expected:
            raise FormatError(f"image {spec['id']!r}: blob has {len(raw)} bytes, expected {expected}")
        feats = np.frombuffer(raw, dtype=BLOB_DTYPE).reshape(k, feature_dim).astype(np.float32)
        images.append(ImageEntry(str(spec["id"]), feats))
    captions = [CaptionEntry(str(c["id"]), str(c["image_id"]), tuple(c["tokens"])) for c in caption_specs]
    return FeaturePack(k, feature_dim, images, captions)


# ---------------------------------------------------------------------------
# vocabulary


@dataclass
class Vocabulary:
    """Token/id bijection. Ids 0 and 1 are ``<pad>`` and ``<unk>``."""

    tokens: list[str]
    min_count: int = 1

    def __post_init__(self):
        if self.tokens[:2] != [PAD, UNK]:
            raise IntegrityError("vocabulary must start with <pad>, <unk>")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise IntegrityError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def id(self, token: str) -> int:
        return self.index.get(token, 1)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, 1) for t in tokens]


def build_vocabulary(captions: Iterable[str | Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Count tokens and keep those seen at least ``min_count`` times.

    Ids are assigned by descending frequency, ties broken lexicographically.
    """
    if min_count < 1:
        raise ParameterError(f"min_count must be >= 1, got {min_count}")
    counts: Counter[str] = Counter()
    seen = 0
    for cap in captions:
        toks = tokenize(cap) if isinstance(cap, str) else list(cap)
        counts.update(toks)
        seen += 1
    if seen == 0:
        raise IntegrityError("cannot build a vocabulary from zero captions")
    counts.pop(PAD, None)
    counts.pop(UNK, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary([PAD, UNK, *kept], min_count=min_count)


# ---------------------------------------------------------------------------
# embeddings


@dataclass
class EmbeddingSource:
    """Frozen pretrained table plus the embedding mode.

    The trainable table is a model parameter (``embed_learned``) and is passed
    to :func:`embed_tokens` separately. ``known`` flags rows that were present
    in the pretrained file; other rows of ``fixed_table`` are zero.
    """

    fixed_table: np.ndarray | None
    mode: str = "concat"
    known: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in EMBEDDING_MODES:
            raise ParameterError(f"unknown embedding mode {self.mode!r}; expected one of {EMBEDDING_MODES}")
        if self.mode != "learned_only" and self.fixed_table is None:
            raise ParameterError(f"embedding mode {self.mode!r} needs a pretrained table")

    @property
    def fixed_dim(self) -> int:
        return 0 if self.fixed_table is None else self.fixed_table.shape[1]


def load_word_vectors(path: str | Path, vocab: Vocabulary, dim: int | None = None) -> EmbeddingSource:
    """Read text-format vectors into a ``len(vocab) x dim`` table.

    Tokens missing from the file keep a zero row.
    """
    table = None
    known = np.zeros(len(vocab), dtype=bool)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            if dim is None:
                dim = len(parts) - 1
            if len(parts) - 1 != dim:
                raise FormatError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
            if table is None:
                table = np.zeros((len(vocab), dim), dtype=np.float32)
            idx = vocab.index.get(parts[0])
            if idx is None:
                continue
            table[idx] = np.asarray(parts[1:], dtype=np.float32)
            known[idx] = True
    if table is None:
        table = np.zeros((len(vocab), dim or 300), dtype=np.float32)
    return EmbeddingSource(table, mode="concat", known=known)


def save_word_vectors(path: str | Path, vocab: Vocabulary, table: np.ndarray, known: np.ndarray | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, tok in enumerate(vocab.tokens):
            if i < 2 or (known is not None and not known[i]):
                continue
            fh.write(tok + " " + " ".join(repr(float(x)) for x in table[i]) + "\n")


def embed_tokens(ids, mode: str, fixed_table=None, learned_table=None) -> nk.Tensor:
    """Word vectors for an id array of any shape; output gains a last axis d_w.

    Fixed rows never receive gradient; learned rows do.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if mode not in EMBEDDING_MODES:
        raise ParameterError(f"unknown embedding mode {mode!r}")
    parts = []
    for table, wanted in ((fixed_table, mode != "learned_only"), (learned_table, mode != "fixed_only")):
        if not wanted:
            continue
        if table is None:
            raise ParameterError(f"embedding mode {mode!r} is missing a table")
        rows = nk.as_tensor(table).shape[0]
        if ids.size and (ids.min() < 0 or ids.max() >= rows):
            raise IntegrityError(f"token id out of range for embedding table with {rows} rows")
        fixed = table is fixed_table
        t = nk.Tensor(nk.as_tensor(table).data) if fixed else table
        parts.append(nk.take_rows(t, ids))
    return parts[0] if len(parts) == 1 else nk.concat(parts, axis=-1)


# ---------------------------------------------------------------------------
# batching


@dataclass
class MiniBatch:
    image_ids: list[str]
    caption_ids: list[str]
    features: np.ndarray  # (B, k, feature_dim)
    token_ids: np.ndarray  # (B, n_max), padded with the pad id
    lengths: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.caption_ids)

    @property
    def word_mask(self) -> np.ndarray:
        return np.arange(self.token_ids.shape[1])[None, :] < self.lengths[:, None]

    @property
    def same_image(self) -> np.ndarray:
        """``[a, b]`` True when a != b but both rows share a ground-truth image."""
        ids = np.array(self.image_ids, dtype=object)
        same = ids[:, None] == ids[None, :]
        np.fill_diagonal(same, False)
        return same


def pad_token_ids(seqs: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max())), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def make_batch(pack: FeaturePack, vocab: Vocabulary, caption_positions: Sequence[int]) -> MiniBatch:
    caps = [pack.captions[i] for i in caption_positions]
    imgs = [pack.image(c.image_id) for c in caps]
    token_ids, lengths = pad_token_ids([vocab.encode(c.tokens) for c in caps], vocab.pad_id)
    return MiniBatch(
        image_ids=[c.image_id for c in caps],
        caption_ids=[c.id for c in caps],
        features=np.stack([im.features for im in imgs]),
        token_ids=token_ids,
        lengths=lengths,
    )


def choose_batch_captions(pack: FeaturePack, B: int, rng: np.random.Generator) -> list[int]:
    """B distinct caption positions, preferring distinct images.

    A random caption order is scanned once taking captions of unseen images;
    any shortfall is filled from the remaining captions in the same order.
    """
    if B < 2:
        raise ParameterError(f"batch size must be >= 2, got {B}")
    if B > len(pack.captions):
        raise ParameterError(f"batch size {B} exceeds caption count {len(pack.captions)}")
    order = rng.permutation(len(pack.captions))
    picked, rest, seen = [], [], set()
    for pos in order:
        img = pack.captions[pos].image_id
        if img in seen or len(picked) == B:
            rest.append(int(pos))
        else:
            seen.add(img)
            picked.append(int(pos))
    picked.extend(rest[: B - len(picked)])
    return picked


def sample_minibatch(pack: FeaturePack, vocab: Vocabulary, B: int, rng_seed: int) -> MiniBatch:
    rng = np.random.default_rng(rng_seed)
    return make_batch(pack, vocab, choose_batch_captions(pack, B, rng))


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticCorpus:
    pack: FeaturePack
    vocab: Vocabulary
    embeddings: EmbeddingSource
    codes: np.ndarray  # (n_images, latent_dim) planted unit-norm codes
    region_maps: np.ndarray  # (k, feature_dim, latent_dim)
    word_maps: np.ndarray  # (n_words, word_dim, latent_dim)


def synth_corpus(
    n_images: int,
    captions_per_image: int,
    k: int,
    n_words: int,
    noise: float,
    rng_seed: int,
    feature_dim: int = 2048,
    word_dim: int = 300,
    latent_dim: int = 16,
) -> SyntheticCorpus:
    """Planted-code corpus whose ground-truth pairs are linearly separable.

    Image ``i`` draws a unit code ``z_i``. Region ``r`` is ``P_r z_i`` plus
    Gaussian noise and word ``j`` of every caption of image ``i`` has the
    pretrained vector ``Q_j z_i`` plus noise. Each caption owns its tokens.
    """
    for name, v in (("n_images", n_images), ("captions_per_image", captions_per_image), ("k", k), ("n_words", n_words)):
        if v < 1:
            raise ParameterError(f"{name} must be >= 1, got {v}")
    if noise < 0:
        raise ParameterError(f"noise must be >= 0, got {noise}")
    rng = np.random.default_rng(rng_seed)
    codes = rng.standard_normal((n_images, latent_dim))
    codes /= np.linalg.norm(codes, axis=1, keepdims=True)

    shared_p = rng.standard_normal((feature_dim, latent_dim))
    region_maps = (shared_p[None] + 0.5 * rng.standard_normal((k, feature_dim, latent_dim))) / np.sqrt(latent_dim)
    shared_q = rng.standard_normal((word_dim, latent_dim))
    word_maps = (shared_q[None] + 0.5 * rng.standard_normal((n_words, word_dim, latent_dim))) / np.sqrt(latent_dim)

    images, captions, planted = [], [], {}
    for i in range(n_images):
        feats = np.einsum("rfl,l->rf", region_maps, codes[i]) + noise * rng.standard_normal((k, feature_dim))
        image_id = f"img{i:04d}"
        images.append(ImageEntry(image_id, feats.astype(np.float32)))
        for c in range(captions_per_image):
            words = [f"i{i}c{c}w{j}" for j in range(n_words)]
            vec = np.einsum("jdl,l->jd", word_maps, codes[i]) + noise * rng.standard_normal((n_words, word_dim))
            captions.append(CaptionEntry(f"{image_id}_cap{c}", image_id, tuple(words)))
            planted.update(zip(words, vec))
    pack = FeaturePack(k, feature_dim, images, captions)
    vocab = build_vocabulary((c.tokens for c in captions), min_count=1)
    table = np.zeros((len(vocab), word_dim), dtype=np.float32)
    for tok, vec in planted.items():
        table[vocab.index[tok]] = vec
    known = np.ones(len(vocab), dtype=bool)
    known[:2] = False
    return SyntheticCorpus(pack, vocab, EmbeddingSource(table, "concat", known), codes, region_maps, word_maps)


def write_synthetic(corpus: SyntheticCorpus, directory: str | Path) -> Path:
    """Write the pack plus ``vectors.txt`` in the standard formats."""
    directory = Path(directory)
    save_feature_pack(corpus.pack, directory)
    save_word_vectors(directory / "vectors.txt", corpus.vocab, corpus.embeddings.fixed_table, corpus.embeddings.known)
    return directory
