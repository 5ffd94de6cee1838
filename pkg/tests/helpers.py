"""Shared builders for the test modules."""

import numpy as np

from shan.alignment import Hyperparams
from shan.corpus import EmbeddingSource, build_vocabulary
from shan.model import Model


def random_model(seed, k=4, n=5, D=8, feature_dim=6, word_dim=3, mode="concat", hyper=None, vocab_words=7):
    """A 64-bit model with every parameter (biases included) randomised, plus one input pair."""
    rng = np.random.default_rng(seed)
    vocab = build_vocabulary([[f"w{i}" for i in range(vocab_words)]])
    fixed = rng.normal(size=(len(vocab), word_dim))
    model = Model.create(
        vocab,
        EmbeddingSource(fixed, mode if mode != "learned_only" else "concat"),
        hyper or Hyperparams(),
        joint_dim=D,
        feature_dim=feature_dim,
        word_dim=word_dim,
        embedding_mode=mode,
        seed=seed,
        precision="float64",
    )
    params = {name: rng.normal(scale=0.6, size=v.shape) for name, v in model.params.items()}
    model = model.with_params(params)
    O = rng.normal(size=(k, feature_dim))
    ids = rng.integers(2, len(vocab), size=n)
    return model, O, ids
