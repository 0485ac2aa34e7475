"""Synthetic corpora and planted-correlation model pairs.

Uniformly random tokens make untrained attention nearly flat, so the
synthetic corpus plants repeated bigrams: with probability one half the next
token continues a bigram already seen in the sample, which gives
induction-style structure for attention to latch onto.

A planted model pair gives ground-truth head correspondence without
training: the target is built first, then the draft shares its token and
position embeddings and copies the query/key projections of the target's
first layers with a small seeded perturbation, leaving values, output
projections and MLPs independent.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .errors import ConfigError
from .numkit import prng_stream
from .toymodel import HeadKey, ModelConfig, ModelWeights, init_model

DEFAULT_SAMPLES = 32
DEFAULT_LENGTH = 64


def synthetic_corpus(
    seed: int,
    samples: int = DEFAULT_SAMPLES,
    length: int = DEFAULT_LENGTH,
    vocab: int = 64,
    repeat_prob: float = 0.5,
) -> list[list[int]]:
    """Seeded token streams with repeated-bigram structure."""
    rng = prng_stream(seed)
    corpus = []
    for _ in range(samples):
        toks = [int(rng.integers(vocab))]
        for _ in range(length - 1):
            prev = toks[-1]
            continuations = [toks[j + 1] for j in range(len(toks) - 1) if toks[j] == prev]
            if continuations and rng.random() < repeat_prob:
                toks.append(continuations[int(rng.integers(len(continuations)))])
            else:
                toks.append(int(rng.integers(vocab)))
        corpus.append(toks)
    return corpus


def planted_model_pair(
    target_config: ModelConfig,
    draft_layers: int | None = None,
    noise: float = 1e-3,
    seed: int = 0,
) -> tuple[ModelWeights, ModelWeights, dict[HeadKey, HeadKey]]:
    """Build a (draft, target) pair with known head correspondence.

    The draft keeps the target's heads-per-layer and head_dim (so hidden
    widths match) but uses ``draft_layers`` layers. Draft layer ``l`` copies
    target layer ``l``'s query/key projections plus noise, so its heads are
    near-exact attention twins of the same-position target heads. Returns
    the planted target-head -> draft-head pairs for the twinned layers.
    """
    if draft_layers is None:
        draft_layers = max(1, target_config.layers // 2)
    if draft_layers > target_config.layers:
        raise ConfigError("draft cannot be deeper than the target")

    target = init_model(target_config)
    draft_config = replace(target_config, layers=draft_layers, seed=seed + 1)
    draft = init_model(draft_config)

    draft.token_emb = target.token_emb.copy()
    draft.pos_emb = target.pos_emb.copy()
    rng = prng_stream(seed)
    for layer in range(draft_layers):
        jitter_q = (noise * rng.standard_normal(target.wq[layer].shape)).astype(np.float32)
        jitter_k = (noise * rng.standard_normal(target.wk[layer].shape)).astype(np.float32)
        draft.wq[layer] = target.wq[layer] + jitter_q
        draft.wk[layer] = target.wk[layer] + jitter_k

    planted = {
        (layer, head): (layer, head)
        for layer in range(draft_layers)
        for head in range(target_config.heads)
    }
    return draft, target, planted
