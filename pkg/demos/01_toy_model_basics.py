"""Toy decoder walkthrough: prefill, decode, paged cache, perplexity.

Builds a small deterministic transformer, shows that step-by-step decoding
reproduces the prefill logits, inspects the paged KV cache, and round-trips
the weights through the binary+sidecar format.
"""

import tempfile
from pathlib import Path

import numpy as np

from specsparse import (
    ModelConfig,
    forward_decode,
    forward_prefill,
    init_model,
    load_weights,
    perplexity,
    save_weights,
    synthetic_corpus,
)

# ---------------------------------------------------------------------------
# A model is fully determined by its config (shape + seed).
# ---------------------------------------------------------------------------
config = ModelConfig(layers=2, heads=4, head_dim=8, vocab=64, max_seq=128, page_size=4, seed=7)
weights = init_model(config)
print(f"model: {config.layers} layers x {config.heads} heads, hidden={config.hidden}")

tokens = synthetic_corpus(seed=11, samples=1, length=24, vocab=config.vocab)[0]

# ---------------------------------------------------------------------------
# Prefill the whole sequence at once, recording attention.
# ---------------------------------------------------------------------------
record, cache = forward_prefill(weights, tokens, record_attention=True)
print(f"prefill logits: {record.logits.shape}, cache length {cache.length}")
attn = record.attention[(0, 0)]
print(f"attention head (0,0): row 5 sums to {attn[5, :6].sum():.6f} over its causal prefix")

# ---------------------------------------------------------------------------
# Decoding token by token gives the same logits as the one-shot prefill.
# ---------------------------------------------------------------------------
_, step_cache = forward_prefill(weights, tokens[:-1])
step = forward_decode(weights, int(tokens[-1]), step_cache)
drift = np.abs(step.logits[0] - record.logits[-1]).max()
print(f"decode-vs-prefill max |logit drift|: {drift:.2e}")

# ---------------------------------------------------------------------------
# The cache is paged: fixed-size position blocks with residency tags that
# never affect the numbers, only the offload cost model.
# ---------------------------------------------------------------------------
print(f"cache pages: {cache.page_count} pages of {cache.page_size} positions")
cache.set_tier(0, 0, 0, "slow")
print(f"page (layer 0, head 0, page 0) now lives in the {cache.tier(0, 0, 0)} tier")

# ---------------------------------------------------------------------------
# Perplexity and weight persistence.
# ---------------------------------------------------------------------------
print(f"perplexity on the sample: {perplexity(weights, tokens):.3f} (vocab={config.vocab})")

with tempfile.TemporaryDirectory() as tmp:
    blob = Path(tmp) / "model.bin"
    save_weights(weights, blob)
    reloaded = load_weights(blob)
    same = np.array_equal(reloaded.lm_head, weights.lm_head)
    print(f"weights round-trip bit-identical: {same}")
