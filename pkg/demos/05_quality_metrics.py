"""Quality metrics: mask recall, perplexity vs budget, prunable ratio.

How good are the draft-derived masks? Three views: overlap with the
target's own top-k attention (recall vs a random baseline), the perplexity
cost of shrinking the budget under both sparsity scopes, and the per-layer
ceiling measured with the target's own oracle masks.
"""

from specsparse import (
    MappingSet,
    ModelConfig,
    collect_traces,
    find_head_mapping,
    planted_model_pair,
    synthetic_corpus,
)
from specsparse.evalkit import mask_recall, oracle_prunable_ratio, ppl_vs_budget

n = 64
target_cfg = ModelConfig(layers=4, heads=4, head_dim=8, vocab=64, max_seq=n, page_size=4, seed=100)
draft, target, _ = planted_model_pair(target_cfg, draft_layers=2, seed=0)
corpus = synthetic_corpus(seed=1, samples=4, length=n, vocab=64)
mapping = find_head_mapping(collect_traces(draft, target, corpus), 8)

# ---------------------------------------------------------------------------
# Recall of the remapped draft mask against the target's dense top-k,
# measured at decode positions (long context), with a random baseline.
# ---------------------------------------------------------------------------
r = mask_recall(draft, target, mapping, corpus, k=8)
print(
    f"mask recall @ k/N = 8/{n}: {r['recall']:.3f} "
    f"(random baseline {r['random_baseline']:.3f}, "
    f"{r['recall'] / r['random_baseline']:.1f}x better)"
)
r_page = mask_recall(draft, target, mapping, corpus, k=8, page_size=4)
print(f"same budget at page granularity 4: {r_page['recall']:.3f}")

# ---------------------------------------------------------------------------
# Perplexity across a budget sweep, decode-only vs prefill+decode scope.
# ---------------------------------------------------------------------------
rows = ppl_vs_budget(
    draft, target, MappingSet([mapping]), corpus[:2],
    budgets=[4, 8, 16, n], scopes=["decode", "prefill-decode"],
)
print(f"\n{'budget':>7} {'scope':>16} {'ppl':>8} {'delta':>9}")
for row in rows:
    print(f"{row['budget']:>7} {row['scope']:>16} {row['ppl']:>8.3f} {row['delta_ppl']:>+9.4f}")

# ---------------------------------------------------------------------------
# Oracle ceiling: per layer, the largest sparsity whose perplexity cost
# stays under the threshold when that layer keeps only its own top-k.
# ---------------------------------------------------------------------------
tokens = corpus[0]
result = oracle_prunable_ratio(target, tokens, ppl_threshold=0.01)
print(f"\noracle prunable ratio (threshold 0.01, N={n}):")
for layer, (ratio, budget) in enumerate(zip(result["per_layer_ratio"], result["budgets"])):
    bar = "#" * int(ratio * 40)
    print(f"  layer {layer}: {ratio:5.2f} (keep {budget:>3} tokens) {bar}")
