"""Two-tier KV offload in logical time: resident vs on-demand vs prefetch.

The speculative runtime logs which cache pages each round's verification
touched. Because masks exist before the target starts computing, the
prefetch strategy can enqueue all of a step's transfers up front and hide
them under compute; on-demand streaming pays the link latency serially
inside every layer.
"""

import tempfile
from pathlib import Path

from specsparse import (
    MappingSet,
    ModelConfig,
    OffloadConfig,
    SparsityConfig,
    SpecConfig,
    collect_traces,
    compare_strategies,
    find_head_mapping,
    generate,
    init_model,
    synthetic_corpus,
)
from specsparse.offloadsim import load_step_traces

target = init_model(ModelConfig(layers=4, heads=4, head_dim=8, vocab=64, max_seq=256, page_size=4, seed=3))
draft = init_model(ModelConfig(layers=1, heads=2, head_dim=8, vocab=64, max_seq=256, page_size=4, seed=4))
corpus = synthetic_corpus(seed=5, samples=4, length=40, vocab=64)
mappings = MappingSet([find_head_mapping(collect_traces(draft, target, corpus), 8)])

# ---------------------------------------------------------------------------
# Generate with a tight budget and capture the page-touch log.
# ---------------------------------------------------------------------------
cfg = SpecConfig(gamma=4, sparsity=SparsityConfig(budget=8), mappings=mappings)
with tempfile.TemporaryDirectory() as tmp:
    log = Path(tmp) / "events.jsonl"
    run = generate(draft, target, corpus[0][:24], 48, cfg, event_log=log)
    steps, layers = load_step_traces(log)
print(f"{run.stats.rounds} speculative rounds -> {len(steps)} offload steps over {layers} layers")
pages_per_step = [sum(len(p) for p in s) for s in steps]
print(f"pages touched per step: min {min(pages_per_step)}, max {max(pages_per_step)}")

# ---------------------------------------------------------------------------
# Price the same trace under all three strategies: one time unit per page
# on the link, two per layer of compute.
# ---------------------------------------------------------------------------
ocfg = OffloadConfig(
    layers=layers,
    page_bytes=OffloadConfig.default_page_bytes(page_size=4, head_dim=8),
    link_bandwidth=256,  # -> 1 unit per page
    per_layer_compute=2,
    fast_tier_capacity=max(pages_per_step) + 8,
)
reports, ratios = compare_strategies(ocfg, steps)
print(f"{'strategy':>10} {'elapsed':>8} {'transfer':>9} {'stall':>7} {'overlap':>8}")
for name, rep in reports.items():
    print(
        f"{name:>10} {rep.total_elapsed:>8} {rep.total_transfer:>9} "
        f"{rep.total_stall:>7} {rep.total_overlapped_fraction:>8.2f}"
    )
print(
    f"overhead vs fully-resident: on-demand {ratios['on_demand_vs_full']:.2f}x, "
    f"prefetch {ratios['prefetch_vs_full']:.2f}x "
    f"(prefetch/on-demand = {ratios['prefetch_vs_on_demand']:.2f})"
)
