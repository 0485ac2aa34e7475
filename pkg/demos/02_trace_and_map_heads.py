"""Offline head mapping: collect attention traces, pair target heads.

Runs a dense prefill of a small corpus through both models, persists the
traces to the versioned directory format, and builds the per-k mapping that
pairs every target head with the draft head whose top-k attention indices
overlap it most.
"""

import tempfile
from pathlib import Path

from specsparse import (
    ModelConfig,
    collect_traces,
    find_head_mapping,
    init_model,
    load_mapping,
    load_traces,
    save_mapping,
    save_traces,
    synthetic_corpus,
)

draft = init_model(ModelConfig(layers=1, heads=2, head_dim=8, vocab=64, max_seq=64, seed=1))
target = init_model(ModelConfig(layers=3, heads=4, head_dim=8, vocab=64, max_seq=64, seed=2))
corpus = synthetic_corpus(seed=3, samples=8, length=48, vocab=64)

# ---------------------------------------------------------------------------
# Trace generation: dense prefill of each sample through both models.
# ---------------------------------------------------------------------------
traces = collect_traces(draft, target, corpus)
print(f"collected {len(traces.samples)} samples, trace id {traces.content_id()}")

with tempfile.TemporaryDirectory() as tmp:
    trace_dir = Path(tmp) / "traces"
    save_traces(traces, trace_dir)
    blobs = sorted(p.name for p in trace_dir.glob("*.bin"))
    print(f"persisted {len(blobs)} blobs + manifest (e.g. {blobs[0]})")
    traces = load_traces(trace_dir)  # checksum and invariant validation

    # -----------------------------------------------------------------------
    # One mapping per sparsity parameter k: the same trace set can serve
    # several budgets.
    # -----------------------------------------------------------------------
    for k in (4, 8):
        mapping = find_head_mapping(traces, k)
        stats = mapping.layer_distance_stats()
        print(
            f"k={k}: mapped {len(mapping.entries)} target heads onto "
            f"{len({d for d, _ in mapping.entries.values()})} draft heads, "
            f"mean |layer distance| {stats['mean']:.2f}"
        )
        path = Path(tmp) / f"map_k{k}.json"
        save_mapping(mapping, path)
        reloaded = load_mapping(path)
        assert reloaded.entries == mapping.entries

    sample_head = (2, 1)
    partner, score = mapping.entries[sample_head]
    print(f"target head {sample_head} -> draft head {partner} (overlap score {score})")
