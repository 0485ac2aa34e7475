"""Experiment harness: mask recall, oracle prunable ratio, perplexity curves.

Reports embed the fully resolved configuration and seeds, never timestamps,
so re-running an experiment with the same config produces byte-identical
bodies. CSV reports start with one ``#``-prefixed JSON line holding that
configuration; JSON reports carry it under a ``config`` key.

Sweep points are evaluated sequentially in deterministic order.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .errors import InputError
from .headmap import HeadMapping, MappingSet
from .numkit import prng_stream, topk_indices
from .sparsity import (
    SCOPE_DECODE,
    SCOPE_PREFILL_DECODE,
    SparsityConfig,
    draft_masks_decode,
    draft_masks_prefill,
    remap_masks,
)
from .toymodel import (
    ModelWeights,
    forward_prefill,
    perplexity_of_logits,
    replay_position,
)


def mask_recall(
    draft: ModelWeights,
    target: ModelWeights,
    mapping: HeadMapping,
    corpus: list[list[int]],
    k: int,
    *,
    page_size: int = 1,
    decode_positions: int | None = None,
    baseline_seed: int = 0,
) -> dict:
    """Mean overlap of the draft-derived mask with the target's own top-k.

    Per decode position and target head: ``|mask ∩ dense-target top-k| /
    min(k, context)``, averaged over positions, heads and samples. Decode
    positions are the trailing ``decode_positions`` rows of each sample
    (default: the last quarter), where the context is long and selection is
    non-trivial; there a random mask of the same budget scores about
    ``k / N``, which is reported alongside from a seeded draw.
    """
    if mapping.draft_config != draft.config or mapping.target_config != target.config:
        raise InputError("mapping was built for different model configs")
    if not corpus:
        raise InputError("recall needs a non-empty corpus")
    cfg = SparsityConfig(budget=k, page_size=page_size)
    rng = prng_stream(baseline_seed)
    draft_heads = {d for d, _ in mapping.entries.values()}

    sts_sum = rand_sum = 0.0
    count = 0
    for sample in corpus:
        rec_d, _ = forward_prefill(draft, sample, record_attention=True)
        rec_t, _ = forward_prefill(target, sample, record_attention=True)
        n = len(sample)
        window = decode_positions if decode_positions is not None else max(1, n // 4)
        for t in range(max(0, n - window), n):
            ctx = t + 1
            denom = min(k, ctx)
            rows = {
                dh: rec_d.attention[dh][t, :ctx]
                for dh in draft_heads
                if dh in rec_d.attention
            }
            masks = remap_masks(draft_masks_decode(rows, cfg), mapping)
            for th in mapping.entries:
                oracle = topk_indices(rec_t.attention[th][t, :ctx], k)
                sts_sum += np.intersect1d(masks[th], oracle).size / denom
                random_mask = rng.choice(ctx, size=denom, replace=False)
                rand_sum += np.intersect1d(random_mask, oracle).size / denom
                count += 1
    return {
        "k": k,
        "page_size": page_size,
        "recall": sts_sum / count,
        "random_baseline": rand_sum / count,
        "positions_evaluated": count,
    }


def oracle_prunable_ratio(
    weights: ModelWeights, tokens: list[int], ppl_threshold: float
) -> dict:
    """Largest per-layer sparsity whose perplexity cost stays under a bound.

    For each layer independently (others dense), the layer's heads keep
    only the top-k entries of their *own* dense attention rows; a binary
    search finds the smallest k whose perplexity increase over dense stays
    within the threshold. The reported ratio is ``1 - k/N``.
    """
    if ppl_threshold < 0:
        raise InputError("ppl_threshold must be >= 0")
    tokens = [int(t) for t in tokens]
    n = len(tokens)
    rec_dense, _ = forward_prefill(weights, tokens, record_attention=True)
    ppl_dense = perplexity_of_logits(rec_dense.logits, tokens)
    cfg = weights.config

    def ppl_with_layer_budget(layer: int, k: int) -> float:
        masks = {
            (layer, h): [
                topk_indices(rec_dense.attention[(layer, h)][t, : t + 1], k)
                for t in range(n)
            ]
            for h in range(cfg.heads)
        }
        rec, _ = forward_prefill(weights, tokens, masks=masks)
        return perplexity_of_logits(rec.logits, tokens)

    ratios: list[float] = []
    budgets: list[int] = []
    for layer in range(cfg.layers):
        if ppl_with_layer_budget(layer, 1) - ppl_dense <= ppl_threshold:
            k_min = 1
        else:
            lo, hi = 1, n  # predicate holds at n (full budget == dense)
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if ppl_with_layer_budget(layer, mid) - ppl_dense <= ppl_threshold:
                    hi = mid
                else:
                    lo = mid
            k_min = hi
        budgets.append(k_min)
        ratios.append(1.0 - k_min / n)
    return {
        "threshold": ppl_threshold,
        "ppl_dense": ppl_dense,
        "context_length": n,
        "budgets": budgets,
        "per_layer_ratio": ratios,
    }


def ppl_vs_budget(
    draft: ModelWeights,
    target: ModelWeights,
    mappings: MappingSet,
    corpus: list[list[int]],
    budgets: list,
    scopes: list[str],
) -> list[dict]:
    """Perplexity of the sparse target across a budget sweep.

    Decode scope evaluates each position as a fresh decode over the
    dense-built cache; prefill+decode builds the cache itself through
    masked prefill. The dense reference comes from the same corpus.
    """
    if not corpus:
        raise InputError("ppl sweep needs a non-empty corpus")
    if list(budgets) != sorted(budgets, key=float):
        raise InputError("budget sweep must be sorted ascending")
    for scope in scopes:
        if scope not in (SCOPE_DECODE, SCOPE_PREFILL_DECODE):
            raise InputError(f"unknown scope {scope!r}")

    # dense prefills once per sample, reused across the sweep
    prepared = []
    dense_nll = 0.0
    total_positions = 0
    for sample in corpus:
        sample = [int(t) for t in sample]
        rec_d, _ = forward_prefill(draft, sample, record_attention=True)
        rec_t, cache_t = forward_prefill(target, sample)
        n = len(sample)
        dense_nll += math.log(perplexity_of_logits(rec_t.logits, sample)) * (n - 1)
        total_positions += n - 1
        prepared.append((sample, rec_d, cache_t))
    ppl_dense = math.exp(dense_nll / total_positions)

    rows = []
    for budget in budgets:
        for scope in scopes:
            cfg = SparsityConfig(budget=budget, scope=scope)
            nll = 0.0
            for sample, rec_d, cache_t in prepared:
                n = len(sample)
                mapping = mappings.nearest(cfg.tokens_for_context(n))
                if scope == SCOPE_PREFILL_DECODE:
                    masks = remap_masks(
                        draft_masks_prefill(rec_d.attention, cfg), mapping
                    )
                    rec, _ = forward_prefill(target, sample, masks=masks)
                    nll += math.log(perplexity_of_logits(rec.logits, sample)) * (n - 1)
                else:
                    logits = np.zeros((n - 1, target.config.vocab), dtype=np.float32)
                    for t in range(1, n):
                        rows_d = {
                            head: rec_d.attention[head][t - 1, :t]
                            for head in rec_d.attention
                        }
                        masks_t = remap_masks(draft_masks_decode(rows_d, cfg), mapping)
                        logits[t - 1] = replay_position(
                            target, cache_t, t - 1, sample[t - 1], masks=masks_t
                        )
                    nll += math.log(perplexity_of_logits(logits, sample)) * (n - 1)
            ppl = math.exp(nll / total_positions)
            rows.append(
                {
                    "budget": budget,
                    "scope": scope,
                    "ppl": ppl,
                    "delta_ppl": ppl - ppl_dense,
                }
            )
    return rows


def write_json_report(path, config: dict, result: dict) -> None:
    """Single-object JSON report with the resolved config embedded."""
    doc = {"config": config, "result": result}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def render_csv(config: dict, header: list[str], rows: list[tuple]) -> str:
    """CSV body with a one-line JSON reproducibility header comment."""
    buf = io.StringIO()
    buf.write("# " + json.dumps(config, sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def write_csv_report(path, config: dict, header: list[str], rows: list[tuple]) -> None:
    Path(path).write_text(render_csv(config, header, rows))
