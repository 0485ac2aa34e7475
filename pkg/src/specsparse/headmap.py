"""Offline construction of the target-head to draft-head mapping.

For every target attention head, the builder scans *all* draft heads (a
global search, not layer-aligned) and keeps the one whose per-row top-k
index sets overlap the target's own top-k sets the most, summed over query
rows and samples. Draft heads may serve multiple target heads (one-to-many).
Mappings are k-specific: one mapping is built and stored per sparsity
parameter k.

The search is a pure offline computation; per-target-head scans are
independent and the result does not depend on evaluation order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation, InputError
from .numkit import topk_indices
from .tracestore import TraceSet
from .toymodel import HeadKey, ModelConfig

MAPPING_FORMAT_VERSION = 1


@dataclass
class HeadMapping:
    """Per-k table pairing each target head with one draft head."""

    k: int
    entries: dict[HeadKey, tuple[HeadKey, int]]  # target -> (draft, score)
    trace_set_id: str
    draft_config: ModelConfig
    target_config: ModelConfig

    def draft_for(self, target: HeadKey) -> HeadKey:
        try:
            return self.entries[target][0]
        except KeyError:
            raise ContractViolation(f"mapping has no entry for target head {target}") from None

    def layer_distance_stats(self) -> dict:
        """Distribution of |target layer - draft layer| over all entries."""
        dists = [abs(t[0] - d[0]) for t, (d, _) in self.entries.items()]
        hist: dict[str, int] = {}
        for v in sorted(dists):
            hist[str(v)] = hist.get(str(v), 0) + 1
        return {
            "mean": float(np.mean(dists)),
            "max": int(max(dists)),
            "histogram": hist,
        }


def rowwise_topk_sets(matrix: np.ndarray, k: int) -> list[np.ndarray]:
    """Top-k index set of every query row, taken over its causal prefix."""
    n = matrix.shape[0]
    return [topk_indices(matrix[t, : t + 1], k) for t in range(n)]


def match_score(target_sets: list[np.ndarray], draft_sets: list[np.ndarray]) -> int:
    """Total intersection size between paired per-row index sets."""
    if len(target_sets) != len(draft_sets):
        raise ContractViolation(
            f"row counts disagree: {len(target_sets)} target vs {len(draft_sets)} draft"
        )
    return int(
        sum(np.intersect1d(t, d).size for t, d in zip(target_sets, draft_sets))
    )


def _bitmask(indices: np.ndarray) -> int:
    mask = 0
    for i in indices:
        mask |= 1 << int(i)
    return mask


def find_head_mapping(ts: TraceSet, k: int) -> HeadMapping:
    """Best-overlap draft head for every target head (exhaustive scan).

    Ties break to the lexicographically smallest draft (layer, head). Rows
    shorter than k still contribute their full intersection.
    """
    if k < 1:
        raise ContractViolation(f"k must be >= 1, got {k}")
    if not ts.samples:
        raise InputError("cannot build a mapping from an empty trace set")

    draft_heads = [
        (l, h) for l in range(ts.draft_config.layers) for h in range(ts.draft_config.heads)
    ]
    target_heads = [
        (l, h) for l in range(ts.target_config.layers) for h in range(ts.target_config.heads)
    ]
    totals = {th: np.zeros(len(draft_heads), dtype=np.int64) for th in target_heads}

    for sample in ts.samples:
        draft_bits = {
            dh: [_bitmask(s) for s in rowwise_topk_sets(sample.draft[dh], k)]
            for dh in draft_heads
        }
        for th in target_heads:
            target_bits = [_bitmask(s) for s in rowwise_topk_sets(sample.target[th], k)]
            acc = totals[th]
            for j, dh in enumerate(draft_heads):
                rows = draft_bits[dh]
                acc[j] += sum((a & b).bit_count() for a, b in zip(target_bits, rows))

    entries: dict[HeadKey, tuple[HeadKey, int]] = {}
    for th in target_heads:
        scores = totals[th]
        best = int(np.argmax(scores))  # argmax returns the first (lexicographically smallest)
        entries[th] = (draft_heads[best], int(scores[best]))
    return HeadMapping(
        k=k,
        entries=entries,
        trace_set_id=ts.content_id(),
        draft_config=ts.draft_config,
        target_config=ts.target_config,
    )


def save_mapping(mapping: HeadMapping, path) -> None:
    """Write a mapping as versioned JSON with layer-distance statistics."""
    doc = {
        "format_version": MAPPING_FORMAT_VERSION,
        "k": mapping.k,
        "trace_set_id": mapping.trace_set_id,
        "draft_config": mapping.draft_config.to_dict(),
        "target_config": mapping.target_config.to_dict(),
        "entries": [
            [t[0], t[1], d[0], d[1], score]
            for t, (d, score) in sorted(mapping.entries.items())
        ],
        "layer_distance": mapping.layer_distance_stats(),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_mapping(path) -> HeadMapping:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read mapping {path}: {exc}") from exc
    if doc.get("format_version") != MAPPING_FORMAT_VERSION:
        raise InputError(
            f"unsupported mapping format version {doc.get('format_version')!r} in {path}"
        )
    entries = {
        (int(tl), int(th)): ((int(dl), int(dh)), int(score))
        for tl, th, dl, dh, score in doc["entries"]
    }
    return HeadMapping(
        k=int(doc["k"]),
        entries=entries,
        trace_set_id=str(doc["trace_set_id"]),
        draft_config=ModelConfig.from_dict(doc["draft_config"]),
        target_config=ModelConfig.from_dict(doc["target_config"]),
    )


class MappingSet:
    """Mappings for several k values with nearest-budget lookup.

    The runtime budget need not equal a stored k; ``nearest`` returns the
    mapping whose k is closest to the active per-row token budget, breaking
    ties toward the smaller k.
    """

    def __init__(self, mappings: list[HeadMapping]):
        if not mappings:
            raise InputError("MappingSet needs at least one mapping")
        self.mappings = sorted(mappings, key=lambda m: m.k)

    def nearest(self, budget: int) -> HeadMapping:
        return min(self.mappings, key=lambda m: (abs(m.k - budget), m.k))

    @classmethod
    def from_paths(cls, paths) -> "MappingSet":
        return cls([load_mapping(p) for p in paths])
