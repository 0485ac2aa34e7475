"""Turn draft attention into per-target-head sparsity masks.

Mask generation reads *only* draft-model attention (the operation signatures
admit no target state); the offline head mapping then remaps each draft
head's mask onto the target heads it serves. Masks come in two shapes: a
one-dimensional index set per head for decode, and one index set per query
row per head for prefill. Selection works at token granularity or over
fixed-size pages, where a page's score is the sum of its tokens' attention
mass and selecting a page selects all its tokens.

Masks for different heads are independent and order-insensitive; remapped
masks are copies, never aliases, so per-head post-processing cannot couple
heads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation
from .headmap import HeadMapping
from .numkit import topk_indices
from .toymodel import HeadKey

SCOPE_DECODE = "decode"
SCOPE_PREFILL_DECODE = "prefill-decode"


@dataclass(frozen=True)
class SparsityConfig:
    """Budget, granularity and scope of mask generation.

    ``budget`` is either an absolute token count (int >= 1) or a fraction of
    the context (0 < float <= 1), rounded up with a floor of one token.
    Always-include extras (current position, sink token 0, a recent window)
    are counted outside the budget.
    """

    budget: float
    page_size: int = 1
    scope: str = SCOPE_DECODE
    include_current: bool = True
    include_sink: bool = False
    recent_window: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.budget, float) and not 0.0 < self.budget <= 1.0:
            raise ConfigError(f"fractional budget must be in (0, 1], got {self.budget}")
        if isinstance(self.budget, int) and self.budget < 1:
            raise ConfigError(f"token budget must be >= 1, got {self.budget}")
        if self.page_size < 1:
            raise ConfigError("page_size must be >= 1")
        if self.scope not in (SCOPE_DECODE, SCOPE_PREFILL_DECODE):
            raise ConfigError(f"unknown scope {self.scope!r}")
        if self.recent_window < 0:
            raise ConfigError("recent_window must be >= 0")

    def tokens_for_context(self, n: int) -> int:
        """Resolve the budget against a context of ``n`` positions."""
        if isinstance(self.budget, int):
            return self.budget
        return max(1, math.ceil(self.budget * n))

    def sparse_prefill(self) -> bool:
        return self.scope == SCOPE_PREFILL_DECODE


def page_aggregate(scores: np.ndarray, page_size: int) -> np.ndarray:
    """Per-page score: sum of the token scores inside each page.

    The last page may be ragged. ``page_size == 1`` is the identity.
    """
    if page_size < 1:
        raise ContractViolation("page_size must be >= 1")
    arr = np.asarray(scores, dtype=np.float64).ravel()
    if page_size == 1:
        return arr.copy()
    edges = np.arange(0, arr.size, page_size)
    return np.add.reduceat(arr, edges)


def _select_row(row: np.ndarray, cfg: SparsityConfig) -> np.ndarray:
    """Apply the top-k / top-pages recipe plus always-include extras."""
    n = row.shape[0]
    budget = cfg.tokens_for_context(n)
    if budget >= n:
        selected = np.arange(n, dtype=np.int64)
    elif cfg.page_size == 1:
        selected = topk_indices(row, budget)
    else:
        pages = page_aggregate(row, cfg.page_size)
        top_pages = topk_indices(pages, math.ceil(budget / cfg.page_size))
        chunks = [
            np.arange(p * cfg.page_size, min((p + 1) * cfg.page_size, n), dtype=np.int64)
            for p in top_pages
        ]
        selected = np.concatenate(chunks)

    extras = []
    if cfg.include_current:
        extras.append(n - 1)
    if cfg.include_sink:
        extras.append(0)
    if cfg.recent_window > 0:
        extras.extend(range(max(0, n - cfg.recent_window), n))
    if extras:
        selected = np.union1d(selected, np.asarray(extras, dtype=np.int64))
    return np.sort(np.unique(selected))


def draft_masks_decode(
    rows: dict[HeadKey, np.ndarray], cfg: SparsityConfig
) -> dict[HeadKey, np.ndarray]:
    """One index set per draft head from its current attention row."""
    return {head: _select_row(np.asarray(row), cfg) for head, row in rows.items()}


def draft_masks_prefill(
    matrices: dict[HeadKey, np.ndarray], cfg: SparsityConfig
) -> dict[HeadKey, list[np.ndarray]]:
    """Per-row masks over each row's causal prefix; short rows stay dense."""
    out: dict[HeadKey, list[np.ndarray]] = {}
    for head, mat in matrices.items():
        mat = np.asarray(mat)
        out[head] = [_select_row(mat[t, : t + 1], cfg) for t in range(mat.shape[0])]
    return out


def remap_masks(draft_masks: dict[HeadKey, object], mapping: HeadMapping) -> dict[HeadKey, object]:
    """Give every target head a copy of its mapped draft head's mask.

    Works for both decode masks (arrays) and prefill masks (lists of
    arrays). Many target heads may share one draft mask; each receives its
    own copy.
    """
    out: dict[HeadKey, object] = {}
    for target, (draft, _) in mapping.entries.items():
        if draft not in draft_masks:
            raise ContractViolation(f"no draft mask for head {draft} (target {target})")
        value = draft_masks[draft]
        if isinstance(value, list):
            out[target] = [np.array(v, dtype=np.int64, copy=True) for v in value]
        else:
            out[target] = np.array(value, dtype=np.int64, copy=True)
    return out


def sparse_attention(
    q: np.ndarray, keys: np.ndarray, values: np.ndarray, mask: np.ndarray
) -> np.ndarray:
    """Single-query attention over the masked key/value subset only.

    Softmax of ``q . k_i / sqrt(d)`` for i in the mask, renormalised over
    the subset; the independent gather-based route used to cross-check the
    model's masked forward.
    """
    idx = np.asarray(mask, dtype=np.int64).ravel()
    if idx.size == 0:
        raise ContractViolation("sparse attention needs a non-empty mask")
    if idx.min() < 0 or idx.max() >= keys.shape[0]:
        raise ContractViolation("mask index outside the cached context")
    q64 = np.asarray(q, dtype=np.float64)
    k_sel = np.asarray(keys, dtype=np.float64)[idx]
    v_sel = np.asarray(values, dtype=np.float64)[idx]
    scores = (k_sel @ q64) / math.sqrt(q64.shape[0])
    scores -= scores.max()
    weights = np.exp(scores)
    weights /= weights.sum()
    return (weights @ v_sel).astype(np.float32)


def dump_masks(fh, step: int, masks: dict[HeadKey, object]) -> None:
    """Append one JSON document describing a step's masks (debug aid)."""
    heads = {}
    for (layer, head), value in sorted(masks.items()):
        key = f"{layer}.{head}"
        if isinstance(value, list):
            heads[key] = [[int(i) for i in row] for row in value]
        else:
            heads[key] = [int(i) for i in value]
    fh.write(json.dumps({"step": step, "heads": heads}, sort_keys=True) + "\n")
