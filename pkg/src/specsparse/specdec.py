"""Greedy speculative decoding with the draft-guided sparse mask lifecycle.

Each round: the draft proposes ``gamma`` greedy tokens and emits its
attention rows; those rows become per-head masks (generated exactly once
per round), remapped to target heads; the target verifies the whole
proposal in one multi-token sparse forward. Accepted tokens' cache entries
persist, rejected ones are rolled back, and a rejected round's mask set is
discarded with it; the next round triggers a fresh draft pass. The
correction (or bonus) token is force-fed to both models so their caches
track the committed text exactly.

Verification uses exact greedy matching (temperature zero). One generation
session is a single logical thread: the draft and target sessions inside it
never run re-entrantly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapacityError, ConfigError, ContractViolation, InputError
from .headmap import HeadMapping, MappingSet
from .sparsity import (
    SparsityConfig,
    draft_masks_decode,
    draft_masks_prefill,
    dump_masks,
    remap_masks,
)
from .toymodel import (
    DecodeMasks,
    ForwardRecord,
    HeadKey,
    ModelWeights,
    PagedKVCache,
    RowMasks,
    ensure_paired,
    forward_block,
    forward_decode,
    forward_prefill,
)


@dataclass
class SpecConfig:
    """Speculation depth plus optional sparsity wiring."""

    gamma: int = 4
    sparsity: SparsityConfig | None = None
    mappings: MappingSet | None = None

    def __post_init__(self) -> None:
        if self.gamma < 1:
            raise ConfigError("gamma must be >= 1")
        if self.sparsity is not None and self.mappings is None:
            raise ConfigError("sparsity requires a head mapping set")


@dataclass
class RoundOutcome:
    """Result of one propose/verify round."""

    proposed: list[int]
    accepted_len: int
    correction_token: int
    masks_used: int


@dataclass
class GenerateStats:
    rounds: int = 0
    proposed_total: int = 0
    accepted_total: int = 0
    masks_generated: int = 0
    masks_discarded: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted_total / self.proposed_total if self.proposed_total else 0.0

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "proposed_total": self.proposed_total,
            "accepted_total": self.accepted_total,
            "acceptance_rate": self.acceptance_rate,
            "masks_generated": self.masks_generated,
            "masks_discarded": self.masks_discarded,
        }


@dataclass
class GenerateResult:
    tokens: list[int]  # prompt + committed new tokens
    new_tokens: list[int]
    stats: GenerateStats
    rounds: list[RoundOutcome] = field(default_factory=list)


class ModelSession:
    """One model, its cache, and the logits of the last processed position."""

    def __init__(self, weights: ModelWeights):
        self.weights = weights
        self.cache = PagedKVCache(weights.config)
        self.last_logits: np.ndarray | None = None

    @property
    def length(self) -> int:
        return self.cache.length

    def prefill(
        self, tokens, *, masks: RowMasks | None = None, record_attention: bool = False
    ) -> ForwardRecord:
        if self.cache.length != 0:
            raise ContractViolation("session already prefilled")
        rec, cache = forward_prefill(
            self.weights, tokens, masks=masks, record_attention=record_attention
        )
        self.cache = cache
        self.last_logits = rec.logits[-1]
        return rec

    def decode(
        self, token: int, *, masks: DecodeMasks | None = None, record_attention: bool = False
    ) -> ForwardRecord:
        rec = forward_decode(
            self.weights, token, self.cache, masks=masks, record_attention=record_attention
        )
        self.last_logits = rec.logits[0]
        return rec

    def block(self, tokens, *, masks: RowMasks | None = None) -> ForwardRecord:
        rec = forward_block(self.weights, tokens, self.cache, masks=masks)
        self.last_logits = rec.logits[-1]
        return rec

    def rollback(self, length: int) -> None:
        self.cache.truncate(length)


def _argmax(logits: np.ndarray) -> int:
    return int(np.argmax(logits))


def propose(draft: ModelSession, gamma: int) -> tuple[list[int], list[dict[HeadKey, np.ndarray]]]:
    """Draft ``gamma`` greedy tokens, recording each step's attention rows.

    The draft cache grows provisionally; the caller rolls it back after
    verification. Row ``i`` covers context positions ``0 .. start + i``.
    """
    if draft.last_logits is None:
        raise ContractViolation("draft session must be prefilled before proposing")
    if draft.length + gamma > draft.weights.config.max_seq:
        raise CapacityError("draft cache cannot hold the proposal")
    tokens: list[int] = []
    rows: list[dict[HeadKey, np.ndarray]] = []
    for _ in range(gamma):
        token = _argmax(draft.last_logits)
        rec = draft.decode(token, record_attention=True)
        tokens.append(token)
        rows.append({head: mat[0] for head, mat in rec.attention.items()})
    return tokens, rows


def verify(
    target: ModelSession, proposed: list[int], row_masks: RowMasks | None
) -> RoundOutcome:
    """Check all proposed tokens in a single (optionally sparse) forward.

    Position ``i`` is accepted iff it equals the target argmax given the
    preceding context; acceptance stops at the first mismatch. The
    correction token is the target argmax at the boundary (the bonus token
    when everything was accepted). Accepted positions' cache entries
    persist; rejected ones are rolled back.
    """
    if target.last_logits is None:
        raise ContractViolation("target session must be prefilled before verifying")
    gamma = len(proposed)
    if row_masks is not None:
        cfg = target.weights.config
        for layer in range(cfg.layers):
            for head in range(cfg.heads):
                rows = row_masks.get((layer, head))
                if rows is None or len(rows) != gamma:
                    raise ContractViolation(
                        f"verification masks do not cover head ({layer}, {head}) "
                        f"for all {gamma} rows"
                    )
    base = target.length
    boundary = target.last_logits
    rec = target.block(proposed, masks=row_masks)

    greedy = [_argmax(boundary)] + [_argmax(rec.logits[i]) for i in range(gamma)]
    accepted = 0
    while accepted < gamma and proposed[accepted] == greedy[accepted]:
        accepted += 1
    outcome = RoundOutcome(
        proposed=list(proposed),
        accepted_len=accepted,
        correction_token=greedy[accepted],
        masks_used=0 if row_masks is None else 1,
    )
    target.rollback(base + accepted)
    return outcome


def _clamp_current(indices: np.ndarray, pos: int) -> np.ndarray:
    """Causal clamp plus forced inclusion of the row's own position."""
    arr = np.asarray(indices, dtype=np.int64)
    arr = arr[arr <= pos]
    return np.union1d(arr, np.asarray([pos], dtype=np.int64))


def _verification_masks(
    draft_rows: list[dict[HeadKey, np.ndarray]],
    base: int,
    sparsity: SparsityConfig,
    mapping: HeadMapping,
) -> RowMasks:
    """Per-row 1D masks for the verification block, one per target head."""
    per_row_target: list[dict[HeadKey, np.ndarray]] = []
    for i, rows in enumerate(draft_rows):
        masks = remap_masks(draft_masks_decode(rows, sparsity), mapping)
        per_row_target.append({h: _clamp_current(m, base + i) for h, m in masks.items()})
    return {
        head: [per_row_target[i][head] for i in range(len(draft_rows))]
        for head in per_row_target[0]
    }


def _touched_pages(
    length: int,
    config,
    masks_per_row: list[RowMasks | DecodeMasks] | None,
) -> list[list[list[int]]]:
    """Per layer, sorted [head, page] pairs the round's target pass touched."""
    p_s = config.page_size
    touched: list[set[tuple[int, int]]] = [set() for _ in range(config.layers)]
    if masks_per_row is None:
        pages = range(-(-length // p_s))
        for layer in range(config.layers):
            touched[layer] = {(h, p) for h in range(config.heads) for p in pages}
    else:
        for masks in masks_per_row:
            for (layer, head), value in masks.items():
                rows = value if isinstance(value, list) else [value]
                for idx in rows:
                    for p in set(int(i) // p_s for i in np.asarray(idx).ravel()):
                        touched[layer].add((head, p))
    return [[list(pair) for pair in sorted(t)] for t in touched]


def generate(
    draft_weights: ModelWeights,
    target_weights: ModelWeights,
    prompt: list[int],
    max_new: int,
    cfg: SpecConfig,
    event_log=None,
    mask_dump=None,
) -> GenerateResult:
    """Speculative generation loop: propose, mask, verify, commit.

    ``event_log``: optional path or file-like; one JSON line per round with
    the proposal, acceptance, budget and per-layer pages touched (consumed
    by the offload simulator). ``mask_dump``: optional file-like receiving
    one JSON document of masks per round.
    """
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise InputError("prompt must not be empty")
    if max_new < 1:
        raise InputError("max_new must be >= 1")
    ensure_paired(draft_weights.config, target_weights.config)
    limit = min(draft_weights.config.max_seq, target_weights.config.max_seq)
    if len(prompt) + max_new + cfg.gamma + 1 > limit:
        raise CapacityError(
            f"prompt {len(prompt)} + max_new {max_new} + gamma {cfg.gamma} + 1 "
            f"exceeds max_seq {limit}"
        )

    own_log = isinstance(event_log, (str, Path))
    log_fh = open(event_log, "w") if own_log else event_log
    try:
        return _generate_inner(
            draft_weights, target_weights, prompt, max_new, cfg, log_fh, mask_dump
        )
    finally:
        if own_log and log_fh is not None:
            log_fh.close()


def _generate_inner(
    draft_weights: ModelWeights,
    target_weights: ModelWeights,
    prompt: list[int],
    max_new: int,
    cfg: SpecConfig,
    log_fh,
    mask_dump,
) -> GenerateResult:
    draft = ModelSession(draft_weights)
    target = ModelSession(target_weights)
    sparsity = cfg.sparsity

    if sparsity is not None and sparsity.sparse_prefill():
        rec = draft.prefill(prompt, record_attention=True)
        mapping = cfg.mappings.nearest(sparsity.tokens_for_context(len(prompt)))
        prefill_masks = remap_masks(draft_masks_prefill(rec.attention, sparsity), mapping)
        target.prefill(prompt, masks=prefill_masks)
    else:
        draft.prefill(prompt)
        target.prefill(prompt)

    committed = list(prompt)
    stats = GenerateStats()
    outcomes: list[RoundOutcome] = []

    while len(committed) - len(prompt) < max_new:
        base = target.length
        proposed, draft_rows = propose(draft, cfg.gamma)

        row_masks: RowMasks | None = None
        mapping = None
        if sparsity is not None:
            mapping = cfg.mappings.nearest(sparsity.tokens_for_context(base + 1))
            row_masks = _verification_masks(draft_rows, base, sparsity, mapping)
            stats.masks_generated += 1
            if mask_dump is not None:
                dump_masks(mask_dump, stats.rounds, row_masks)

        outcome = verify(target, proposed, row_masks)
        stats.rounds += 1
        stats.proposed_total += cfg.gamma
        stats.accepted_total += outcome.accepted_len
        rejected = outcome.accepted_len < cfg.gamma
        if sparsity is not None and rejected:
            stats.masks_discarded += 1

        # align the draft with the committed text and feed the correction
        draft.rollback(len(committed) + outcome.accepted_len)
        corr_rec = draft.decode(outcome.correction_token, record_attention=True)
        corr_masks: DecodeMasks | None = None
        if sparsity is not None:
            corr_rows = {head: mat[0] for head, mat in corr_rec.attention.items()}
            corr_masks = remap_masks(draft_masks_decode(corr_rows, sparsity), mapping)
        target.decode(outcome.correction_token, masks=corr_masks)

        committed.extend(proposed[: outcome.accepted_len])
        committed.append(outcome.correction_token)
        outcomes.append(outcome)

        if log_fh is not None:
            mask_trace = None
            if row_masks is not None:
                mask_trace = [row_masks, corr_masks]
            record = {
                "round": stats.rounds - 1,
                "context_len": base,
                "proposed": proposed,
                "accepted_len": outcome.accepted_len,
                "correction": outcome.correction_token,
                "budget": (
                    sparsity.tokens_for_context(base + 1) if sparsity is not None else None
                ),
                "pages_touched": _touched_pages(
                    target.length, target_weights.config, mask_trace
                ),
            }
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")

    new_tokens = committed[len(prompt) :][:max_new]
    return GenerateResult(
        tokens=prompt + new_tokens,
        new_tokens=new_tokens,
        stats=stats,
        rounds=outcomes,
    )


def greedy_generate(weights: ModelWeights, prompt: list[int], max_new: int) -> list[int]:
    """Plain target-only greedy decoding; the losslessness reference."""
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise InputError("prompt must not be empty")
    if len(prompt) + max_new > weights.config.max_seq:
        raise CapacityError("sequence would exceed max_seq")
    session = ModelSession(weights)
    session.prefill(prompt)
    out = list(prompt)
    for _ in range(max_new):
        token = _argmax(session.last_logits)
        session.decode(token)
        out.append(token)
    return out
