"""Deterministic toy decoder-only transformer with a paged KV cache.

Architecture: pre-norm (RMS scale-only norms), learned absolute position
embeddings, multi-head causal self-attention (scale ``1/sqrt(head_dim)``),
ReLU MLP, untied LM head. Weights are fully determined by
``(ModelConfig, seed)``.

Forward passes can optionally record per-head attention weights and raw
pre-softmax query-key scores, and can restrict each head's softmax to a
supplied per-row index set (sparse attention over a renormalised subset).

A forward pass is single-threaded and deterministic; the cache is mutated
only by the pass that owns it (one generation session per cache).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numkit
from .errors import CapacityError, ConfigError, ContractViolation, InputError

HeadKey = tuple[int, int]  # (layer, head)

# Decode masks: one index set per head. Prefill/block masks: one index set
# per head per query row. Indices are global context positions.
DecodeMasks = dict[HeadKey, np.ndarray]
RowMasks = dict[HeadKey, list[np.ndarray]]

_NORM_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    """Shape and seed of a toy model; hidden width is ``heads * head_dim``."""

    layers: int
    heads: int
    head_dim: int
    vocab: int
    max_seq: int
    page_size: int = 4
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("layers", "heads", "head_dim", "vocab", "max_seq", "page_size", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ModelConfig.{name} must be >= 1")

    @property
    def hidden(self) -> int:
        return self.heads * self.head_dim

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "heads": self.heads,
            "head_dim": self.head_dim,
            "vocab": self.vocab,
            "max_seq": self.max_seq,
            "page_size": self.page_size,
            "mlp_ratio": self.mlp_ratio,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            return cls(**{k: int(d[k]) for k in cls.__dataclass_fields__ if k in d})
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"bad model config: {exc}") from exc


def ensure_paired(draft: ModelConfig, target: ModelConfig) -> None:
    """Draft and target must share vocabulary and max_seq (same family)."""
    if draft.vocab != target.vocab or draft.max_seq != target.max_seq:
        raise InputError(
            "draft and target models must share vocab and max_seq: "
            f"({draft.vocab}, {draft.max_seq}) vs ({target.vocab}, {target.max_seq})"
        )


@dataclass
class ModelWeights:
    """All parameters of one toy model, float32 throughout."""

    config: ModelConfig
    token_emb: np.ndarray  # (vocab, hidden)
    pos_emb: np.ndarray  # (max_seq, hidden)
    attn_norm: np.ndarray  # (layers, hidden)
    wq: np.ndarray  # (layers, hidden, hidden)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    mlp_norm: np.ndarray  # (layers, hidden)
    w_up: np.ndarray  # (layers, hidden, mlp_ratio*hidden)
    w_down: np.ndarray  # (layers, mlp_ratio*hidden, hidden)
    final_norm: np.ndarray  # (hidden,)
    lm_head: np.ndarray  # (hidden, vocab)


_ARRAY_FIELDS = (
    "token_emb",
    "pos_emb",
    "attn_norm",
    "wq",
    "wk",
    "wv",
    "wo",
    "mlp_norm",
    "w_up",
    "w_down",
    "final_norm",
    "lm_head",
)


def init_model(config: ModelConfig) -> ModelWeights:
    """Draw weights from a single seeded stream; reproducible per config.

    Projection matrices are scaled by ``1/sqrt(hidden)``; embeddings are unit
    scale; norm scales start at 1.
    """
    rng = numkit.prng_stream(config.seed)
    h = config.hidden
    mh = config.mlp_ratio * h
    scale = 1.0 / math.sqrt(h)

    def draw(*shape: int, s: float = 1.0) -> np.ndarray:
        return (rng.standard_normal(shape) * s).astype(np.float32)

    return ModelWeights(
        config=config,
        token_emb=draw(config.vocab, h),
        pos_emb=draw(config.max_seq, h),
        attn_norm=np.ones((config.layers, h), dtype=np.float32),
        wq=draw(config.layers, h, h, s=scale),
        wk=draw(config.layers, h, h, s=scale),
        wv=draw(config.layers, h, h, s=scale),
        wo=draw(config.layers, h, h, s=scale),
        mlp_norm=np.ones((config.layers, h), dtype=np.float32),
        w_up=draw(config.layers, h, mh, s=scale),
        w_down=draw(config.layers, mh, h, s=scale),
        final_norm=np.ones(h, dtype=np.float32),
        lm_head=draw(h, config.vocab, s=scale),
    )


class PagedKVCache:
    """Per-layer key/value storage carved into fixed-size pages.

    Pages cover ``page_size`` consecutive positions of all heads in a layer;
    only the last page may be partially filled. Each (layer, head, page)
    carries a residency tier tag ("fast" or "slow") that never affects
    numerical results; it exists for the offload simulator's cost model.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        shape = (config.layers, config.max_seq, config.heads, config.head_dim)
        self._keys = np.zeros(shape, dtype=np.float32)
        self._values = np.zeros(shape, dtype=np.float32)
        self.length = 0
        self._slow_pages: set[tuple[int, int, int]] = set()

    @property
    def page_size(self) -> int:
        return self.config.page_size

    @property
    def page_count(self) -> int:
        return -(-self.length // self.config.page_size)

    def keys(self, layer: int, upto: int | None = None) -> np.ndarray:
        n = self.length if upto is None else upto
        return self._keys[layer, :n]

    def values(self, layer: int, upto: int | None = None) -> np.ndarray:
        n = self.length if upto is None else upto
        return self._values[layer, :n]

    def write_block(self, layer: int, start: int, k: np.ndarray, v: np.ndarray) -> None:
        m = k.shape[0]
        self._keys[layer, start : start + m] = k
        self._values[layer, start : start + m] = v

    def advance(self, m: int) -> None:
        if self.length + m > self.config.max_seq:
            raise CapacityError(
                f"cache full: {self.length}+{m} exceeds max_seq={self.config.max_seq}"
            )
        self.length += m

    def truncate(self, n: int) -> None:
        if not 0 <= n <= self.length:
            raise ContractViolation(f"cannot truncate cache of length {self.length} to {n}")
        self.length = n
        self._slow_pages = {t for t in self._slow_pages if t[2] < self.page_count}

    def tier(self, layer: int, head: int, page: int) -> str:
        self._check_page(layer, head, page)
        return "slow" if (layer, head, page) in self._slow_pages else "fast"

    def set_tier(self, layer: int, head: int, page: int, tier: str) -> None:
        self._check_page(layer, head, page)
        if tier not in ("fast", "slow"):
            raise ContractViolation(f"unknown tier {tier!r}")
        if tier == "slow":
            self._slow_pages.add((layer, head, page))
        else:
            self._slow_pages.discard((layer, head, page))

    def _check_page(self, layer: int, head: int, page: int) -> None:
        cfg = self.config
        if not (0 <= layer < cfg.layers and 0 <= head < cfg.heads and 0 <= page < self.page_count):
            raise ContractViolation(f"no page ({layer}, {head}, {page}) in cache")


@dataclass
class ForwardRecord:
    """Logits plus optional attention/score recordings for one block.

    ``attention[(layer, head)]`` is an ``(m, start_pos + m)`` float32 matrix
    whose row ``r`` holds the (masked) attention distribution of query
    position ``start_pos + r``; entries outside the causal prefix are zero
    and active rows sum to 1. ``scores`` holds the raw pre-softmax
    ``q @ k / sqrt(d)`` products over the causal prefix (dense, even for
    masked heads).
    """

    logits: np.ndarray
    start_pos: int
    attention: dict[HeadKey, np.ndarray] | None = None
    scores: dict[HeadKey, np.ndarray] | None = None


def _rms_norm(x: np.ndarray, scale: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    rms = np.sqrt(np.mean(x64 * x64, axis=-1, keepdims=True) + _NORM_EPS)
    return ((x64 / rms) * scale.astype(np.float64)).astype(np.float32)


def _validate_tokens(tokens, vocab: int) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64).ravel()
    if arr.size and (arr.min() < 0 or arr.max() >= vocab):
        bad = int(arr[(arr < 0) | (arr >= vocab)][0])
        raise InputError(f"token id {bad} outside vocabulary of size {vocab}")
    return arr


def _row_allowed(
    n_cols: int, pos: int, mask_row: np.ndarray | None, layer: int, head: int
) -> np.ndarray:
    allowed = np.zeros(n_cols, dtype=bool)
    if mask_row is None:
        allowed[: pos + 1] = True
        return allowed
    idx = np.asarray(mask_row, dtype=np.int64).ravel()
    if idx.size == 0:
        raise ContractViolation(f"empty mask row for head ({layer}, {head}) at position {pos}")
    if idx.min() < 0 or idx.max() > pos:
        raise ContractViolation(
            f"mask for head ({layer}, {head}) at position {pos} escapes the causal prefix"
        )
    allowed[idx] = True
    return allowed


def _run_block(
    weights: ModelWeights,
    tokens: np.ndarray,
    cache: PagedKVCache,
    start_pos: int,
    *,
    masks: RowMasks | None = None,
    record_attention: bool = False,
    record_scores: bool = False,
    append: bool = True,
) -> ForwardRecord:
    cfg = weights.config
    m = len(tokens)
    n_end = start_pos + m
    if append and start_pos != cache.length:
        raise ContractViolation("append block must start at the cache tail")
    if append and n_end > cfg.max_seq:
        raise CapacityError(
            f"cache full: {start_pos}+{m} exceeds max_seq={cfg.max_seq}"
        )
    if not append and cache.length < n_end:
        raise ContractViolation("replay block extends past cached positions")

    if masks:
        for (layer, head), rows in masks.items():
            if not (0 <= layer < cfg.layers and 0 <= head < cfg.heads):
                raise ContractViolation(f"mask refers to unknown head ({layer}, {head})")
            if len(rows) != m:
                raise ContractViolation(
                    f"mask for head ({layer}, {head}) covers {len(rows)} rows, block has {m}"
                )

    x = weights.token_emb[tokens] + weights.pos_emb[start_pos:n_end]
    attn_rec: dict[HeadKey, np.ndarray] = {}
    score_rec: dict[HeadKey, np.ndarray] = {}
    d = cfg.head_dim
    inv_sqrt_d = 1.0 / math.sqrt(d)
    positions = start_pos + np.arange(m)
    causal = np.arange(n_end)[None, :] <= positions[:, None]  # (m, n_end)

    for layer in range(cfg.layers):
        h = _rms_norm(x, weights.attn_norm[layer])
        q = numkit.matmul(h, weights.wq[layer]).reshape(m, cfg.heads, d)
        k_new = numkit.matmul(h, weights.wk[layer]).reshape(m, cfg.heads, d)
        v_new = numkit.matmul(h, weights.wv[layer]).reshape(m, cfg.heads, d)
        if append:
            cache.write_block(layer, start_pos, k_new, v_new)

        keys = cache.keys(layer, n_end)  # (n_end, heads, d)
        vals = cache.values(layer, n_end)
        attn_out = np.empty((m, cfg.hidden), dtype=np.float32)
        for head in range(cfg.heads):
            kh = keys[:, head, :].astype(np.float64)
            qh = q[:, head, :].astype(np.float64)
            s = (qh @ kh.T) * inv_sqrt_d  # (m, n_end)

            head_masks = masks.get((layer, head)) if masks else None
            if head_masks is None:
                allowed = causal
            else:
                allowed = np.stack(
                    [
                        _row_allowed(n_end, int(positions[r]), head_masks[r], layer, head)
                        for r in range(m)
                    ]
                )
            w = np.where(allowed, s, -np.inf)
            w -= w.max(axis=1, keepdims=True)
            np.exp(w, out=w)
            w[~allowed] = 0.0
            w /= w.sum(axis=1, keepdims=True)

            vh = vals[:, head, :].astype(np.float64)
            attn_out[:, head * d : (head + 1) * d] = (w @ vh).astype(np.float32)
            if record_attention:
                attn_rec[(layer, head)] = w.astype(np.float32)
            if record_scores:
                score_rec[(layer, head)] = np.where(causal, s, 0.0).astype(np.float32)

        x = x + numkit.matmul(attn_out, weights.wo[layer])
        h2 = _rms_norm(x, weights.mlp_norm[layer])
        up = np.maximum(numkit.matmul(h2, weights.w_up[layer]), 0.0)
        x = x + numkit.matmul(up, weights.w_down[layer])

    if append:
        cache.advance(m)
    logits = numkit.matmul(_rms_norm(x, weights.final_norm), weights.lm_head)
    return ForwardRecord(
        logits=logits,
        start_pos=start_pos,
        attention=attn_rec if record_attention else None,
        scores=score_rec if record_scores else None,
    )


def forward_prefill(
    weights: ModelWeights,
    tokens,
    *,
    masks: RowMasks | None = None,
    record_attention: bool = False,
    record_scores: bool = False,
) -> tuple[ForwardRecord, PagedKVCache]:
    """Causal forward over a fresh sequence; returns logits and a new cache.

    ``masks`` optionally restricts any head's attention per query row
    (sparse prefill); heads without an entry run dense.
    """
    cfg = weights.config
    arr = _validate_tokens(tokens, cfg.vocab)
    if arr.size < 1:
        raise InputError("prefill needs at least one token")
    if arr.size > cfg.max_seq:
        raise CapacityError(f"sequence of {arr.size} exceeds max_seq={cfg.max_seq}")
    cache = PagedKVCache(cfg)
    rec = _run_block(
        weights,
        arr,
        cache,
        0,
        masks=masks,
        record_attention=record_attention,
        record_scores=record_scores,
    )
    return rec, cache


def forward_decode(
    weights: ModelWeights,
    token: int,
    cache: PagedKVCache,
    *,
    masks: DecodeMasks | None = None,
    record_attention: bool = False,
    record_scores: bool = False,
) -> ForwardRecord:
    """Append one token to the cache and return its logits row.

    Decode masks always implicitly include the current position, so a
    masked head attends to ``mask ∪ {current}``.
    """
    arr = _validate_tokens([token], weights.config.vocab)
    pos = cache.length
    row_masks = _decode_to_row_masks(masks, pos)
    return _run_block(
        weights,
        arr,
        cache,
        pos,
        masks=row_masks,
        record_attention=record_attention,
        record_scores=record_scores,
    )


def forward_block(
    weights: ModelWeights,
    tokens,
    cache: PagedKVCache,
    *,
    masks: RowMasks | None = None,
    record_attention: bool = False,
    record_scores: bool = False,
) -> ForwardRecord:
    """Multi-token causal forward appended to an existing cache.

    Used for speculative verification: the block behaves like a small
    prefill whose row ``r`` sits at global position ``cache.length + r``.
    """
    arr = _validate_tokens(tokens, weights.config.vocab)
    if arr.size < 1:
        raise InputError("block needs at least one token")
    return _run_block(
        weights,
        arr,
        cache,
        cache.length,
        masks=masks,
        record_attention=record_attention,
        record_scores=record_scores,
    )


def replay_position(
    weights: ModelWeights,
    cache: PagedKVCache,
    position: int,
    token: int,
    *,
    masks: DecodeMasks | None = None,
) -> np.ndarray:
    """Recompute the logits of one already-cached position, read-only.

    The query path is recomputed (optionally with sparse attention) while
    key/value entries come from the existing cache; nothing is appended.
    Supports budget sweeps over a dense-built cache.
    """
    if not 0 <= position < cache.length:
        raise ContractViolation(f"position {position} not in cache of length {cache.length}")
    arr = _validate_tokens([token], weights.config.vocab)
    row_masks = _decode_to_row_masks(masks, position)
    rec = _run_block(weights, arr, cache, position, masks=row_masks, append=False)
    return rec.logits[0]


def _decode_to_row_masks(masks: DecodeMasks | None, pos: int) -> RowMasks | None:
    if masks is None:
        return None
    out: RowMasks = {}
    for key, idx in masks.items():
        merged = np.union1d(np.asarray(idx, dtype=np.int64), np.asarray([pos], dtype=np.int64))
        out[key] = [merged]
    return out


def perplexity(weights: ModelWeights, tokens) -> float:
    """exp(mean next-token NLL) over positions 1..N-1, natural log."""
    arr = _validate_tokens(tokens, weights.config.vocab)
    if arr.size < 2:
        raise InputError("perplexity needs at least two tokens")
    rec, _ = forward_prefill(weights, arr)
    return perplexity_of_logits(rec.logits, arr)


def perplexity_of_logits(logits: np.ndarray, tokens) -> float:
    """Perplexity given a full (N, vocab) logits matrix for the sequence."""
    arr = np.asarray(tokens, dtype=np.int64).ravel()
    if arr.size < 2:
        raise InputError("perplexity needs at least two tokens")
    rows = logits[: arr.size - 1].astype(np.float64)
    mx = rows.max(axis=1, keepdims=True)
    lse = np.log(np.exp(rows - mx).sum(axis=1)) + mx[:, 0]
    nll = lse - rows[np.arange(arr.size - 1), arr[1:]]
    return float(np.exp(nll.mean()))


def save_weights(weights: ModelWeights, blob_path, sidecar_path=None) -> None:
    """Write weights as a little-endian float32 blob plus a JSON sidecar."""
    blob_path = Path(blob_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else blob_path.with_suffix(
        blob_path.suffix + ".json"
    )
    arrays = []
    with open(blob_path, "wb") as fh:
        for name in _ARRAY_FIELDS:
            arr = getattr(weights, name)
            fh.write(arr.astype("<f4").tobytes())
            arrays.append({"name": name, "shape": list(arr.shape)})
    sidecar = {"config": weights.config.to_dict(), "dtype": "<f4", "arrays": arrays}
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_weights(blob_path, sidecar_path=None) -> ModelWeights:
    """Inverse of :func:`save_weights`; validates blob size against shapes."""
    blob_path = Path(blob_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else blob_path.with_suffix(
        blob_path.suffix + ".json"
    )
    try:
        sidecar = json.loads(sidecar_path.read_text())
        config = ModelConfig.from_dict(sidecar["config"])
        raw = blob_path.read_bytes()
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise InputError(f"cannot load weights: {exc}") from exc

    expected = sum(int(np.prod(a["shape"])) for a in sidecar["arrays"]) * 4
    if len(raw) != expected:
        raise InputError(
            f"weight blob {blob_path} holds {len(raw)} bytes, sidecar expects {expected}"
        )
    fields: dict[str, np.ndarray] = {}
    offset = 0
    for entry in sidecar["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        fields[entry["name"]] = arr.astype(np.float32)
        offset += count * 4
    missing = set(_ARRAY_FIELDS) - set(fields)
    if missing:
        raise InputError(f"weight sidecar missing arrays: {sorted(missing)}")
    return ModelWeights(config=config, **fields)
