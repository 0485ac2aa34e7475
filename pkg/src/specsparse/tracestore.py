"""Collection and persistence of paired draft/target attention traces.

On disk, a trace set is one directory: a ``manifest.json`` (format version,
model configs, sample lengths, per-blob byte counts and SHA-256 checksums)
plus one raw little-endian float32 blob per (model, sample, layer). A blob
holds all heads of that layer contiguously, each head packed as the lower
triangle of its causal attention matrix in row-major order (row ``t``
contributes ``t + 1`` entries).

Collection is sequential per sample; writing is single-writer.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BlobSizeError,
    ChecksumError,
    InputError,
    TraceLoadError,
    VersionMismatchError,
)
from .toymodel import HeadKey, ModelConfig, ModelWeights, ensure_paired, forward_prefill

FORMAT_VERSION = 1
_ROW_SUM_TOL = 1e-5


@dataclass
class TraceSample:
    """Dense causal attention matrices of both models for one input."""

    length: int
    draft: dict[HeadKey, np.ndarray]
    target: dict[HeadKey, np.ndarray]


@dataclass
class TraceSet:
    """All samples of a trace-generation run, with provenance identifier."""

    draft_config: ModelConfig
    target_config: ModelConfig
    samples: list[TraceSample]

    def content_id(self) -> str:
        """Deterministic digest of configs and trace contents."""
        digest = hashlib.sha256()
        digest.update(
            json.dumps(
                [self.draft_config.to_dict(), self.target_config.to_dict()], sort_keys=True
            ).encode()
        )
        for sample in self.samples:
            digest.update(np.int64(sample.length).tobytes())
            for traces in (sample.draft, sample.target):
                for key in sorted(traces):
                    digest.update(_pack_lower(traces[key]).tobytes())
        return digest.hexdigest()[:16]


def collect_traces(
    draft: ModelWeights, target: ModelWeights, samples: list[list[int]]
) -> TraceSet:
    """Dense prefill of every sample through both models, recording attention.

    No masks are applied; the traces feed the offline head-mapping step.
    """
    if not samples:
        raise InputError("trace collection needs at least one sample")
    ensure_paired(draft.config, target.config)
    limit = min(draft.config.max_seq, target.config.max_seq)
    out: list[TraceSample] = []
    for i, toks in enumerate(samples):
        if len(toks) > limit:
            raise InputError(
                f"sample {i} has {len(toks)} tokens, exceeding max_seq={limit}"
            )
        rec_d, _ = forward_prefill(draft, toks, record_attention=True)
        rec_t, _ = forward_prefill(target, toks, record_attention=True)
        out.append(
            TraceSample(length=len(toks), draft=rec_d.attention, target=rec_t.attention)
        )
    return TraceSet(draft_config=draft.config, target_config=target.config, samples=out)


def _pack_lower(mat: np.ndarray) -> np.ndarray:
    n = mat.shape[0]
    rows, cols = np.tril_indices(n)
    return np.ascontiguousarray(mat[rows, cols], dtype="<f4")


def _unpack_lower(flat: np.ndarray, n: int) -> np.ndarray:
    mat = np.zeros((n, n), dtype=np.float32)
    rows, cols = np.tril_indices(n)
    mat[rows, cols] = flat
    return mat


def _blob_name(model: str, sample: int, layer: int) -> str:
    return f"{model}_s{sample:04d}_l{layer:02d}.bin"


def save_traces(ts: TraceSet, directory) -> None:
    """Write the trace set; lossless round-trip with :func:`load_traces`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest_samples = []
    for s, sample in enumerate(ts.samples):
        blobs = []
        for model, traces, cfg in (
            ("draft", sample.draft, ts.draft_config),
            ("target", sample.target, ts.target_config),
        ):
            for layer in range(cfg.layers):
                parts = [_pack_lower(traces[(layer, h)]) for h in range(cfg.heads)]
                payload = np.concatenate(parts).tobytes()
                name = _blob_name(model, s, layer)
                (directory / name).write_bytes(payload)
                blobs.append(
                    {
                        "file": name,
                        "model": model,
                        "layer": layer,
                        "bytes": len(payload),
                        "sha256": hashlib.sha256(payload).hexdigest(),
                    }
                )
        manifest_samples.append({"length": sample.length, "blobs": blobs})
    manifest = {
        "format_version": FORMAT_VERSION,
        "draft_config": ts.draft_config.to_dict(),
        "target_config": ts.target_config.to_dict(),
        "trace_set_id": ts.content_id(),
        "samples": manifest_samples,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_traces(directory) -> TraceSet:
    """Read a trace directory, verifying sizes, checksums and invariants."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise TraceLoadError(f"cannot read manifest in {directory}: {exc}") from exc

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"unsupported trace format version {version!r}, expected {FORMAT_VERSION}"
        )
    draft_config = ModelConfig.from_dict(manifest["draft_config"])
    target_config = ModelConfig.from_dict(manifest["target_config"])

    samples: list[TraceSample] = []
    for s, entry in enumerate(manifest["samples"]):
        n = int(entry["length"])
        tri = n * (n + 1) // 2
        draft: dict[HeadKey, np.ndarray] = {}
        target: dict[HeadKey, np.ndarray] = {}
        for blob in entry["blobs"]:
            cfg = draft_config if blob["model"] == "draft" else target_config
            expected = cfg.heads * tri * 4
            if blob["bytes"] != expected:
                raise BlobSizeError(
                    f"{blob['file']}: manifest declares {blob['bytes']} bytes, "
                    f"layer needs {expected}"
                )
            try:
                payload = (directory / blob["file"]).read_bytes()
            except OSError as exc:
                raise TraceLoadError(f"missing blob {blob['file']}") from exc
            if len(payload) != blob["bytes"]:
                raise BlobSizeError(
                    f"{blob['file']}: holds {len(payload)} bytes, manifest says {blob['bytes']}"
                )
            if hashlib.sha256(payload).hexdigest() != blob["sha256"]:
                raise ChecksumError(f"{blob['file']}: checksum mismatch")
            flat = np.frombuffer(payload, dtype="<f4")
            dest = draft if blob["model"] == "draft" else target
            for h in range(cfg.heads):
                mat = _unpack_lower(flat[h * tri : (h + 1) * tri], n)
                _validate_trace(mat, blob["file"], h)
                dest[(int(blob["layer"]), h)] = mat
        samples.append(TraceSample(length=n, draft=draft, target=target))
    return TraceSet(draft_config=draft_config, target_config=target_config, samples=samples)


def _validate_trace(mat: np.ndarray, source: str, head: int) -> None:
    n = mat.shape[0]
    if np.any(np.triu(mat, k=1) != 0.0):
        raise TraceLoadError(f"{source} head {head}: matrix is not lower-triangular")
    sums = np.array([mat[t, : t + 1].sum() for t in range(n)])
    if np.any(np.abs(sums - 1.0) > _ROW_SUM_TOL):
        raise TraceLoadError(f"{source} head {head}: attention rows do not sum to 1")
