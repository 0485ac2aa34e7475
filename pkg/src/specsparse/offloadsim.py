"""Logical-time simulator of KV-cache residency over a two-tier memory.

Three strategies run over identical per-step, per-layer required-page
traces (the page-touch log emitted by the speculative runtime):

* ``full``: every page lives in the fast tier; a step costs pure compute.
* ``on_demand``: pages stream from the slow tier synchronously each time a
  layer needs them, blocking compute; nothing is retained across steps.
* ``prefetch``: required pages are known before the step's first layer runs
  (the masks exist ahead of target execution), so all missing-page
  transfers are enqueued at step start on the serial FIFO link and overlap
  with compute; transferred pages stay resident across steps with
  least-recently-used eviction, never evicting pages the in-flight step
  requires.

Time is integer-quantised simulated units; per-page transfer time is
``ceil(page_bytes / link_bandwidth)``. Everything is a pure function of
(strategy, traces, config): repeat runs are identical. Real parallelism is
modeled, never used.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, ContractViolation, InputError

STRATEGIES = ("full", "on_demand", "prefetch")

# A page is identified by an opaque hashable id within its layer; the
# simulator keys it globally as (layer, page_id).
StepTrace = list[list[object]]  # steps[s][layer] -> list of page ids


@dataclass(frozen=True)
class OffloadConfig:
    """Cost-model parameters for the two-tier hierarchy."""

    layers: int
    page_bytes: int
    link_bandwidth: int  # bytes per simulated time unit
    per_layer_compute: int  # simulated time units
    fast_tier_capacity: int  # pages
    lookahead: bool = True  # masks known before the step's first layer

    def __post_init__(self) -> None:
        for name in ("layers", "page_bytes", "link_bandwidth", "per_layer_compute", "fast_tier_capacity"):
            if getattr(self, name) < 1:
                raise ConfigError(f"OffloadConfig.{name} must be >= 1")

    @property
    def page_transfer_time(self) -> int:
        return max(1, math.ceil(self.page_bytes / self.link_bandwidth))

    @staticmethod
    def default_page_bytes(page_size: int, head_dim: int) -> int:
        """Key+value bytes of one page of one head: 2 * p_s * d * 4."""
        return 2 * page_size * head_dim * 4


@dataclass
class StepCost:
    step: int
    compute: int
    transfer: int
    stall: int
    elapsed: int

    @property
    def overlapped_fraction(self) -> float:
        """Share of transfer time hidden under compute."""
        return (self.transfer - self.stall) / self.transfer if self.transfer else 0.0


@dataclass
class LatencyReport:
    strategy: str
    steps: list[StepCost]

    @property
    def total_compute(self) -> int:
        return sum(s.compute for s in self.steps)

    @property
    def total_transfer(self) -> int:
        return sum(s.transfer for s in self.steps)

    @property
    def total_stall(self) -> int:
        return sum(s.stall for s in self.steps)

    @property
    def total_elapsed(self) -> int:
        return sum(s.elapsed for s in self.steps)

    @property
    def total_overlapped_fraction(self) -> float:
        transfer = self.total_transfer
        return (transfer - self.total_stall) / transfer if transfer else 0.0


def _normalise_traces(steps: StepTrace, cfg: OffloadConfig) -> list[list[list[tuple]]]:
    if not steps:
        raise InputError("offload simulation needs at least one step")
    out = []
    for s, layers in enumerate(steps):
        if len(layers) != cfg.layers:
            raise InputError(
                f"step {s} lists {len(layers)} layers, config says {cfg.layers}"
            )
        step_keys: list[list[tuple]] = []
        seen_step: set[tuple] = set()
        for layer, pages in enumerate(layers):
            keys = []
            seen_layer: set[tuple] = set()
            for pid in pages:
                key = (layer, tuple(pid) if isinstance(pid, (list, tuple)) else pid)
                if key in seen_layer:
                    raise InputError(f"step {s} layer {layer} repeats page {pid}")
                seen_layer.add(key)
                keys.append(key)
            step_keys.append(keys)
            seen_step.update(keys)
        if len(seen_step) > cfg.fast_tier_capacity:
            raise ConfigError(
                f"step {s} requires {len(seen_step)} pages, fast tier holds only "
                f"{cfg.fast_tier_capacity}"
            )
        out.append(step_keys)
    return out


def _lru_insert(resident: dict, key: tuple, capacity: int, pinned: set) -> None:
    if key in resident:
        resident.pop(key)
        resident[key] = True
        return
    while len(resident) >= capacity:
        victim = next(k for k in resident if k not in pinned)
        resident.pop(victim)
    resident[key] = True


def _lru_touch(resident: dict, key: tuple) -> None:
    if key in resident:
        resident.pop(key)
        resident[key] = True


def simulate(strategy: str, steps: StepTrace, cfg: OffloadConfig) -> LatencyReport:
    """Run one strategy over the step traces and price every step."""
    if strategy not in STRATEGIES:
        raise ContractViolation(f"unknown strategy {strategy!r}; pick one of {STRATEGIES}")
    traces = _normalise_traces(steps, cfg)
    c = cfg.per_layer_compute
    tau = cfg.page_transfer_time
    layers = cfg.layers
    costs: list[StepCost] = []

    if strategy == "full":
        for s in range(len(traces)):
            costs.append(StepCost(s, layers * c, 0, 0, layers * c))
        return LatencyReport("full", costs)

    if strategy == "on_demand":
        # synchronous streaming: every required page is fetched when its
        # layer needs it and nothing persists across steps
        for s, step in enumerate(traces):
            transfer = sum(len(pages) for pages in step) * tau
            compute = layers * c
            costs.append(StepCost(s, compute, transfer, transfer, compute + transfer))
        return LatencyReport("on_demand", costs)

    # prefetch: resident set with LRU persists across steps
    resident: dict[tuple, bool] = {}
    for s, step in enumerate(traces):
        pinned = {key for pages in step for key in pages}
        missing = [key for pages in step for key in pages if key not in resident]

        # serial FIFO link: page i of the queue completes at (i+1) * tau
        ready = [0] * layers  # per-layer readiness relative to step start
        if cfg.lookahead:
            done = 0
            for key in missing:
                done += tau
                ready[key[0]] = done
            prev_end = 0
            for layer in range(layers):
                prev_end = max(prev_end, ready[layer]) + c
            elapsed = prev_end
        else:
            # masks only known layer by layer: transfers for layer i start
            # once layer i-1 finished; no overlap is possible
            elapsed = 0
            for layer in range(layers):
                m = sum(1 for key in missing if key[0] == layer)
                elapsed += m * tau + c

        transfer = len(missing) * tau
        compute = layers * c
        costs.append(StepCost(s, compute, transfer, elapsed - compute, elapsed))

        for key in missing:  # insertion in transfer-completion (FIFO) order
            _lru_insert(resident, key, cfg.fast_tier_capacity, pinned)
        for pages in step:  # recency follows compute-use order
            for key in pages:
                _lru_touch(resident, key)
    return LatencyReport("prefetch", costs)


def compare_strategies(
    cfg: OffloadConfig, steps: StepTrace
) -> tuple[dict[str, LatencyReport], dict[str, float]]:
    """All three strategies on identical traces, plus overhead ratios."""
    reports = {name: simulate(name, steps, cfg) for name in STRATEGIES}
    full = reports["full"].total_elapsed
    ratios = {
        "on_demand_vs_full": reports["on_demand"].total_elapsed / full,
        "prefetch_vs_full": reports["prefetch"].total_elapsed / full,
        "prefetch_vs_on_demand": (
            reports["prefetch"].total_elapsed / reports["on_demand"].total_elapsed
        ),
    }
    return reports, ratios


def load_step_traces(path) -> tuple[StepTrace, int]:
    """Read the speculative runtime's JSON-lines event log.

    Returns (steps, layers); each step's per-layer page list contains
    (head, page) pairs.
    """
    path = Path(path)
    try:
        lines = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read event log {path}: {exc}") from exc
    if not lines:
        raise InputError(f"event log {path} is empty")
    steps: StepTrace = []
    layers = None
    for rec in lines:
        touched = rec.get("pages_touched")
        if touched is None:
            raise InputError(f"event log {path} record lacks pages_touched")
        if layers is None:
            layers = len(touched)
        elif layers != len(touched):
            raise InputError(f"event log {path} has inconsistent layer counts")
        steps.append([[tuple(p) for p in layer_pages] for layer_pages in touched])
    return steps, layers


def csv_rows(reports: dict[str, LatencyReport]) -> list[tuple]:
    """Flatten reports into (step, strategy, compute, transfer, stall, elapsed)."""
    rows = []
    for name in STRATEGIES:
        for s in reports[name].steps:
            rows.append((s.step, name, s.compute, s.transfer, s.stall, s.elapsed))
    return rows
