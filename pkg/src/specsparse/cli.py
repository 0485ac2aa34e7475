"""Command-line front end for the experiment harness.

Subcommands: ``trace``, ``map``, ``generate``, ``recall``,
``oracle-sparsity``, ``ppl-curve``, ``simulate-offload``. Each takes
``--config <file>`` (JSON) and ``--out <path>``; ``--seed`` overrides every
seed in the config (absent seeds derive from the master seed at fixed
offsets); ``--workdir`` anchors relative paths. Exit codes: 0 success, 1
input error, 2 internal contract violation.

Reports embed the resolved configuration, so identical config and seed
produce byte-identical bodies.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

from . import evalkit
from .corpus import planted_model_pair, synthetic_corpus
from .errors import ContractViolation, InputError
from .headmap import MappingSet, find_head_mapping, load_mapping, save_mapping
from .offloadsim import OffloadConfig, compare_strategies, csv_rows, load_step_traces
from .sparsity import SparsityConfig
from .specdec import SpecConfig, generate, greedy_generate
from .toymodel import ModelConfig, ModelWeights, init_model
from .tracestore import collect_traces, load_traces, save_traces

# seed offsets used when a block does not pin its own seed
_SEED_SLOTS = {"draft": 1, "target": 2, "corpus": 3, "planted": 4, "prompt": 5, "baseline": 6}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # exit 1 on usage problems, per contract
        self.print_usage(sys.stderr)
        raise InputError(message)


def _load_config(path: Path) -> dict:
    if not path.exists():
        raise InputError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"config {path} is not valid JSON: {exc}") from exc


def _apply_seed_override(cfg: dict, seed: int | None) -> dict:
    cfg = copy.deepcopy(cfg)
    if seed is None:
        cfg.setdefault("seed", 0)
        return cfg
    cfg["seed"] = seed
    for block in ("draft_model", "target_model", "corpus", "planted_pair", "model"):
        if isinstance(cfg.get(block), dict):
            cfg[block].pop("seed", None)
    cfg.pop("baseline_seed", None)
    prompt = cfg.get("prompt")
    if isinstance(prompt, dict) and isinstance(prompt.get("synthetic"), dict):
        prompt["synthetic"].pop("seed", None)
    eval_tokens = cfg.get("eval_tokens")
    if isinstance(eval_tokens, dict) and isinstance(eval_tokens.get("synthetic"), dict):
        eval_tokens["synthetic"].pop("seed", None)
    return cfg


def _model_config(block: dict, default_seed: int) -> ModelConfig:
    block = dict(block)
    block.setdefault("seed", default_seed)
    return ModelConfig.from_dict(block)


def _resolve_models(cfg: dict) -> tuple[ModelWeights, ModelWeights]:
    """Build (draft, target) from explicit configs or a planted pair.

    Mutates ``cfg`` in place with every derived default so the embedded
    report config is fully resolved.
    """
    master = cfg["seed"]
    if "target_model" not in cfg:
        raise InputError("config needs a target_model block")
    cfg["target_model"].setdefault("seed", master + _SEED_SLOTS["target"])
    target_config = _model_config(cfg["target_model"], 0)

    if "planted_pair" in cfg:
        pp = cfg["planted_pair"]
        pp.setdefault("seed", master + _SEED_SLOTS["planted"])
        pp.setdefault("noise", 1e-3)
        pp.setdefault("draft_layers", max(1, target_config.layers // 2))
        draft, target, _ = planted_model_pair(
            target_config,
            draft_layers=int(pp["draft_layers"]),
            noise=float(pp["noise"]),
            seed=int(pp["seed"]),
        )
        cfg["draft_model"] = draft.config.to_dict()
        return draft, target
    if "draft_model" not in cfg:
        raise InputError("config needs a draft_model block or a planted_pair block")
    cfg["draft_model"].setdefault("seed", master + _SEED_SLOTS["draft"])
    draft_config = _model_config(cfg["draft_model"], 0)
    return init_model(draft_config), init_model(target_config)


def _resolve_corpus(cfg: dict, workdir: Path, vocab: int) -> list[list[int]]:
    block = cfg.get("corpus")
    if block is None:
        raise InputError("config needs a corpus block")
    if "token_file" in block:
        path = workdir / block["token_file"]
        if not path.exists():
            raise InputError(f"token file not found: {path}")
        data = json.loads(path.read_text())
        return [[int(t) for t in sample] for sample in data]
    block.setdefault("seed", cfg["seed"] + _SEED_SLOTS["corpus"])
    block.setdefault("samples", 32)
    block.setdefault("length", 64)
    block.setdefault("vocab", vocab)
    return synthetic_corpus(
        seed=int(block["seed"]),
        samples=int(block["samples"]),
        length=int(block["length"]),
        vocab=int(block["vocab"]),
    )


def _resolve_tokens(cfg: dict, key: str, workdir: Path, vocab: int, slot: str) -> list[int]:
    block = cfg.get(key)
    if block is None:
        raise InputError(f"config needs a {key} block")
    if isinstance(block, list):
        return [int(t) for t in block]
    if "tokens" in block:
        return [int(t) for t in block["tokens"]]
    if "synthetic" in block:
        syn = block["synthetic"]
        syn.setdefault("seed", cfg["seed"] + _SEED_SLOTS[slot])
        syn.setdefault("length", 16)
        syn.setdefault("vocab", vocab)
        return synthetic_corpus(
            seed=int(syn["seed"]), samples=1, length=int(syn["length"]), vocab=int(syn["vocab"])
        )[0]
    raise InputError(f"{key} block needs 'tokens' or 'synthetic'")


def _parse_budget(raw) -> float | int:
    """Floats in (0, 1] are context fractions (1.0 = dense); else token counts."""
    if isinstance(raw, float) and raw <= 1.0:
        return raw
    return int(raw)


def _resolve_sparsity(cfg: dict) -> SparsityConfig | None:
    block = cfg.get("sparsity")
    if block is None:
        return None
    budget = _parse_budget(block["budget"])
    return SparsityConfig(
        budget=budget,
        page_size=int(block.get("page_size", 1)),
        scope=block.get("scope", "decode"),
        include_current=bool(block.get("include_current", True)),
        include_sink=bool(block.get("include_sink", False)),
        recent_window=int(block.get("recent_window", 0)),
    )


def _resolve_mappings(cfg: dict, workdir: Path) -> MappingSet | None:
    paths = cfg.get("mappings")
    if paths is None and "mapping" in cfg:
        paths = [cfg["mapping"]]
    if paths is None:
        return None
    return MappingSet.from_paths([workdir / p for p in paths])


def cmd_trace(cfg: dict, out: Path, workdir: Path) -> int:
    draft, target = _resolve_models(cfg)
    corpus = _resolve_corpus(cfg, workdir, draft.config.vocab)
    ts = collect_traces(draft, target, corpus)
    save_traces(ts, out)
    print(f"wrote {len(ts.samples)} samples to {out} (id {ts.content_id()})")
    return 0


def cmd_map(cfg: dict, out: Path, workdir: Path) -> int:
    traces_dir = cfg.get("traces")
    if traces_dir is None:
        raise InputError("map config needs a 'traces' directory")
    k = cfg.get("k")
    if k is None:
        raise InputError("map config needs 'k'")
    ts = load_traces(workdir / traces_dir)
    mapping = find_head_mapping(ts, int(k))
    save_mapping(mapping, out)
    stats = mapping.layer_distance_stats()
    print(f"mapped {len(mapping.entries)} target heads (mean layer distance {stats['mean']:.2f})")
    return 0


def cmd_generate(cfg: dict, out: Path, workdir: Path, oracle_check: bool) -> int:
    draft, target = _resolve_models(cfg)
    prompt = _resolve_tokens(cfg, "prompt", workdir, draft.config.vocab, "prompt")
    max_new = int(cfg.get("max_new", 32))
    sparsity = _resolve_sparsity(cfg)
    mappings = _resolve_mappings(cfg, workdir)
    spec_cfg = SpecConfig(gamma=int(cfg.get("gamma", 4)), sparsity=sparsity, mappings=mappings)
    event_log = workdir / cfg["event_log"] if "event_log" in cfg else None

    result = generate(draft, target, prompt, max_new, spec_cfg, event_log=event_log)
    report = {
        "tokens": result.tokens,
        "new_tokens": result.new_tokens,
        "stats": result.stats.to_dict(),
    }
    if oracle_check:
        reference = greedy_generate(target, prompt, max_new)
        report["oracle_check"] = {"matches_target_greedy": result.tokens == reference}
    evalkit.write_json_report(out, cfg, report)
    if oracle_check and not report["oracle_check"]["matches_target_greedy"]:
        print("oracle check failed: output differs from target-only greedy", file=sys.stderr)
        return 1
    print(f"generated {len(result.new_tokens)} tokens in {result.stats.rounds} rounds")
    return 0


def cmd_recall(cfg: dict, out: Path, workdir: Path) -> int:
    draft, target = _resolve_models(cfg)
    corpus = _resolve_corpus(cfg, workdir, draft.config.vocab)
    if "mapping" not in cfg and "mappings" not in cfg:
        raise InputError("recall config needs a 'mapping' file")
    mapping_path = cfg.get("mapping") or cfg["mappings"][0]
    mapping = load_mapping(workdir / mapping_path)
    k = int(cfg.get("k", mapping.k))
    cfg.setdefault("baseline_seed", cfg["seed"] + _SEED_SLOTS["baseline"])
    result = evalkit.mask_recall(
        draft,
        target,
        mapping,
        corpus,
        k,
        page_size=int(cfg.get("page_size", 1)),
        baseline_seed=int(cfg["baseline_seed"]),
    )
    evalkit.write_json_report(out, cfg, result)
    print(f"recall {result['recall']:.3f} vs random {result['random_baseline']:.3f}")
    return 0


def cmd_oracle_sparsity(cfg: dict, out: Path, workdir: Path) -> int:
    block = cfg.get("model") or cfg.get("target_model")
    if block is None:
        raise InputError("oracle-sparsity config needs a 'model' block")
    block.setdefault("seed", cfg["seed"] + _SEED_SLOTS["target"])
    weights = init_model(_model_config(block, 0))
    tokens = _resolve_tokens(cfg, "eval_tokens", workdir, weights.config.vocab, "corpus")
    threshold = float(cfg.get("threshold", 0.01))
    result = evalkit.oracle_prunable_ratio(weights, tokens, threshold)
    evalkit.write_json_report(out, cfg, result)
    ratios = ", ".join(f"{r:.2f}" for r in result["per_layer_ratio"])
    print(f"per-layer prunable ratio: {ratios}")
    return 0


def cmd_ppl_curve(cfg: dict, out: Path, workdir: Path) -> int:
    draft, target = _resolve_models(cfg)
    corpus = _resolve_corpus(cfg, workdir, draft.config.vocab)
    mappings = _resolve_mappings(cfg, workdir)
    if mappings is None:
        raise InputError("ppl-curve config needs 'mappings'")
    budgets = cfg.get("budgets")
    if not budgets:
        raise InputError("ppl-curve config needs a non-empty 'budgets' sweep")
    budgets = [_parse_budget(b) for b in budgets]
    scopes = cfg.get("scopes", ["decode"])
    rows = evalkit.ppl_vs_budget(draft, target, mappings, corpus, budgets, scopes)
    evalkit.write_csv_report(
        out,
        cfg,
        ["budget", "scope", "ppl", "delta_ppl"],
        [(r["budget"], r["scope"], r["ppl"], r["delta_ppl"]) for r in rows],
    )
    print(f"wrote {len(rows)} sweep rows to {out}")
    return 0


def cmd_simulate_offload(cfg: dict, out: Path, workdir: Path) -> int:
    events = cfg.get("events")
    if events is None:
        raise InputError("simulate-offload config needs an 'events' log path")
    steps, layers = load_step_traces(workdir / events)
    block = dict(cfg.get("offload", {}))
    if "page_bytes" not in block:
        if "page_size" in block and "head_dim" in block:
            block["page_bytes"] = OffloadConfig.default_page_bytes(
                int(block.pop("page_size")), int(block.pop("head_dim"))
            )
        else:
            raise InputError(
                "offload block needs page_bytes, or page_size plus head_dim"
            )
    if "fast_tier_capacity" not in block:
        block["fast_tier_capacity"] = max(sum(len(p) for p in s) for s in steps)
    ocfg = OffloadConfig(
        layers=layers,
        page_bytes=int(block["page_bytes"]),
        link_bandwidth=int(block.get("link_bandwidth", 64)),
        per_layer_compute=int(block.get("per_layer_compute", 4)),
        fast_tier_capacity=int(block["fast_tier_capacity"]),
        lookahead=bool(block.get("lookahead", True)),
    )
    cfg["offload"] = {
        "layers": ocfg.layers,
        "page_bytes": ocfg.page_bytes,
        "link_bandwidth": ocfg.link_bandwidth,
        "per_layer_compute": ocfg.per_layer_compute,
        "fast_tier_capacity": ocfg.fast_tier_capacity,
        "lookahead": ocfg.lookahead,
    }
    reports, ratios = compare_strategies(ocfg, steps)
    evalkit.write_csv_report(
        out,
        cfg,
        ["step", "strategy", "compute", "transfer", "stall", "elapsed"],
        csv_rows(reports),
    )
    print(
        "elapsed ratios vs full: on_demand "
        f"{ratios['on_demand_vs_full']:.2f}, prefetch {ratios['prefetch_vs_full']:.2f}"
    )
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="specsparse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name in (
        "trace",
        "map",
        "generate",
        "recall",
        "oracle-sparsity",
        "ppl-curve",
        "simulate-offload",
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", required=True, help="output path (file or directory)")
        p.add_argument("--seed", type=int, default=None, help="override all config seeds")
        p.add_argument("--workdir", default=".", help="base for relative paths")
        if name == "generate":
            p.add_argument(
                "--oracle-check",
                action="store_true",
                help="fail unless output equals target-only greedy decoding",
            )
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        workdir = Path(args.workdir)
        cfg = _apply_seed_override(_load_config(workdir / args.config), args.seed)
        out = workdir / args.out
        if args.command == "trace":
            return cmd_trace(cfg, out, workdir)
        if args.command == "map":
            return cmd_map(cfg, out, workdir)
        if args.command == "generate":
            return cmd_generate(cfg, out, workdir, args.oracle_check)
        if args.command == "recall":
            return cmd_recall(cfg, out, workdir)
        if args.command == "oracle-sparsity":
            return cmd_oracle_sparsity(cfg, out, workdir)
        if args.command == "ppl-curve":
            return cmd_ppl_curve(cfg, out, workdir)
        if args.command == "simulate-offload":
            return cmd_simulate_offload(cfg, out, workdir)
        parser.print_usage(sys.stderr)
        return 1
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ContractViolation as exc:
        print(f"internal contract violation: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
