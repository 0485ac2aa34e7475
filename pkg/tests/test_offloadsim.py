import pytest
from offload_oracle import oracle_elapsed, random_case

from specsparse import numkit
from specsparse.errors import ConfigError, ContractViolation, InputError
from specsparse.offloadsim import (
    OffloadConfig,
    compare_strategies,
    csv_rows,
    load_step_traces,
    simulate,
)


def make_cfg(layers, compute, tau, capacity, lookahead=True):
    # page_bytes == tau, bandwidth 1 byte/unit -> transfer time == tau
    return OffloadConfig(
        layers=layers,
        page_bytes=tau,
        link_bandwidth=1,
        per_layer_compute=compute,
        fast_tier_capacity=capacity,
        lookahead=lookahead,
    )


class TestSpecExample:
    """L=2, c=3, tau=2, two missing pages per layer, one step."""

    TRACE = [[[0, 1], [0, 1]]]

    def test_full(self):
        cfg = make_cfg(2, 3, 2, 8)
        assert simulate("full", self.TRACE, cfg).total_elapsed == 6

    def test_on_demand(self):
        cfg = make_cfg(2, 3, 2, 8)
        assert simulate("on_demand", self.TRACE, cfg).total_elapsed == 14

    def test_prefetch(self):
        # transfers complete at 2,4,6,8; layer0 runs [4,7], layer1 [8,11]
        cfg = make_cfg(2, 3, 2, 8)
        assert simulate("prefetch", self.TRACE, cfg).total_elapsed == 11


class TestComputeBoundRegime:
    def test_prefetch_is_full_plus_first_layer_wait(self):
        # c >= m*tau per layer: only the pipeline fill shows up
        layers, c, tau, m = 4, 7, 2, 3  # m*tau = 6 < 7
        trace = [[[i for i in range(m)] for _ in range(layers)]]
        cfg = make_cfg(layers, c, tau, layers * m)
        full = simulate("full", trace, cfg).total_elapsed
        prefetch = simulate("prefetch", trace, cfg).total_elapsed
        assert prefetch == full + m * tau


class TestResidency:
    def test_repeat_steps_become_free_for_prefetch(self):
        trace = [[[0, 1], [0]], [[0, 1], [0]], [[0, 1], [0]]]
        cfg = make_cfg(2, 2, 5, 8)
        rep = simulate("prefetch", trace, cfg)
        assert rep.steps[0].transfer == 15
        assert rep.steps[1].transfer == 0
        assert rep.steps[1].elapsed == 4  # pure compute
        # on-demand pays every step
        od = simulate("on_demand", trace, cfg)
        assert od.steps[1].transfer == 15

    def test_lru_eviction_when_capacity_binds(self):
        # capacity 2: step0 loads {A,B}; step1 needs {C} evicting least
        # recently used A; step2 needs A again -> transfer
        trace = [[[\
            "A", "B"]], [["C"]], [["A"]]]
        cfg = make_cfg(1, 1, 3, 2)
        rep = simulate("prefetch", trace, cfg)
        assert [s.transfer for s in rep.steps] == [6, 3, 3]

    def test_pinned_pages_survive_eviction(self):
        # step requires exactly capacity pages; none of its own may be evicted
        trace = [[["A", "B"]], [["C", "D"]], [["C", "D"]]]
        cfg = make_cfg(1, 1, 2, 2)
        rep = simulate("prefetch", trace, cfg)
        assert rep.steps[2].transfer == 0


class TestDominanceAndOracle:
    def test_dominance_on_random_configs(self):
        rng = numkit.prng_stream(100)
        for _ in range(40):
            trace, layers, c, tau, cap = random_case(rng)
            cfg = make_cfg(layers, c, tau, cap)
            reports, _ = compare_strategies(cfg, trace)
            assert (
                reports["full"].total_elapsed
                <= reports["prefetch"].total_elapsed
                <= reports["on_demand"].total_elapsed
            )

    @pytest.mark.parametrize("lookahead", [True, False])
    def test_exact_oracle_agreement(self, lookahead):
        rng = numkit.prng_stream(200 + int(lookahead))
        for _ in range(40):
            trace, layers, c, tau, cap = random_case(rng)
            cfg = make_cfg(layers, c, tau, cap, lookahead=lookahead)
            for strategy in ("full", "on_demand", "prefetch"):
                rep = simulate(strategy, trace, cfg)
                expected = oracle_elapsed(
                    strategy, trace, layers, c, tau, cap, lookahead=lookahead
                )
                assert [s.elapsed for s in rep.steps] == expected, (
                    strategy,
                    trace,
                    (layers, c, tau, cap),
                )

    def test_transfer_dominant_reuse_regime(self):
        # per-layer transfer 4x compute, pages reused across steps: the
        # prefetched resident set cuts elapsed well below half of on-demand
        layers, c, m = 4, 2, 2
        tau = 4  # m * tau = 8 = 4 * c
        trace = [[[0, 1] for _ in range(layers)] for _ in range(10)]
        cfg = make_cfg(layers, c, tau, layers * m)
        _, ratios = compare_strategies(cfg, trace)
        assert ratios["prefetch_vs_on_demand"] <= 0.5
        assert ratios["on_demand_vs_full"] > ratios["prefetch_vs_full"]


class TestInvariants:
    def test_elapsed_is_compute_plus_stall(self):
        rng = numkit.prng_stream(300)
        for _ in range(20):
            trace, layers, c, tau, cap = random_case(rng)
            cfg = make_cfg(layers, c, tau, cap)
            for strategy in ("full", "on_demand", "prefetch"):
                for s in simulate(strategy, trace, cfg).steps:
                    assert s.elapsed == s.compute + s.stall
                    assert s.stall >= 0
                    assert 0.0 <= s.overlapped_fraction <= 1.0

    def test_full_resident_never_stalls(self):
        trace = [[[0, 1, 2]], [[3]]]
        cfg = make_cfg(1, 5, 9, 4)
        rep = simulate("full", trace, cfg)
        assert rep.total_stall == 0 and rep.total_transfer == 0

    def test_deterministic_repeat(self):
        rng = numkit.prng_stream(400)
        trace, layers, c, tau, cap = random_case(rng)
        cfg = make_cfg(layers, c, tau, cap)
        a = simulate("prefetch", trace, cfg)
        b = simulate("prefetch", trace, cfg)
        assert [s.elapsed for s in a.steps] == [s.elapsed for s in b.steps]


class TestValidation:
    def test_capacity_violation(self):
        cfg = make_cfg(1, 1, 1, 2)
        with pytest.raises(ConfigError, match="fast tier"):
            simulate("prefetch", [[[0, 1, 2]]], cfg)

    def test_layer_count_mismatch(self):
        cfg = make_cfg(2, 1, 1, 4)
        with pytest.raises(InputError):
            simulate("full", [[[0]]], cfg)

    def test_duplicate_page_in_layer(self):
        cfg = make_cfg(1, 1, 1, 4)
        with pytest.raises(InputError):
            simulate("full", [[[0, 0]]], cfg)

    def test_unknown_strategy(self):
        cfg = make_cfg(1, 1, 1, 4)
        with pytest.raises(ContractViolation):
            simulate("lazy", [[[0]]], cfg)

    def test_transfer_time_rounds_up(self):
        cfg = OffloadConfig(
            layers=1, page_bytes=10, link_bandwidth=4, per_layer_compute=1, fast_tier_capacity=4
        )
        assert cfg.page_transfer_time == 3

    def test_default_page_bytes(self):
        assert OffloadConfig.default_page_bytes(page_size=4, head_dim=8) == 256


class TestEventLogAdapter:
    def test_round_trip_from_generate(self, tmp_path):
        from specsparse.headmap import MappingSet, find_head_mapping
        from specsparse.corpus import synthetic_corpus
        from specsparse.sparsity import SparsityConfig
        from specsparse.specdec import SpecConfig, generate
        from specsparse.toymodel import ModelConfig, init_model
        from specsparse.tracestore import collect_traces

        target = init_model(ModelConfig(layers=2, heads=2, head_dim=4, vocab=32, max_seq=96, page_size=4, seed=1))
        draft = init_model(ModelConfig(layers=1, heads=2, head_dim=4, vocab=32, max_seq=96, page_size=4, seed=2))
        corpus = synthetic_corpus(seed=3, samples=2, length=20, vocab=32)
        mapping = find_head_mapping(collect_traces(draft, target, corpus), 4)
        cfg = SpecConfig(gamma=2, sparsity=SparsityConfig(budget=4), mappings=MappingSet([mapping]))
        log = tmp_path / "ev.jsonl"
        result = generate(draft, target, corpus[0][:8], 10, cfg, event_log=log)

        steps, layers = load_step_traces(log)
        assert layers == target.config.layers
        assert len(steps) == result.stats.rounds
        ocfg = OffloadConfig(
            layers=layers,
            page_bytes=OffloadConfig.default_page_bytes(4, 4),
            link_bandwidth=64,
            per_layer_compute=2,
            fast_tier_capacity=max(sum(len(p) for p in s) for s in steps) + 2,
        )
        reports, ratios = compare_strategies(ocfg, steps)
        assert ratios["prefetch_vs_on_demand"] <= 1.0
        assert len(csv_rows(reports)) == 3 * len(steps)

    def test_missing_log(self, tmp_path):
        with pytest.raises(InputError):
            load_step_traces(tmp_path / "nope.jsonl")
