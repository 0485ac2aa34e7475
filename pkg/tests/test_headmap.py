import numpy as np
import pytest
from mapping_oracle import (
    brute_force_mapping,
    planted_traces,
    random_trace_set,
    softmax_causal,
)

from specsparse import numkit
from specsparse.errors import ContractViolation, InputError
from specsparse.headmap import (
    HeadMapping,
    MappingSet,
    find_head_mapping,
    load_mapping,
    match_score,
    rowwise_topk_sets,
    save_mapping,
)
from specsparse.toymodel import ModelConfig, init_model
from specsparse.tracestore import TraceSet, collect_traces


class TestRowwiseTopk:
    def test_first_row_is_singleton(self):
        mat = softmax_causal(numkit.prng_stream(0).standard_normal((5, 5)))
        sets = rowwise_topk_sets(mat, 3)
        np.testing.assert_array_equal(sets[0], [0])

    def test_uniform_row_tie_break(self):
        mat = np.zeros((5, 5), dtype=np.float32)
        mat[4, :5] = 0.2
        sets = rowwise_topk_sets(mat, 2)
        np.testing.assert_array_equal(sets[4], [0, 1])

    def test_saturated_rows_return_full_prefix(self):
        mat = softmax_causal(numkit.prng_stream(1).standard_normal((4, 4)))
        sets = rowwise_topk_sets(mat, 10)
        for t, s in enumerate(sets):
            np.testing.assert_array_equal(s, np.arange(t + 1))


class TestMatchScore:
    def test_single_row(self):
        assert match_score([np.array([1, 3, 5])], [np.array([3, 5, 7])]) == 2

    def test_disjoint(self):
        rows_a = [np.array([0, 1]), np.array([2, 3])]
        rows_b = [np.array([4, 5]), np.array([6, 7])]
        assert match_score(rows_a, rows_b) == 0

    def test_identical_heads_saturate(self):
        rng = numkit.prng_stream(2)
        mat = softmax_causal(rng.standard_normal((9, 9)))
        k = 4
        sets = rowwise_topk_sets(mat, k)
        # brute-force oracle: row t contributes min(k, t+1)
        expected = sum(min(k, t + 1) for t in range(9))
        assert match_score(sets, sets) == expected

    def test_row_count_mismatch(self):
        with pytest.raises(ContractViolation):
            match_score([np.array([0])], [])


class TestFindHeadMapping:
    def test_identity_when_models_equal(self):
        cfg = ModelConfig(layers=2, heads=3, head_dim=4, vocab=23, max_seq=24, seed=7)
        w = init_model(cfg)
        corpus = [list(numkit.prng_stream(i).integers(0, 23, size=16)) for i in range(3)]
        ts = collect_traces(w, w, corpus)
        mapping = find_head_mapping(ts, 4)
        for th, (dh, _) in mapping.entries.items():
            assert th == dh

    def test_single_draft_head_takes_all(self):
        rng = numkit.prng_stream(3)
        ts = random_trace_set(rng, n=10, d_layers=1, d_heads=1, t_layers=2, t_heads=2)
        mapping = find_head_mapping(ts, 2)
        assert all(d == (0, 0) for d, _ in mapping.entries.values())

    def test_matches_brute_force_on_random_sets(self):
        rng = numkit.prng_stream(11)
        for trial in range(6):
            ts = random_trace_set(
                rng,
                n=int(rng.integers(4, 13)),
                d_layers=int(rng.integers(1, 3)),
                d_heads=int(rng.integers(1, 4)),
                t_layers=int(rng.integers(1, 4)),
                t_heads=int(rng.integers(1, 4)),
            )
            k = int(rng.integers(1, 6))
            mapping = find_head_mapping(ts, k)
            oracle = brute_force_mapping(ts, k)
            assert {t: e for t, e in mapping.entries.items()} == oracle

    def test_planted_recovery(self):
        recovered, total = planted_recovery_rate(seed=5)
        assert recovered / total >= 0.95

    def test_score_bound(self):
        rng = numkit.prng_stream(13)
        ts = random_trace_set(rng, n=12, d_layers=2, d_heads=2, t_layers=2, t_heads=2)
        k = 3
        mapping = find_head_mapping(ts, k)
        rows_total = sum(s.length for s in ts.samples)
        for _, score in mapping.entries.values():
            assert 0 <= score <= k * rows_total

    def test_deterministic(self):
        rng1 = numkit.prng_stream(17)
        rng2 = numkit.prng_stream(17)
        ts1 = random_trace_set(rng1, 10, 2, 2, 2, 2)
        ts2 = random_trace_set(rng2, 10, 2, 2, 2, 2)
        m1, m2 = find_head_mapping(ts1, 3), find_head_mapping(ts2, 3)
        assert m1.entries == m2.entries

    def test_empty_trace_set_rejected(self):
        cfg = ModelConfig(layers=1, heads=1, head_dim=2, vocab=4, max_seq=4)
        with pytest.raises(InputError):
            find_head_mapping(TraceSet(cfg, cfg, []), 2)


def planted_recovery_rate(seed):
    ts, truth = planted_traces(seed)
    mapping = find_head_mapping(ts, 8)
    recovered = sum(1 for th, (dh, _) in mapping.entries.items() if truth[th] == dh)
    return recovered, len(truth)


class TestMappingIO:
    def test_round_trip(self, tmp_path):
        rng = numkit.prng_stream(19)
        ts = random_trace_set(rng, 8, 1, 2, 2, 2)
        mapping = find_head_mapping(ts, 3)
        path = tmp_path / "map_k3.json"
        save_mapping(mapping, path)
        loaded = load_mapping(path)
        assert loaded.k == mapping.k
        assert loaded.entries == mapping.entries
        assert loaded.trace_set_id == mapping.trace_set_id

    def test_bad_version(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text('{"format_version": 9}')
        with pytest.raises(InputError):
            load_mapping(path)

    def test_layer_distance_stats(self):
        cfg = ModelConfig(layers=2, heads=1, head_dim=2, vocab=4, max_seq=4)
        entries = {(0, 0): ((0, 0), 5), (1, 0): ((0, 0), 4)}
        m = HeadMapping(3, entries, "x", cfg, cfg)
        stats = m.layer_distance_stats()
        assert stats["mean"] == 0.5
        assert stats["histogram"] == {"0": 1, "1": 1}


class TestMappingSet:
    def test_nearest_prefers_smaller_on_tie(self):
        cfg = ModelConfig(layers=1, heads=1, head_dim=2, vocab=4, max_seq=4)
        maps = [
            HeadMapping(k, {(0, 0): ((0, 0), 1)}, "x", cfg, cfg) for k in (4, 8, 16)
        ]
        ms = MappingSet(maps)
        assert ms.nearest(5).k == 4
        assert ms.nearest(6).k == 4  # tie between 4 and 8 -> smaller
        assert ms.nearest(7).k == 8
        assert ms.nearest(100).k == 16
