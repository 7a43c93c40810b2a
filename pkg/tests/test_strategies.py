import numpy as np
import pytest

from clcbench.cache import build_chunk_cache
from clcbench.errors import ConfigError
from clcbench.model import (
    LayerWeights,
    ModelConfig,
    ModelWeights,
    full_prefill,
    init_model,
)
from clcbench.strategies import (
    StrategyConfig,
    apply_ape_reshaping,
    delta_k,
    run_strategy,
    select_cacheclip,
    select_epic,
    select_top_r,
    strategy_from_dict,
)

F32 = np.float32


@pytest.fixture(scope="module")
def small4():
    cfg = ModelConfig(n_layers=4, n_heads=2, d_model=8, max_positions=256)
    return init_model(cfg, 11), cfg


def _chunks_and_query(w, cfg, p=0, act_layers=(), seed=5, lens=(12, 12), n_query=6):
    rng = np.random.default_rng(seed)
    chunks = [
        build_chunk_cache(w, cfg, rng.integers(0, 256, size=n), prefix_len=p, activation_layers=act_layers)
        for n in lens
    ]
    query = rng.integers(0, 256, size=n_query)
    return chunks, query


class TestDeltaK:
    def test_identical_is_zero(self, rng):
        k = rng.standard_normal((5, 2, 4), dtype=F32)
        assert np.array_equal(delta_k(k, k), np.zeros(5, dtype=F32))

    def test_hand_arithmetic(self):
        # 1 head, d_head 2: rows differing by (1,0) and (0,2) -> scores [1, 4]
        cached = np.zeros((2, 1, 2), dtype=F32)
        rec = np.array([[[1.0, 0.0]], [[0.0, 2.0]]], dtype=F32)
        np.testing.assert_allclose(delta_k(rec, cached), [1.0, 4.0])

    def test_head_permutation_invariant(self, rng):
        rec = rng.standard_normal((6, 3, 4), dtype=F32)
        cached = rng.standard_normal((6, 3, 4), dtype=F32)
        perm = [2, 0, 1]
        np.testing.assert_allclose(
            delta_k(rec, cached), delta_k(rec[:, perm], cached[:, perm]), atol=1e-5
        )


class TestSelectTopR:
    def test_hand_case(self):
        assert select_top_r(np.array([5.0, 1.0, 3.0, 2.0]), 0.5) == {0, 2}

    def test_r_zero_empty(self):
        assert select_top_r(np.array([5.0, 1.0]), 0.0) == frozenset()

    def test_all_equal_tie_break(self):
        assert select_top_r(np.ones(8), 0.25) == {0, 1}

    def test_r_one_selects_all(self):
        assert select_top_r(np.arange(7.0), 1.0) == set(range(7))

    def test_matches_brute_force_oracle(self, rng):
        for _ in range(1000):
            n = int(rng.integers(1, 40))
            # small integer scores force plenty of ties
            scores = rng.integers(0, 6, size=n).astype(F32)
            r = float(rng.choice([0.0, 0.1, 0.15, 0.25, 0.5, 0.77, 1.0]))
            want = set(sorted(range(n), key=lambda i: (-scores[i], i))[: round(r * n)])
            assert select_top_r(scores, r) == want


class TestSelectEpic:
    def test_two_chunks_rounded_down_min_one(self):
        assert select_epic([10, 10], 0.15) == {0, 10}

    def test_r_zero(self):
        assert select_epic([10, 10], 0.0) == frozenset()

    def test_single_chunk_floor(self):
        assert select_epic([20], 0.15) == {0, 1, 2}

    def test_selection_is_beginning_of_chunk(self):
        lens = [7, 13, 4]
        starts = [0, 7, 20]
        got = select_epic(lens, 0.4)
        for idx in got:
            seg = max(i for i, s in enumerate(starts) if s <= idx)
            assert idx - starts[seg] < lens[seg] * 0.4 or idx == starts[seg]


def _rigged_aux_model():
    """1-layer aux model whose query attention locks onto the byte 'Z'.

    All signal lives in the second rotary pair, where a huge theta makes the
    rotation negligible; the 'Z' embedding is the only one Wk maps to a
    non-zero key, and Wq sends every query to that same direction.
    """
    cfg = ModelConfig(n_layers=1, n_heads=1, d_model=4, rope_theta=1e12, max_positions=256)
    d = cfg.d_model
    emb = np.zeros((cfg.vocab_size, d), dtype=F32)
    emb[:, 3] = 1.0
    emb[ord("Z")] = np.array([0.0, 0.0, 1.0, 0.0], dtype=F32)
    wq = np.zeros((d, d), dtype=F32)
    wq[3, 2] = 3.0
    wk = np.zeros((d, d), dtype=F32)
    wk[2, 2] = 3.0
    zeros = np.zeros((d, d), dtype=F32)
    layer = LayerWeights(
        attn_norm=np.ones(d, dtype=F32),
        wq=wq,
        wk=wk,
        wv=zeros.copy(),
        wo=zeros.copy(),
        ffn_norm=np.ones(d, dtype=F32),
        w1=np.zeros((d, 4 * d), dtype=F32),
        w2=np.zeros((4 * d, d), dtype=F32),
    )
    w = ModelWeights(
        embedding=emb,
        layers=[layer],
        final_norm=np.ones(d, dtype=F32),
        head=np.zeros((d, cfg.vocab_size), dtype=F32),
    )
    return w, cfg


class TestSelectCacheclip:
    def test_r_zero(self, tiny):
        aux_w, aux_cfg = _rigged_aux_model()
        got = select_cacheclip(aux_w, aux_cfg, list(b"abc"), list(b"q"), 0.0)
        assert got == frozenset()

    def test_rigged_attention_selects_forced_token(self):
        aux_w, aux_cfg = _rigged_aux_model()
        context = list(b"abZcdefg")
        got = select_cacheclip(aux_w, aux_cfg, context, list(b"qq"), 1.0 / len(context))
        assert got == {2}

    def test_deterministic(self):
        aux_w, aux_cfg = _rigged_aux_model()
        args = (aux_w, aux_cfg, list(b"hello world"), list(b"q?"), 0.3)
        assert select_cacheclip(*args) == select_cacheclip(*args)


class TestApeReshaping:
    def test_neutral_is_plain_softmax(self, rng):
        row = rng.standard_normal(9, dtype=F32)
        labels = np.array([True] * 5 + [False] * 4)
        got = apply_ape_reshaping(row, labels, 1.0, 1.0)
        e = np.exp(row - row.max())
        np.testing.assert_allclose(got, e / e.sum(), atol=1e-6)

    def test_hand_arithmetic(self):
        got = apply_ape_reshaping(np.zeros(3, dtype=F32), [True, True, False], 0.5, 2.0)
        np.testing.assert_allclose(got, [0.4, 0.4, 0.2], atol=1e-7)

    def test_rows_sum_to_one(self, rng):
        row = (5 * rng.standard_normal(12)).astype(F32)
        labels = rng.random(12) < 0.5
        got = apply_ape_reshaping(row, labels, 0.6, 2.5)
        assert abs(got.sum() - 1.0) < 1e-6


class TestStrategyConfig:
    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            StrategyConfig(variant="magic")

    def test_bounds(self):
        with pytest.raises(ConfigError):
            StrategyConfig(variant="cacheblend", r=1.5)
        with pytest.raises(ConfigError):
            StrategyConfig(variant="ape", t=0.0)
        with pytest.raises(ConfigError):
            StrategyConfig(variant="link0", p=-1)
        with pytest.raises(ConfigError):
            StrategyConfig(variant="ablation", components=())
        with pytest.raises(ConfigError):
            StrategyConfig(variant="ablation", components=("warp",))

    def test_from_dict(self):
        sc = strategy_from_dict({"name": "psr", "r": 0.2, "p": 3, "t": 0.7, "s": 2.0})
        assert sc.variant == "psr"
        assert sc.params_string() == "r=0.2;p=3;t=0.7;s=2"

    def test_reselect_layer_needs_room(self, tiny):
        _, cfg = tiny  # 2 layers
        with pytest.raises(ConfigError):
            StrategyConfig(variant="droidspeak", reselect_layer=1).validate_for_model(cfg)


class TestRunStrategy:
    def test_cacheblend_full_r_matches_full_prefill(self, small4):
        w, cfg = small4
        chunks, query = _chunks_and_query(w, cfg)
        full = run_strategy(StrategyConfig("full_prefill"), w, cfg, chunks, query, max_new_tokens=6)
        blend = run_strategy(
            StrategyConfig("cacheblend", r=1.0), w, cfg, chunks, query, max_new_tokens=6
        )
        assert np.max(np.abs(full.logits_last_prefill - blend.logits_last_prefill)) <= 1e-4
        assert full.token_ids == blend.token_ids

    def test_cacheblend_single_chunk_at_origin_matches_full_prefill(self, small4, rng):
        # zero drift everywhere: selection is tie-break only and the output
        # must match the no-reuse baseline within 1e-6
        w, cfg = small4
        chunk = build_chunk_cache(w, cfg, rng.integers(0, 256, size=14))
        query = rng.integers(0, 256, size=5)
        full = run_strategy(StrategyConfig("full_prefill"), w, cfg, [chunk], query, max_new_tokens=4)
        blend = run_strategy(StrategyConfig("cacheblend", r=0.25), w, cfg, [chunk], query, max_new_tokens=4)
        assert blend.selection_trace == [(1, frozenset({0, 1, 2, 3}))]
        assert np.max(np.abs(blend.logits_last_prefill - full.logits_last_prefill)) <= 1e-6
        assert blend.token_ids == full.token_ids

    def test_ape_neutral_equals_naive_exactly(self, small4):
        w, cfg = small4
        chunks, query = _chunks_and_query(w, cfg)
        naive = run_strategy(StrategyConfig("naive"), w, cfg, chunks, query, max_new_tokens=4)
        ape = run_strategy(
            StrategyConfig("ape", p=0, t=1.0, s=1.0), w, cfg, chunks, query, max_new_tokens=4
        )
        assert np.array_equal(naive.logits_last_prefill, ape.logits_last_prefill)
        assert naive.token_ids == ape.token_ids
        assert naive.per_layer_kv_fingerprint == ape.per_layer_kv_fingerprint

    def test_psr_neutral_equals_cacheblend(self, small4):
        w, cfg = small4
        chunks, query = _chunks_and_query(w, cfg)
        blend = run_strategy(
            StrategyConfig("cacheblend", r=0.25), w, cfg, chunks, query, max_new_tokens=4
        )
        psr = run_strategy(
            StrategyConfig("psr", r=0.25, p=0, t=1.0, s=1.0),
            w, cfg, chunks, query, max_new_tokens=4,
        )
        assert blend.selection_trace == psr.selection_trace
        assert np.max(np.abs(blend.logits_last_prefill - psr.logits_last_prefill)) <= 1e-6

    def test_degeneration_lattice_collapses_to_naive(self, small4):
        w, cfg = small4
        chunks, query = _chunks_and_query(w, cfg, act_layers=(1,))
        naive = run_strategy(StrategyConfig("naive"), w, cfg, chunks, query, max_new_tokens=4)
        aux = _rigged_aux_model()
        degenerate = [
            StrategyConfig("cacheblend", r=0.0),
            StrategyConfig("epic", r=0.0),
            StrategyConfig("link0", p=0),
            StrategyConfig("ape", p=0, t=1.0, s=1.0),
            StrategyConfig("cacheclip", r=0.0, p=0),
            StrategyConfig("droidspeak", r=0.0, reselect_layer=1),
            StrategyConfig("psr", r=0.0, p=0, t=1.0, s=1.0),
            StrategyConfig("ablation", components=("prefix", "scale"), p=0, t=1.0, s=1.0),
        ]
        for sc in degenerate:
            got = run_strategy(sc, w, cfg, chunks, query, aux=aux, max_new_tokens=4)
            assert np.array_equal(got.logits_last_prefill, naive.logits_last_prefill), sc.variant
            assert got.token_ids == naive.token_ids, sc.variant

    def test_epic_mask_is_beginning_of_chunks(self, small4):
        w, cfg = small4
        chunks, query = _chunks_and_query(w, cfg, lens=(10, 10))
        got = run_strategy(StrategyConfig("epic", r=0.2), w, cfg, chunks, query, max_new_tokens=2)
        assert got.selection_trace == [(1, frozenset({0, 1, 10, 11}))]

    def test_droidspeak_records_reselection(self, small4):
        w, cfg = small4
        chunks, query = _chunks_and_query(w, cfg, act_layers=(2,))
        got = run_strategy(
            StrategyConfig("droidspeak", r=0.25, reselect_layer=2),
            w, cfg, chunks, query, max_new_tokens=2,
        )
        assert len(got.selection_trace) == 2
        assert got.selection_trace[0][0] == 1
        assert got.selection_trace[1][0] == 2
        assert len(got.selection_trace[1][1]) == len(got.selection_trace[0][1])

    def test_mismatched_prefix_rejected(self, small4):
        w, cfg = small4
        chunks, query = _chunks_and_query(w, cfg, p=2)
        with pytest.raises(ConfigError):
            run_strategy(StrategyConfig("link0", p=3), w, cfg, chunks, query)

    def test_missing_activations_rejected(self, small4):
        w, cfg = small4
        chunks, query = _chunks_and_query(w, cfg)  # no activations captured
        with pytest.raises(ConfigError):
            run_strategy(
                StrategyConfig("droidspeak", r=0.25, reselect_layer=2), w, cfg, chunks, query
            )

    def test_link0_prefix_changes_output_state(self, small4):
        w, cfg = small4
        chunks0, query = _chunks_and_query(w, cfg, p=0)
        chunks3, _ = _chunks_and_query(w, cfg, p=3)
        naive = run_strategy(StrategyConfig("naive"), w, cfg, chunks0, query, max_new_tokens=2)
        link = run_strategy(StrategyConfig("link0", p=3), w, cfg, chunks3, query, max_new_tokens=2)
        assert not np.array_equal(naive.logits_last_prefill, link.logits_last_prefill)

    def test_ablation_full_set_matches_psr(self, small4):
        w, cfg = small4
        chunks, query = _chunks_and_query(w, cfg, p=2)
        psr = run_strategy(
            StrategyConfig("psr", r=0.25, p=2, t=0.7, s=2.0), w, cfg, chunks, query, max_new_tokens=3
        )
        abl = run_strategy(
            StrategyConfig("ablation", components=("prefix", "scale", "recompute"), r=0.25, p=2, t=0.7, s=2.0),
            w, cfg, chunks, query, max_new_tokens=3,
        )
        assert np.array_equal(psr.logits_last_prefill, abl.logits_last_prefill)
        assert psr.token_ids == abl.token_ids
