import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oktransformer.analysis import influence, low_resource_split, param_drift
from oktransformer.errors import CheckpointError, ContractError
from oktransformer.kb import CandidateSet, brute_force_retrieve, retrieve
from oktransformer.model import build_knowledge, ok_encode
from oktransformer.training import Example
from oktransformer.transformer import VanillaEncoder

from conftest import small_config

TEXT = "John promised Bill to leave, so an hour later he left."


def state(model):
    return {k: v.data.copy() for k, v in model.parameters().items()}


@pytest.fixture(scope="module")
def base_state(vocab):
    return VanillaEncoder.init(small_config(len(vocab))).state_dict()


class TestDrift:
    def test_self_is_zero(self, ok_model):
        rep = param_drift(state(ok_model), state(ok_model))
        assert rep.rows and all(r.distance == 0.0 for r in rep.rows)

    def test_single_entry_perturbation(self, ok_model):
        before = state(ok_model)
        after = {k: v.copy() for k, v in before.items()}
        name = "encoder.layers.1.t1.ffn_w_i"
        after[name][3, 5] += 0.01
        per_layer = param_drift(before, after, "*t1.ffn_w_i").per_layer()
        assert per_layer[1] == pytest.approx(0.01, abs=1e-12)
        assert per_layer[0] == 0.0

    def test_symmetric(self, ok_model, rng):
        a = state(ok_model)
        b = {k: v + rng.normal(size=v.shape) for k, v in a.items()}
        ab = [r.distance for r in param_drift(a, b, "*").rows]
        ba = [r.distance for r in param_drift(b, a, "*").rows]
        assert ab == ba

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_triangle_inequality(self, base_state, seed):
        r = np.random.default_rng(seed)
        a = base_state
        b = {k: v + r.normal(size=v.shape) for k, v in a.items()}
        c = {k: v + r.normal(size=v.shape) for k, v in a.items()}
        ac, ab, bc = (param_drift(x, y, "*ffn_w_i").per_layer() for x, y in ((a, c), (a, b), (b, c)))
        for layer in ac:
            assert ac[layer] <= ab[layer] + bc[layer] + 1e-9

    def test_matches_direct_sum(self, ok_model, rng):
        a = state(ok_model)
        b = {k: v + rng.normal(size=v.shape) for k, v in a.items()}
        for row in param_drift(a, b, "*").rows:
            assert row.distance == pytest.approx(float(np.sum(np.abs(b[row.name] - a[row.name]))), rel=1e-12)

    def test_structure_mismatch_names_parameter(self, ok_model):
        a = state(ok_model)
        b = dict(a)
        b["encoder.k_embedding"] = np.zeros(3)
        with pytest.raises(CheckpointError, match="k_embedding"):
            param_drift(a, b)

    def test_ambiguous_pattern_rejected_by_per_layer(self, ok_model):
        a = state(ok_model)
        with pytest.raises(ContractError):
            param_drift(a, a, "*ffn_w_i").per_layer()


def candidates(ok_model):
    cs = retrieve(TEXT, ok_model.kb, n_max=4)
    assert len(cs.real) >= 3
    return cs


def reforward(model, text, cs):
    """Probabilities from an explicit forward pass and a numpy head."""
    seq = model.sequence(text, None)
    knowledge = build_knowledge([cs], model._desc_cache, model.n_max)
    h = ok_encode(seq, knowledge, model.encoder).last.data[0, 0]
    z = h @ model.head.w.data + model.head.b.data
    e = np.exp(z - z.max())
    return e / e.sum()


class TestInfluence:
    def test_leave_one_out_matches_reforward(self, ok_model):
        cs = candidates(ok_model)
        full = reforward(ok_model, TEXT, cs)
        records = {r.entry_id: r.influence for r in influence(TEXT, cs, ok_model)}
        for e in cs.real:
            rest = CandidateSet.of([x for x in cs.real if x.id != e.id])
            oracle = float(np.sqrt(np.sum((full - reforward(ok_model, TEXT, rest)) ** 2)))
            assert abs(records[e.id] - oracle) < 1e-10

    def test_positive_for_live_entries(self, ok_model):
        assert all(r.influence > 0 for r in influence(TEXT, candidates(ok_model), ok_model))

    def test_order_invariant(self, ok_model):
        cs = candidates(ok_model)
        flipped = CandidateSet.of(reversed(cs.real))
        a = {r.entry_id: r.influence for r in influence(TEXT, cs, ok_model)}
        b = {r.entry_id: r.influence for r in influence(TEXT, flipped, ok_model)}
        assert a.keys() == b.keys()
        for k in a:
            assert abs(a[k] - b[k]) < 1e-10

    def test_ranks_are_permutation_sorted(self, ok_model):
        records = influence(TEXT, candidates(ok_model), ok_model)
        assert sorted(r.rank for r in records) == list(range(1, len(records) + 1))
        keys = [(-r.influence, r.entry_id) for r in records]
        assert keys == sorted(keys)

    def test_duplicate_descriptions_identical(self, ok_model):
        cs = candidates(ok_model)
        first = cs.real[0]
        twin = type(first)(10_000, first.head, first.relation, first.tail, first.rendered)
        dup = CandidateSet.of([first, twin, *cs.real[1:3]])
        records = {r.entry_id: r.influence for r in influence(TEXT, dup, ok_model)}
        assert records[first.id] == records[twin.id]

    def test_remove_and_readd_restores(self, ok_model):
        cs = candidates(ok_model)
        e = cs.real[1]
        back = CandidateSet.of(sorted([*cs.without(e.id).real, e], key=lambda x: x.id))
        np.testing.assert_array_equal(reforward(ok_model, TEXT, back), reforward(ok_model, TEXT, cs))

    def test_zero_attention_gives_zero_influence(self, ok_model):
        enc = ok_model.encoder
        d = enc.config.hidden
        u = np.full(d, 100.0 / np.sqrt(d))
        enc.null_embedding.data[:] = u
        for layer in enc.layers:
            a = layer.t3.attn
            a.w_q.data[:] = 0.0
            a.b_q.data[:] = u
            a.w_k.data[:] = np.eye(d)
            a.b_k.data[:] = 0.0
        cs = candidates(ok_model)
        seq = ok_model.sequence(TEXT, None)
        out = ok_encode(seq, build_knowledge([cs], ok_model._desc_cache, ok_model.n_max), enc)
        for w in out.attention:
            assert np.all(w[..., 1:] == 0.0)
        assert all(r.influence == 0.0 for r in influence(TEXT, cs, ok_model))

    def test_needs_a_real_candidate(self, ok_model):
        with pytest.raises(ContractError):
            influence(TEXT, CandidateSet(), ok_model)


NAMES = ["john", "bill", "mary", "kevin", "dan", "anna"]


def sentences(mini_kb, n, seed):
    """Short narratives built from the surface forms of the bundled KB heads."""
    r = np.random.default_rng(seed)
    forms = sorted({v for e in mini_kb.entries for v in (e.head, *e.variants) if "PersonX" in v})
    out = []
    for _ in range(n):
        parts = []
        for form in r.choice(forms, size=int(r.integers(1, 3)), replace=False):
            x, y = r.choice(NAMES, size=2, replace=False)
            parts.append(str(form).replace("PersonX", str(x).title()).replace("PersonY", str(y).title()))
        out.append(Example(" and ".join(parts) + ".", label=int(r.integers(0, 2))))
    return out


def oracle_filter(train_k, test, kb, any_overlap=False):
    ids = lambda ex: set(brute_force_retrieve(ex.text, kb, n_max=None).ids)
    seen = set().union(*(ids(ex) for ex in train_k))
    kept = []
    for ex in test:
        s = ids(ex)
        if s and ((s & seen) if any_overlap else s <= seen):
            kept.append(ex)
    return kept


@pytest.fixture(scope="module")
def split_data(mini_kb):
    return sentences(mini_kb, 100, 0), sentences(mini_kb, 60, 1)


class TestLowResource:
    @pytest.mark.parametrize("k", [8, 16, 32, 64])
    def test_matches_set_oracle(self, mini_kb, split_data, k):
        train, test = split_data
        train_k, kept = low_resource_split(train, test, k, 0, mini_kb)
        assert len(train_k) == k and len({id(e) for e in train_k}) == k
        assert all(any(e is t for t in train) for e in train_k)
        assert kept == oracle_filter(train_k, test, mini_kb)

    def test_any_overlap_matches_oracle(self, mini_kb, split_data):
        train, test = split_data
        train_k, kept = low_resource_split(train, test, 8, 3, mini_kb, any_overlap=True)
        assert kept == oracle_filter(train_k, test, mini_kb, any_overlap=True)

    def test_full_train_keeps_all_covered(self, mini_kb, split_data):
        train, test = split_data
        _, kept = low_resource_split(train, test, len(train), 0, mini_kb)
        assert kept == oracle_filter(train, test, mini_kb)

    def test_kept_grows_with_k(self, mini_kb, split_data):
        train, test = split_data
        small = low_resource_split(train, test, 8, 0, mini_kb)[1]
        assert len(small) < len(low_resource_split(train, test, len(train), 0, mini_kb)[1])

    def test_deterministic(self, mini_kb, split_data):
        train, test = split_data
        assert low_resource_split(train, test, 16, 5, mini_kb) == low_resource_split(train, test, 16, 5, mini_kb)

    def test_no_knowledge_keeps_nothing(self, mini_kb):
        train = [Example("zzz qqq", 0)] * 4
        assert low_resource_split(train, [Example("john cried", 1)], 2, 0, mini_kb)[1] == []

    def test_k_too_large(self, mini_kb, split_data):
        train, test = split_data
        with pytest.raises(ContractError, match="101"):
            low_resource_split(train, test, 101, 0, mini_kb)
