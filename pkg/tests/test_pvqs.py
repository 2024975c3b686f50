import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from physfed import model as M
from physfed import pvqs
from physfed.federation import ABLATION_ROWS, FederationConfig, run_federation, with_ablation
from physfed.gradcheck import TOY
from physfed.protocol import MinMaxStats, Protocol, builtin_unseen_protocols, protocol_stats
from physfed.pvqs import CodebookEntry, ProtocolCodebook, build_codebook, quantize

STATS = MinMaxStats((0.0,) * 7, (1.0,) * 7)


def book_of(codes):
    return ProtocolCodebook(tuple(CodebookEntry(i + 1, np.asarray(c, float), np.ones(2), np.zeros(2), i + 1)
                                  for i, c in enumerate(codes)), STATS)


def test_hand_computed_routing():
    book = book_of([(1.0, 0.0), (0.0, 1.0)])
    cid, dist = quantize(book, (0.9, 0.1))
    assert cid == 1
    cos = 0.9 / np.hypot(0.9, 0.1)
    assert cos == pytest.approx(0.9939, abs=1e-4)
    assert dist == pytest.approx(1 - cos, abs=1e-12)
    assert quantize(book, (0.0, 5.0)) == (2, 0.0)


def test_ties_go_to_lowest_id():
    book = book_of([(1.0, 0.0), (0.0, 1.0)])
    assert quantize(book, (1.0, 1.0))[0] == 1


def test_zero_norms():
    with pytest.raises(pvqs.ZeroNormQuery):
        quantize(book_of([(1.0, 0.0)]), (0.0, 0.0))
    with pytest.raises(pvqs.CodebookError):
        ProtocolCodebook((), STATS)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.floats(-3, 3), min_size=4, max_size=4), min_size=2, max_size=6),
       st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.floats(1e-3, 1e3))
def test_self_match_and_scale_invariance(codes, query, s):
    codes, query = np.array(codes), np.array(query)
    assume(np.all(np.linalg.norm(codes, axis=1) > 1e-3) and np.linalg.norm(query) > 1e-3)
    u = codes / np.linalg.norm(codes, axis=1, keepdims=True)
    cos = u @ u.T
    assume(np.all(cos[~np.eye(len(u), dtype=bool)] < 1 - 1e-9))
    book = book_of(codes)
    for i, c in enumerate(codes):
        assert quantize(book, c) == (i + 1, 0.0)
    # positive scaling leaves the winner unchanged unless the top two are a near tie
    d = np.sort(1 - u @ (query / np.linalg.norm(query)))
    assume(d[1] - d[0] > 1e-9)
    assert quantize(book, s * query)[0] == quantize(book, query)[0]


@pytest.fixture
def small_run(make_clients):
    clients = make_clients()
    state = run_federation(clients, FederationConfig(rounds=2, batch_size=2, seed=3), TOY)
    stats = protocol_stats([c.dataset.protocol for c in clients])
    return state, clients, stats


def test_codebook_matches_hypernetwork(small_run):
    state, clients, stats = small_run
    book = build_codebook(state, [c.dataset.protocol for c in clients], stats)
    assert book.client_ids == [1, 3, 5]
    for c in clients:
        e = book.entry(c.client_id)
        a, b, code = M.hypernet_outputs(state.shared, c.g_hat)
        assert np.array_equal(e.code, code) and np.array_equal(e.alpha, a)
        assert quantize(book, e.code) == (c.client_id, 0.0)
    with pytest.raises(pvqs.CodebookError):
        build_codebook(state, [clients[0].dataset.protocol], stats)


def test_known_protocol_reproduces_client_inference(small_run):
    state, clients, stats = small_run
    book = build_codebook(state, [c.dataset.protocol for c in clients], stats)
    c = clients[1]
    x, _, f = c.arrays("test")
    pred, cid, dist = pvqs.infer_unseen(state, book, x, c.dataset.protocol, f)
    assert (cid, dist) == (3, 0.0)
    assert np.array_equal(pred, M.predict(state.params, TOY, x, c.g_hat, f, 3))


def test_unseen_protocols_skip_modulation_heads(small_run, monkeypatch):
    state, clients, stats = small_run
    book = build_codebook(state, [c.dataset.protocol for c in clients], stats)
    calls = []
    monkeypatch.setattr(M, "HEAD_HOOKS", [calls.append])
    x, _, f = clients[0].arrays("test")
    for p in builtin_unseen_protocols():
        pred, cid, dist = pvqs.infer_unseen(state, book, x, p, f)
        assert cid in (1, 3, 5) and 0.0 <= dist <= 2.0
        assert pred.shape == x.shape
    assert calls == []


def test_generic_codebook_uses_shared_decoder(make_clients):
    clients = make_clients()
    state = run_federation(clients, with_ablation(FederationConfig(rounds=1, batch_size=2),
                                                  dict(ABLATION_ROWS)["generic"]), TOY)
    stats = protocol_stats([c.dataset.protocol for c in clients])
    book = build_codebook(state, [c.dataset.protocol for c in clients], stats)
    assert {e.decoder_key for e in book.entries} == {M.GENERIC}
    x, _, f = clients[2].arrays("test")
    pred, cid, _ = pvqs.infer_unseen(state, book, x, clients[2].dataset.protocol, f)
    assert cid == 5 and np.all(np.isfinite(pred))


def test_dump_round_trip(small_run, tmp_path):
    state, clients, stats = small_run
    book = build_codebook(state, [c.dataset.protocol for c in clients], stats)
    pvqs.save_codebook(tmp_path / "cb.txt", book)
    back = pvqs.read_codebook(tmp_path / "cb.txt")
    assert back.client_ids == book.client_ids and back.stats == book.stats
    for a, b in zip(book.entries, back.entries):
        assert np.array_equal(a.code, b.code) and np.array_equal(a.beta, b.beta)
    text = pvqs.dump_codebook(book)
    assert "pairwise cosine" in text
    with pytest.raises(pvqs.CodebookError):
        pvqs.load_codebook("code 1 1 0\n")
