import itertools

import numpy as np
import pytest

from physfed import autodiff as ad
from physfed import model as M
from physfed.autodiff import Tape, finite_diff_check
from physfed.federation import ABLATION_ROWS
from physfed.gradcheck import TOY
from physfed.model import Ablation, ModelConfig

SMALL = ModelConfig(channels=8, report_dim=16, hidden_dim=16, code_dim=4, n_heads=2,
                    token_count=4, image_size=12)


def unit_rows(rng, n, d):
    f = rng.normal(size=(n, d))
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def test_same_seed_same_parameters():
    a = M.init_params(SMALL, 3, (1, 2))
    b = M.init_params(SMALL, 3, (1, 2))
    for k in a.shared:
        assert np.array_equal(a.shared[k], b.shared[k])
    assert not np.array_equal(a.shared["encoder.conv1.w"], M.init_params(SMALL, 4).shared["encoder.conv1.w"])


def test_decoders_start_identical():
    p = M.init_params(SMALL, 0, (1, 2), zero_final=False)
    for k in p.decoders[1]:
        assert np.array_equal(p.decoders[1][k], p.decoders[2][k])
    p.decoders[1]["conv1.w"][0, 0, 0, 0] += 1.0
    assert p.decoders[2]["conv1.w"][0, 0, 0, 0] != p.decoders[1]["conv1.w"][0, 0, 0, 0]


def test_he_std():
    cfg = ModelConfig(channels=64)
    w = M.init_params(cfg, 0).shared["encoder.conv3.w"]  # 64 x 32 x 3 x 3 > 1e4 entries
    assert w.size >= 10_000
    target = np.sqrt(2.0 / (32 * 9))
    assert abs(w.std() - target) <= 0.2 * target


def test_encoder_zero_input():
    p = M.init_params(SMALL, 0)
    tape = Tape()
    out = M.encode(M.param_leaves(tape, p.shared), tape.leaf(np.zeros((1, 1, 12, 12))))
    assert out.shape == (1, 8, 12, 12)
    assert not out.data.any()


def test_encoder_shape_64():
    cfg = ModelConfig(channels=8)
    p = M.init_params(cfg, 0)
    tape = Tape()
    out = M.encode(M.param_leaves(tape, p.shared), tape.leaf(np.ones((1, 64, 64))))
    assert out.shape == (8, 64, 64)


def test_scanning_identity_and_purity():
    p = M.init_params(SMALL, 0)
    g = np.linspace(0, 1, 7)
    a1, b1, c1 = M.hypernet_outputs(p.shared, g)
    a2, b2, c2 = M.hypernet_outputs(p.shared, g)
    assert np.all(a1 == 1.0) and np.all(b1 == 0.0)
    assert np.array_equal(c1, c2) and c1.shape == (4,)
    assert np.array_equal(M.code_only(p.shared, g), c1)


def test_anatomy_identity():
    p = M.init_params(SMALL, 0)
    tape = Tape()
    f = tape.leaf(unit_rows(np.random.default_rng(0), 2, 16))
    out = M.anatomy_hypernet(M.param_leaves(tape, p.shared), SMALL, f)
    assert out.shape == (2, 1, 12, 12) and np.all(out.data == 1.0)
    with pytest.raises(M.ModelError):
        M.anatomy_hypernet(M.param_leaves(tape, p.shared), SMALL, tape.leaf(np.ones((1, 8))))


def test_attention_permutation_equivariance():
    rng = np.random.default_rng(5)
    p = M.init_params(SMALL, 1, zero_final=False).shared
    p = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in p.items()}
    tokens = rng.normal(size=(1, 4, 4))
    perm = np.array([2, 0, 3, 1])
    tape = Tape()
    pl = M.param_leaves(tape, p)
    out = M.attention_core(pl, SMALL, tape.leaf(tokens)).data
    out_p = M.attention_core(pl, SMALL, tape.leaf(tokens[:, perm])).data
    np.testing.assert_allclose(out_p, out[:, perm], atol=1e-13)


def _modulate(fx, fan, alpha, beta):
    tape = Tape()
    return M.modulate(tape.leaf(fx), tape.leaf(fan), tape.leaf(alpha), tape.leaf(beta)).data


def test_modulate_hand_example():
    out = _modulate(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), np.full((1, 1, 2, 2), 2.0),
                    np.array([3.0]), np.array([1.0]))
    assert out[0, 0].tolist() == [[7.0, 13.0], [19.0, 25.0]]


def test_modulate_identity_and_annihilation():
    rng = np.random.default_rng(0)
    fx = rng.normal(size=(2, 3, 4, 4))
    beta = np.array([0.5, -1.0, 2.0])
    assert np.array_equal(_modulate(fx, np.ones((2, 1, 4, 4)), np.ones(3), np.zeros(3)), fx)
    out = _modulate(fx, np.zeros((2, 1, 4, 4)), rng.normal(size=3), beta)
    assert np.array_equal(out, np.broadcast_to(beta[None, :, None, None], fx.shape))


@pytest.mark.parametrize(("name", "flags"), ABLATION_ROWS)
def test_identity_at_init_every_configuration(name, flags):
    rng = np.random.default_rng(0)
    p = M.init_params(SMALL, 2, (1, 2), generic=flags.generic_decoder)
    x = rng.uniform(size=(3, 12, 12))
    for cid in (1, 2):
        pred = M.predict(p, SMALL, x, rng.uniform(size=7), unit_rows(rng, 3, 16), cid, flags)
        assert np.array_equal(pred, x)


def test_every_flag_combination_runs():
    rng = np.random.default_rng(1)
    p = M.init_params(SMALL, 2, (1,), zero_final=False)
    p.decoders[M.GENERIC] = p.decoders[1]
    x = rng.uniform(size=(1, 12, 12))
    g, f = rng.uniform(size=7), unit_rows(rng, 1, 16)
    outs = set()
    for bits in itertools.product([False, True], repeat=4):
        pred = M.predict(p, SMALL, x, g, f, 1, Ablation(*bits))
        assert pred.shape == (1, 12, 12) and np.all(np.isfinite(pred))
        outs.add(pred.tobytes())
    # scanning and anatomy flags change the output; decoder choice here does not
    assert len(outs) == 4


def test_table3_enumeration():
    names = [n for n, _ in ABLATION_ROWS]
    assert len(names) == 5
    generic = dict(ABLATION_ROWS)[names[0]]
    assert generic.disable_scanning and generic.disable_anatomy and generic.generic_decoder
    full = dict(ABLATION_ROWS)[names[-1]]
    assert full == Ablation()


def test_unknown_client():
    p = M.init_params(SMALL, 0, (1,))
    with pytest.raises(M.UnknownClient):
        p.decoder(9)


def test_checkpoint_round_trip(tmp_path):
    p = M.init_params(SMALL, 7, (1, 3), zero_final=False)
    M.save_checkpoint(tmp_path / "m.pfm", p, SMALL, {"round": 4})
    q, cfg, extra = M.load_checkpoint(tmp_path / "m.pfm")
    assert cfg == SMALL and extra == {"round": 4}
    assert set(q.decoders) == {1, 3}
    for k in p.shared:
        assert np.array_equal(p.shared[k], q.shared[k])
    M.save_checkpoint(tmp_path / "n.pfm", q, cfg, extra)
    assert (tmp_path / "m.pfm").read_bytes() == (tmp_path / "n.pfm").read_bytes()
    (tmp_path / "bad.pfm").write_bytes(b"XXXX" + (tmp_path / "m.pfm").read_bytes()[4:])
    with pytest.raises(M.VersionMismatch):
        M.load_checkpoint(tmp_path / "bad.pfm")


def test_config_validation():
    with pytest.raises(M.ModelError):
        ModelConfig(report_dim=10)
    with pytest.raises(M.ModelError):
        ModelConfig(hidden_dim=30, token_count=8)


def _toy(seed=0):
    rng = np.random.default_rng(seed)
    p = M.init_params(TOY, seed, (1,), zero_final=False)
    shared = {k: v + 0.05 * rng.normal(size=v.shape) for k, v in p.shared.items()}
    return shared, rng


def test_encoder_mean_gradient():
    shared, rng = _toy()
    enc = {k: v for k, v in shared.items() if k.startswith("encoder.")}
    x = rng.uniform(size=(1, 1, 16, 16))
    rep = finite_diff_check(lambda t, v: ad.mean(M.encode(v, t.leaf(x))), enc, h=1e-6,
                            tol=1e-5, max_coords=8)
    assert rep.passed, rep.max_rel_error


def test_alpha_sum_gradient_wrt_trunk():
    shared, rng = _toy(1)
    hs = {k: v for k, v in shared.items() if k.startswith("hs.")}
    g = rng.uniform(size=7)
    rep = finite_diff_check(lambda t, v: ad.sum_all(M.scanning_hypernet(v, t.leaf(g))[0]), hs,
                            h=1e-6, tol=1e-5, max_coords=8)
    assert rep.max_rel_error["hs.fc1.w"] <= 1e-5 and rep.max_rel_error["hs.fc2.w"] <= 1e-5


def test_anatomy_mean_gradient_wrt_query():
    shared, rng = _toy(2)
    ha = {k: v for k, v in shared.items() if k.startswith("ha.")}
    f = unit_rows(rng, 2, 16)
    q = {"ha.q.w": ha["ha.q.w"], "ha.q.b": ha["ha.q.b"]}
    rest = {k: v for k, v in ha.items() if k not in q}

    def graph(t, v):
        return ad.mean(M.anatomy_hypernet({**M.param_leaves(t, rest), **v}, TOY, t.leaf(f)))

    assert finite_diff_check(graph, q, h=1e-6, tol=1e-4).passed


def test_end_to_end_gradient_to_encoder():
    shared, rng = _toy(3)
    dec = M.init_params(TOY, 3, (1,), zero_final=False).decoders[1]
    x, y = rng.uniform(size=(1, 1, 16, 16)), rng.uniform(size=(1, 1, 16, 16))
    g, f = rng.uniform(size=7), unit_rows(rng, 1, 16)
    enc = {k: v for k, v in shared.items() if k.startswith("encoder.")}
    rest = {k: v for k, v in shared.items() if k not in enc}

    def graph(t, v):
        p = {**M.param_leaves(t, rest), **v}
        pred = M.forward(p, M.param_leaves(t, dec), TOY, t.leaf(x), t.leaf(g), t.leaf(f))
        d = ad.sub(pred, t.leaf(y))
        return ad.mean(ad.mul(d, d))

    rep = finite_diff_check(graph, enc, h=1e-6, tol=1e-4, max_coords=10)
    assert rep.passed, rep.max_rel_error
