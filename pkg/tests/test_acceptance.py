"""The ten acceptance criteria, one test each.

Each test records a PASS/FAIL line that is printed in the terminal summary
(see conftest.py) and also printed directly when run with ``-s``.
"""

import csv
import itertools
import math
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from physfed import cli, ctphys, gradcheck
from physfed import federation as F
from physfed import model as M
from physfed import phantom as ph
from physfed import pvqs
from physfed.ctphys import FanBeamGeometry, ImageGrid, NoiseConfig, Sinogram
from physfed.federation import ABLATION_ROWS, FederationConfig, aggregate, run_federation
from physfed.gradcheck import TOY
from physfed.objective import orth_loss, psnr, read_metrics, ssim
from physfed.protocol import builtin_known_protocols, builtin_unseen_protocols, normalize_protocol
from physfed.reportfeat import (DimensionMismatch, MalformedResponse, MockServer,
                                ProviderConfig, RemoteProvider, ReportTimeout, stub_feature)

SMOKE = str(Path(__file__).resolve().parent.parent / "configs" / "smoke.toml")
RESULTS = {}

# frozen after the first validated desk4 run (observed: +2.20 dB gain, full - generic = +0.46 dB)
MIN_GAIN_DB = 2.0
MIN_FULL_MINUS_GENERIC_DB = 0.0


@contextmanager
def criterion(n, title, budget_s=None):
    detail = {}
    t0 = time.monotonic()
    try:
        yield detail
        elapsed = time.monotonic() - t0
        if budget_s is not None:
            assert elapsed < budget_s, f"took {elapsed:.1f} s, budget {budget_s} s"
    except BaseException:
        RESULTS[n] = ("FAIL", title, time.monotonic() - t0, _fmt(detail))
        print(f"criterion {n}: FAIL {title}")
        raise
    RESULTS[n] = ("PASS", title, time.monotonic() - t0, _fmt(detail))
    print(f"criterion {n}: PASS {title} {_fmt(detail)}")


def _fmt(detail):
    return " ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                    for k, v in detail.items())


# 1 -------------------------------------------------------------------------

def test_01_gradient_correctness():
    with criterion(1, "gradient correctness", budget_s=120) as d:
        results = gradcheck.run_suite(tol=1e-4)
        names = [n for n, _ in results]
        assert "conv2d" in names and "model.forward" in names
        failed = [n for n, r in results if not r.passed]
        d["checks"] = len(results)
        d["worst"] = max(r.worst for n, r in results if n != "model.attention_key_bias_zero")
        assert not failed, failed


# 2 -------------------------------------------------------------------------

def test_02_ct_physics():
    with criterion(2, "CT physics sanity", budget_s=180) as d:
        # noise-free FBP of a 64x64 phantom at 360 views and 768 bins
        pl = 0.5
        g = FanBeamGeometry(nv=360, ndb=768, dbl=2 * pl * 64 * 1.5 / 768, dsr=250.0, ddr=250.0,
                            image_size=64, pixel_len=pl)
        slc = ph.generate_patient(11, "abdomen", 1, fov_mm=64 * pl)[0]
        truth = ph.rasterize(slc, 64, pl)[0].data
        rec = ctphys.fbp_reconstruct(ctphys.forward_project(ImageGrid(truth, pl), g), g).data
        d["fbp_psnr"] = psnr(rec, truth, data_range=truth.max())
        assert d["fbp_psnr"] >= 25.0

        # centered disk: the central ray crosses a chord of length 2R
        gd = FanBeamGeometry(nv=8, ndb=129, dbl=1.0, dsr=250.0, ddr=250.0, image_size=64,
                             pixel_len=0.5)
        c = (np.arange(64) - 31.5) * 0.5
        R, mu = 12.0, 0.02
        img = np.where(c[None, :] ** 2 + c[:, None] ** 2 <= R ** 2, mu, 0.0)
        central = ctphys.forward_project(ImageGrid(img, 0.5), gd).data[:, 64]
        d["chord_err"] = float(np.abs(central - 2 * R * mu).max())
        assert d["chord_err"] <= 2 * mu * 0.5  # one pixel of rasterization at each end

        # Poisson counts: I0 = 1e5, y = 1, electronic variance 10, 1e5 draws
        flat = FanBeamGeometry(nv=1000, ndb=100, dbl=10.0, dsr=250.0, ddr=250.0, image_size=8,
                               pixel_len=1.0)
        noisy = ctphys.simulate_low_dose(Sinogram(np.ones((1000, 100)), flat),
                                         NoiseConfig(1e5, 10.0), 2024).data
        counts = 1e5 * np.exp(-noisy)
        d["count_rel_err"] = float(abs(counts.mean() / (1e5 * math.e ** -1) - 1))
        assert counts.size == 100_000 and d["count_rel_err"] < 0.005


# 3 -------------------------------------------------------------------------

def test_03_identity_at_init(make_clients):
    with criterion(3, "identity at init", budget_s=60) as d:
        clients = make_clients()
        n = 0
        for bits in itertools.product([False, True], repeat=4):
            flags = M.Ablation(*bits)
            params = M.init_params(TOY, 5, [c.client_id for c in clients],
                                   generic=flags.generic_decoder)
            for c in clients:
                for split in ("train", "test"):
                    x, _, _ = c.arrays(split)
                    assert np.array_equal(F.predict_client(params, TOY, c, split, flags), x)
                    n += 1
                rec = F.evaluate_client(params, TOY, c, "test", 0, flags)
                raw = F.input_metrics(c)
                assert (rec.psnr_mean, rec.ssim_mean) == (raw.psnr_mean, raw.ssim_mean)
        d["cases"] = n
        assert {f for _, f in ABLATION_ROWS} <= {M.Ablation(*b) for b in itertools.product([0, 1], repeat=4)}


# 4 -------------------------------------------------------------------------

def test_04_algorithm_mechanics(make_clients, monkeypatch):
    with criterion(4, "federated round mechanics", budget_s=120):
        rng = np.random.default_rng(0)
        p = {"w": rng.normal(size=(4, 3))}
        assert np.array_equal(aggregate([p], [7])["w"], p["w"])
        assert np.allclose(aggregate([p, p, p], [1, 2, 3])["w"], p["w"], rtol=1e-15, atol=0)
        assert aggregate([{"w": np.array([2.0])}, {"w": np.array([4.0])}], [1, 1])["w"][0] == 3.0
        assert aggregate([{"w": np.array([0.0])}, {"w": np.array([4.0])}], [1, 3])["w"][0] == 3.0

        # every client receives the same shared partition in every round
        seen = {}
        real = F.local_train

        def spy(shared, client, *args, **kw):
            seen.setdefault(args[-1], []).append({k: v.copy() for k, v in shared.items()})
            return real(shared, client, *args, **kw)

        monkeypatch.setattr(F, "local_train", spy)
        state = run_federation(make_clients(), FederationConfig(rounds=3, batch_size=2, seed=1), TOY)
        for sets in seen.values():
            assert all(np.array_equal(s[k], sets[0][k]) for s in sets for k in s)
        assert not np.array_equal(state.decoders[1]["conv1.w"], state.decoders[3]["conv1.w"])
        monkeypatch.setattr(F, "local_train", real)

        # K = 1 is centralized training
        cfg = FederationConfig(rounds=3, batch_size=2, seed=2, K=1)
        fed = run_federation(make_clients((5,)), cfg, TOY)
        client = make_clients((5,))[0]
        init = M.init_params(TOY, cfg.seed, (5,))
        shared, client.decoder = init.shared, init.decoders[5]
        client.optimizer = F.Adam(cfg.adam)
        for rnd in range(1, 4):
            res = real(shared, client, cfg, TOY, client.g_hat[None], 0, rnd)
            shared, client.decoder = res.shared, res.decoder
        assert all(np.array_equal(fed.shared[k], shared[k]) for k in shared)
        assert all(np.array_equal(fed.decoders[5][k], client.decoder[k]) for k in client.decoder)


# 5 -------------------------------------------------------------------------

def _final_mean(train_dir, rounds=30):
    recs = read_metrics(Path(train_dir) / "metrics.csv")
    return float(np.mean([r.psnr_mean for r in recs if r.round == rounds])), recs


@pytest.mark.slow
def test_05_desk_scale_learning(desk4_runs):
    with criterion(5, "desk4 learning trend") as d:
        full_dir = Path(desk4_runs["full"]["out"]) / "train"
        gen_dir = Path(desk4_runs["generic"]["out"]) / "train"
        full, recs = _final_mean(full_dir)
        generic, _ = _final_mean(gen_dir)
        inputs = float(np.mean([r.psnr_mean for r in read_metrics(full_dir / "input_metrics.csv")]))
        for cid in (1, 3, 5, 6):
            assert [r.round for r in recs if r.client_id == cid] == list(range(1, 31))
        d["input"], d["full"], d["generic"] = inputs, full, generic
        d["gain"] = full - inputs
        assert full - inputs >= MIN_GAIN_DB
        assert full - generic >= MIN_FULL_MINUS_GENERIC_DB


# 6 -------------------------------------------------------------------------

@pytest.mark.slow
def test_06_orthogonality(desk4_runs):
    with criterion(6, "orthogonality penalty") as d:
        assert orth_loss(np.eye(4), 2) == 0.0
        assert orth_loss(np.array([[1.0, 1.0], [1.0, -1.0], [2.0, 0.0]]), 2) == 8.0
        rng = np.random.default_rng(6)
        for _ in range(20):
            c, s, i = rng.normal(size=(5, 3)), rng.uniform(0.1, 4), int(rng.integers(5))
            base = orth_loss(c, i)
            assert abs(orth_loss(s * c, i) - s ** 4 * base) <= 1e-10 * max(1.0, s ** 4 * base)
        with open(Path(desk4_runs["full"]["out"]) / "train" / "cosine_history.csv") as fh:
            hist = {int(r["round"]): float(r["max_abs_cosine"]) for r in csv.DictReader(fh)}
        d["cos_round0"], d["cos_round30"] = hist[0], hist[30]
        assert hist[30] < hist[0]


# 7 -------------------------------------------------------------------------

@pytest.mark.slow
def test_07_pvqs(desk4_runs):
    with criterion(7, "protocol vector quantization", budget_s=300) as d:
        cfg = desk4_runs["full"]
        train = Path(cfg["out"]) / "train"
        params, mcfg, extra, flags, stats = cli._load_trained(train / "checkpoint.pfm")
        trained = cli._trained_state(params, mcfg, extra, flags, stats)
        book = pvqs.read_codebook(train / "codebook.txt")
        for e in book.entries:
            assert pvqs.quantize(book, e.code) == (e.client_id, 0.0)
        cos = np.abs(book.cosine_matrix())
        d["max_pair_cos"] = float(cos[~np.eye(len(cos), dtype=bool)].max())
        assert d["max_pair_cos"] < 0.99
        rng = np.random.default_rng(7)
        for _ in range(50):
            q = rng.normal(size=book.codes().shape[1])
            assert pvqs.quantize(book, q)[0] == pvqs.quantize(book, rng.uniform(1e-3, 1e3) * q)[0]

        # a known protocol reproduces that client's own inference bit for bit
        known = builtin_known_protocols()[2]
        ds = cli.load_client_datasets(cfg, [3])[0]
        client = F.prepare_clients([ds], cli.make_provider(cli.provider_config(cfg)), stats)[0]
        x, _, f = client.arrays("test")
        pred, cid, dist = pvqs.infer_unseen(trained, book, x, known, f)
        assert (cid, dist) == (3, 0.0)
        own = M.predict(params, mcfg, x, normalize_protocol(known, stats).as_array(), f, 3)
        assert np.array_equal(pred, own)

        with open(Path(cfg["out"]) / "unseen" / "routing.csv", newline="") as fh:
            rows = {r["name"]: r for r in csv.DictReader(fh)}
        recs = read_metrics(train / "metrics.csv")
        own_psnr = next(r.psnr_mean for r in recs if r.client_id == 3 and r.round == 30)
        pert = rows["client3_perturbed"]
        d["perturbed_psnr"], d["client3_psnr"] = float(pert["psnr_mean"]), own_psnr
        assert pert["matched_client"] == "3"
        assert abs(float(pert["psnr_mean"]) - own_psnr) <= 1.0
        for k in range(1, len(builtin_unseen_protocols()) + 1):
            assert int(rows[f"unseen{k}"]["matched_client"]) in (1, 3, 5, 6)
            assert 0.0 <= float(rows[f"unseen{k}"]["distance"]) <= 2.0


# 8 -------------------------------------------------------------------------

def test_08_metrics_oracle():
    with criterion(8, "metrics against reference implementation") as d:
        worst_p = worst_s = 0.0
        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            ref = rng.uniform(size=(48, 48))
            pred = np.clip(ref + rng.normal(0, 0.1, size=ref.shape), 0, 1)
            worst_p = max(worst_p, abs(psnr(pred, ref) - peak_signal_noise_ratio(ref, pred, data_range=1.0)))
            worst_s = max(worst_s, abs(ssim(pred, ref) - structural_similarity(
                pred, ref, data_range=1.0, gaussian_weights=True, sigma=1.5,
                use_sample_covariance=False)))
        d["psnr_dev"], d["ssim_dev"] = worst_p, worst_s
        assert worst_p <= 1e-6 and worst_s <= 1e-4
        a = np.random.default_rng(0).uniform(size=(16, 16))
        assert psnr(a, a) == math.inf and ssim(a, a) == 1.0


# 9 -------------------------------------------------------------------------

def test_09_provider_contract(tmp_path):
    with criterion(9, "report feature provider contract"):
        meta = ph.AnatomyMetadata("chest", {"soft": 0.5, "fat": 0.1, "bone": 0.1, "blood": 0.0}, 1)
        other = ph.AnatomyMetadata("abdomen", meta.tissue_fractions, 1)
        img = ImageGrid(np.random.default_rng(1).uniform(0, 0.04, (16, 16)), 1.0)
        cfg = ProviderConfig(d=16)
        a = stub_feature(img, meta, cfg).values
        assert np.array_equal(a, stub_feature(img, meta, cfg).values)
        assert abs(np.linalg.norm(a) - 1) <= 1e-12
        assert a @ stub_feature(img, other, cfg).values < 1 - 1e-6

        def remote(srv, d=16, timeout_ms=2000):
            return RemoteProvider(ProviderConfig(kind="remote", d=d, endpoint=srv.endpoint,
                                                 timeout_ms=timeout_ms))

        with MockServer(vector=np.arange(1.0, 17.0)) as srv:
            v = remote(srv).feature(img).values
            assert np.allclose(v, np.arange(1.0, 17.0) / np.linalg.norm(np.arange(1.0, 17.0)))
        with MockServer(vector=np.ones(15)) as srv:
            with pytest.raises(DimensionMismatch):
                remote(srv, d=16).feature(img)
        with MockServer(behavior="malform") as srv:
            with pytest.raises(MalformedResponse):
                remote(srv).feature(img)
        with MockServer(behavior="delay", delay_ms=1000) as srv:
            t0 = time.monotonic()
            with pytest.raises(ReportTimeout):
                remote(srv, timeout_ms=150).feature(img)
            assert time.monotonic() - t0 < 0.25

        # the same run with the stub and with a remote service echoing the stub's vectors
        stub_out, remote_out = tmp_path / "stub", tmp_path / "remote"
        base = cli.load_config(SMOKE, overrides={"out": str(stub_out)})
        cli.cmd_simulate(base)
        cli.cmd_train(base, threads=1)
        stub = cli.make_provider(cli.provider_config(base))
        table = {}
        for ds in cli.load_client_datasets(base):
            for s in ds.samples:
                table[s.low_dose.data.astype(np.float32).tobytes()] = \
                    stub.feature(s.low_dose, s.metadata).values

        with MockServer(responder=lambda image, d, prompt: table[image.astype(np.float32).tobytes()]) as srv:
            rcfg = cli.load_config(SMOKE, overrides={
                "out": str(remote_out), "provider": {"kind": "remote", "endpoint": srv.endpoint}})
            (remote_out).mkdir()
            (remote_out / "data").symlink_to(stub_out / "data")
            cli.cmd_train(rcfg, threads=1)
        for name in ("metrics.csv", "checkpoint.pfm", "codebook.txt"):
            assert (stub_out / "train" / name).read_bytes() == (remote_out / "train" / name).read_bytes()


# 10 ------------------------------------------------------------------------

def test_10_reproducibility(tmp_path):
    with criterion(10, "single-thread reproducibility") as d:
        outs = []
        for k in range(2):
            out = tmp_path / f"run{k}"
            assert cli.main(["simulate", "--config", SMOKE, "--out", str(out), "--seed", "11"]) == 0
            assert cli.main(["train", "--config", SMOKE, "--out", str(out), "--seed", "11",
                             "--threads", "1"]) == 0
            outs.append(out / "train")
        names = sorted(p.name for p in outs[0].iterdir()
                       if p.suffix in (".csv", ".pfm"))
        d["files"] = len(names)
        assert "metrics.csv" in names and "checkpoint.pfm" in names
        for name in names:
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
