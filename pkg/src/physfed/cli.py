"""Experiment driver: ``python -m physfed <command> [options]``.

Commands read one TOML config (or a built-in preset) and write everything
under the output directory::

    OUT/data/client_<id>/     simulated datasets            (simulate)
    OUT/train/                checkpoint, metrics, codebook (train)
    OUT/eval/                 metrics and PGM images        (eval)
    OUT/unseen/               routing report and metrics    (infer-unseen)

Exit codes: 0 success, 1 invalid config or arguments, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import shutil
import subprocess
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from . import ctphys
from . import federation as F
from . import gradcheck
from . import model as M
from . import phantom as ph
from . import pvqs
from .objective import LossConfig, MetricRecord, append_metrics, psnr, ssim
from .protocol import (MinMaxStats, Protocol, ProtocolError, builtin_known_protocols,
                       builtin_unseen_protocols, normalize_protocol, protocol_stats)
from .reportfeat import ProviderConfig, make_provider

log = logging.getLogger("physfed")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# presets
# --------------------------------------------------------------------------

def _client(cid, train_seeds, slices=8, test_seeds=(999,), test_slices=4):
    return {"client_id": cid, "builtin": cid, "patient_seeds": list(train_seeds),
            "slices": slices, "test_seeds": list(test_seeds), "test_slices": test_slices}


_UNSEEN_BLOCK = {
    "test_seeds": [999], "test_slices": 4,
    "clients": [{"name": f"unseen{i}", "builtin_unseen": i} for i in range(1, 5)]
    + [{"name": "client3_perturbed", "builtin": 3, "perturb": 0.05}],
}

PRESETS = {
    "desk4": {
        "seed": 0,
        "out": "runs/desk4",
        "dataset": {"image_size": 64, "noise_seed": 7,
                    "clients": [_client(c, (10 * c, 10 * c + 1)) for c in (1, 3, 5, 6)]},
        "model": {},
        "federation": {"rounds": 30, "local_epochs": 1, "batch_size": 2, "lr": 1e-3,
                       "tau": 0.01, "checkpoint_every": 10},
        "provider": {"kind": "stub", "d": 64, "stub_seed": 0},
        "unseen": _UNSEEN_BLOCK,
    },
    "paper8": {
        "seed": 0,
        "out": "runs/paper8",
        "dataset": {"image_size": 32, "noise_seed": 7,
                    "clients": [_client(c, (10 * c, 10 * c + 1)) for c in range(1, 9)]},
        "model": {},
        "federation": {"rounds": 30, "local_epochs": 1, "batch_size": 2, "lr": 1e-3,
                       "tau": 0.01, "checkpoint_every": 10},
        "provider": {"kind": "stub", "d": 64, "stub_seed": 0},
        "unseen": _UNSEEN_BLOCK,
    },
}

ABLATIONS = dict(F.ABLATION_ROWS)


# --------------------------------------------------------------------------
# config handling
# --------------------------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, preset=None, overrides: dict | None = None) -> dict:
    """Preset, then file, then command-line overrides; later wins."""
    if preset is None and path is None:
        preset = "desk4"
    cfg = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = copy.deepcopy(PRESETS[preset])
    if path is not None:
        try:
            with open(path, "rb") as fh:
                cfg = _merge(cfg, tomllib.load(fh))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = _merge(cfg, overrides or {})
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    ds = cfg.get("dataset")
    if not isinstance(ds, dict) or not ds.get("clients"):
        raise ConfigError("config needs a [dataset] block with at least one client")
    ids = [c.get("client_id") for c in ds["clients"]]
    if any(not isinstance(i, int) for i in ids):
        raise ConfigError("every client needs an integer client_id")
    if len(set(ids)) != len(ids):
        raise ConfigError(f"client ids must be unique, got {ids}")
    for c in ds["clients"]:
        client_protocol(c)
        if not c.get("patient_seeds"):
            raise ConfigError(f"client {c['client_id']} has no patient_seeds")
    for u in cfg.get("unseen", {}).get("clients", []):
        client_protocol(u)
    for key in ("model", "federation", "provider"):
        if not isinstance(cfg.get(key, {}), dict):
            raise ConfigError(f"[{key}] must be a table")
    model_config(cfg)
    federation_config(cfg)
    provider_config(cfg)
    abl = cfg.get("federation", {}).get("ablation")
    if abl is not None and abl not in ABLATIONS:
        raise ConfigError(f"unknown ablation {abl!r}; choose from {list(ABLATIONS)}")


def client_protocol(c: dict) -> Protocol:
    known, unseen = builtin_known_protocols(), builtin_unseen_protocols()
    try:
        if "protocol" in c:
            p = c["protocol"]
            base = Protocol(**p) if isinstance(p, dict) else Protocol(*p)
        elif "builtin" in c:
            if not 1 <= c["builtin"] <= len(known):
                raise ConfigError(f"builtin index {c['builtin']} outside 1..{len(known)}")
            base = known[c["builtin"] - 1]
        elif "builtin_unseen" in c:
            if not 1 <= c["builtin_unseen"] <= len(unseen):
                raise ConfigError(
                    f"builtin_unseen index {c['builtin_unseen']} outside 1..{len(unseen)}")
            base = unseen[c["builtin_unseen"] - 1]
        else:
            raise ConfigError(f"entry {c} needs protocol, builtin or builtin_unseen")
        if c.get("perturb"):
            return perturbed(base, float(c["perturb"]))
        return base
    except (TypeError, ProtocolError) as exc:
        raise ConfigError(f"bad protocol in {c}: {exc}") from exc


def perturbed(p: Protocol, frac: float) -> Protocol:
    """Every entry moved by ``frac`` with alternating sign (+, -, +, ...)."""
    return p.scaled([1 + frac if j % 2 == 0 else 1 - frac for j in range(7)])


def _pick(cls, block: dict, rename: dict | None = None):
    names = {f.name for f in fields(cls)}
    rename = rename or {}
    return {rename.get(k, k): v for k, v in block.items() if rename.get(k, k) in names}


def model_config(cfg: dict) -> M.ModelConfig:
    block = dict(cfg.get("model", {}))
    block.setdefault("image_size", cfg["dataset"].get("image_size", 64))
    try:
        return M.ModelConfig(**_pick(M.ModelConfig, block))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[model]: {exc}") from exc


def federation_config(cfg: dict, threads: int | None = None) -> F.FederationConfig:
    b = cfg.get("federation", {})
    try:
        adam = F.AdamConfig(**_pick(F.AdamConfig, b))
        flags = ABLATIONS[b["ablation"]] if "ablation" in b else M.Ablation(
            **_pick(M.Ablation, b))
        return F.FederationConfig(
            rounds=b.get("rounds", 30), local_epochs=b.get("local_epochs", 1),
            batch_size=b.get("batch_size", 4), adam=adam,
            loss=LossConfig(b.get("tau", 0.01)), ablation=flags,
            seed=cfg.get("seed", 0), threads=threads or b.get("threads", 1),
            reset_moments=b.get("reset_moments", False))
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"[federation]: {exc}") from exc


def provider_config(cfg: dict) -> ProviderConfig:
    try:
        return ProviderConfig(**_pick(ProviderConfig, cfg.get("provider", {})))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[provider]: {exc}") from exc


def version_string() -> str:
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                              capture_output=True, text=True, timeout=5,
                              cwd=Path(__file__).resolve().parent)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_echo(directory: Path, cfg: dict, command: str) -> None:
    """Resolved config and run manifest, so every output directory is self-describing."""
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.resolved.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    manifest = {"command": command, "seed": cfg.get("seed", 0), "version": version_string(),
                "config": cfg}
    (directory / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def data_dir(cfg: dict) -> Path:
    return Path(cfg["out"]) / "data"


def known_stats(cfg: dict) -> MinMaxStats:
    return protocol_stats([client_protocol(c) for c in cfg["dataset"]["clients"]])


def cmd_simulate(cfg: dict) -> list[Path]:
    ds_cfg = cfg["dataset"]
    size, noise_seed = ds_cfg.get("image_size", 64), ds_cfg.get("noise_seed", cfg.get("seed", 0))
    registry = ph.SeedRegistry()
    root = data_dir(cfg)
    written = []
    for c in ds_cfg["clients"]:
        p = client_protocol(c)
        ds = ph.build_client_dataset(c["client_id"], p, c["patient_seeds"], c.get("slices", 8),
                                     size, noise_seed, registry=registry)
        if c.get("test_seeds"):
            ph.build_client_dataset(c["client_id"], p, c["test_seeds"], c.get("test_slices", 4),
                                    size, noise_seed, split="test", dataset=ds)
        d = root / f"client_{c['client_id']}"
        if d.exists():
            shutil.rmtree(d)
        ph.save_dataset(ds, d)
        written.append(d)
        log.info("client %s: %d samples -> %s", c["client_id"], len(ds.samples), d)
    write_echo(root, cfg, "simulate")
    return written


def load_client_datasets(cfg: dict, ids=None) -> list:
    root = data_dir(cfg)
    out = []
    for c in cfg["dataset"]["clients"]:
        if ids is not None and c["client_id"] not in ids:
            continue
        d = root / f"client_{c['client_id']}"
        if not (d / "manifest.csv").exists():
            raise ConfigError(f"dataset {d} not found; run `simulate` first")
        out.append(ph.load_dataset(d))
    return out


def _extra(cfg: dict, fed: F.FederationConfig, stats: MinMaxStats, clients, rnd: int) -> dict:
    return {"round": rnd, "client_ids": [c.client_id for c in clients],
            "stats": {"mins": list(stats.mins), "maxs": list(stats.maxs)},
            "protocols": {str(c.client_id): list(c.dataset.protocol.as_array()) for c in clients},
            "ablation": asdict(fed.ablation), "seed": fed.seed}


def cmd_train(cfg: dict, threads: int | None = None) -> Path:
    out = Path(cfg["out"]) / "train"
    out.mkdir(parents=True, exist_ok=True)
    fed = federation_config(cfg, threads)
    mcfg = model_config(cfg)
    stats = known_stats(cfg)
    clients = F.prepare_clients(load_client_datasets(cfg), make_provider(provider_config(cfg)),
                                stats)
    metrics = out / "metrics.csv"
    if metrics.exists():
        metrics.unlink()
    for old in out.glob("ckpt_round*.pfm"):
        old.unlink()
    every = cfg.get("federation", {}).get("checkpoint_every", 0)

    def on_round(rnd, params, records):
        append_metrics(metrics, records)
        log.info("round %d: mean test PSNR %.3f dB", rnd,
                 float(np.mean([r.psnr_mean for r in records])))
        if every and rnd % every == 0:
            M.save_checkpoint(out / f"ckpt_round{rnd:03d}.pfm", params, mcfg,
                              _extra(cfg, fed, stats, clients, rnd))

    trained = F.run_federation(clients, fed, mcfg, on_round=on_round)
    M.save_checkpoint(out / "checkpoint.pfm", trained.params, mcfg,
                      _extra(cfg, fed, stats, clients, fed.rounds))
    book = pvqs.build_codebook(trained, [c.dataset.protocol for c in clients], stats)
    pvqs.save_codebook(out / "codebook.txt", book)
    with open(out / "cosine_history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("round", "max_abs_cosine"))
        for r, v in enumerate(trained.cos_history):
            w.writerow((r, repr(v)))
    append_metrics(out / "input_metrics.csv", [F.input_metrics(c) for c in clients])
    write_echo(out, cfg, "train")
    return out


def _load_trained(path):
    params, mcfg, extra = M.load_checkpoint(path)
    flags = M.Ablation(**extra.get("ablation", {}))
    stats = MinMaxStats(extra["stats"]["mins"], extra["stats"]["maxs"])
    return params, mcfg, extra, flags, stats


def _trained_state(params, mcfg, extra, flags, stats) -> F.TrainedState:
    ids = extra["client_ids"]
    protocols = {cid: Protocol(*extra["protocols"][str(cid)]) for cid in ids}
    g_hats = {cid: normalize_protocol(p, stats).as_array() for cid, p in protocols.items()}
    codes, alphas, betas = F._codes(params.shared, g_hats)
    return F.TrainedState(params.shared, params.decoders, ids, g_hats, codes, alphas, betas,
                          [], [], F.FederationConfig(ablation=flags, seed=extra.get("seed", 0)),
                          mcfg)


def cmd_eval(cfg: dict, checkpoint=None, ids=None, dump_images=False) -> Path:
    checkpoint = Path(checkpoint or Path(cfg["out"]) / "train" / "checkpoint.pfm")
    params, mcfg, extra, flags, stats = _load_trained(checkpoint)
    out = Path(cfg["out"]) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    clients = F.prepare_clients(load_client_datasets(cfg, ids),
                                make_provider(provider_config(cfg)), stats)
    if ids is not None:
        missing = set(ids) - {c.client_id for c in clients}
        if missing:
            raise M.UnknownClient(f"no dataset for clients {sorted(missing)}")
    records = [F.evaluate_client(params, mcfg, c, "test", extra.get("round", 0), flags)
               for c in clients]
    metrics = out / "metrics.csv"
    if metrics.exists():
        metrics.unlink()
    append_metrics(metrics, records)
    if dump_images:
        img_dir = out / "images"
        img_dir.mkdir(exist_ok=True)
        for c in clients:
            x, y, _ = c.arrays("test")
            pred = F.predict_client(params, mcfg, c, "test", flags)
            for i in range(len(x)):
                stem = img_dir / f"client{c.client_id}_s{i:03d}"
                ctphys.save_pgm(f"{stem}_pred.pgm", pred[i])
                ctphys.save_pgm(f"{stem}_input.pgm", x[i])
                ctphys.save_pgm(f"{stem}_ref.pgm", y[i])
    write_echo(out, cfg, "eval")
    for r in records:
        print(f"client {r.client_id}: PSNR {r.psnr_mean:.3f} dB  SSIM {r.ssim_mean:.4f}  "
              f"n={r.n_samples}")
    return out


UNSEEN_FIELDS = ("name", "matched_client", "distance", "psnr_mean", "ssim_mean", "n_samples")


def cmd_infer_unseen(cfg: dict, checkpoint=None, codebook=None) -> Path:
    train_dir = Path(cfg["out"]) / "train"
    params, mcfg, extra, flags, stats = _load_trained(checkpoint or train_dir / "checkpoint.pfm")
    book = pvqs.read_codebook(codebook or train_dir / "codebook.txt", flags.generic_decoder)
    trained = _trained_state(params, mcfg, extra, flags, stats)
    ublock = cfg.get("unseen", {})
    if not ublock.get("clients"):
        raise ConfigError("config has no [unseen] clients")
    provider = make_provider(provider_config(cfg))
    size = cfg["dataset"].get("image_size", 64)
    noise_seed = cfg["dataset"].get("noise_seed", cfg.get("seed", 0))
    out = Path(cfg["out"]) / "unseen"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for k, u in enumerate(ublock["clients"]):
        p = client_protocol(u)
        ds = ph.build_client_dataset(1000 + k, p, ublock.get("test_seeds", [999]),
                                     ublock.get("test_slices", 4), size, noise_seed, split="test")
        ps, ss, match = [], [], None
        for s in ds.samples:
            f_t = provider.feature(s.low_dose, s.metadata).values
            pred, cid, dist = pvqs.infer_unseen(trained, book, s.x, p, f_t, flags)
            match = (cid, dist)
            ps.append(psnr(pred[0], s.y))
            ss.append(ssim(pred[0], s.y))
        name = u.get("name", f"unseen{k + 1}")
        rows.append((name, match[0], match[1], float(np.mean(ps)), float(np.mean(ss)), len(ps)))
        print(f"{name}: routed to client {match[0]} (distance {match[1]:.6g}), "
              f"PSNR {np.mean(ps):.3f} dB, SSIM {np.mean(ss):.4f}")
    with open(out / "routing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(UNSEEN_FIELDS)
        for r in rows:
            w.writerow([r[0], r[1], repr(r[2]), repr(r[3]), repr(r[4]), r[5]])
    write_echo(out, cfg, "infer-unseen")
    return out


def cmd_gradcheck(tol: float = 1e-4) -> bool:
    results = gradcheck.run_suite(tol=tol)
    print(gradcheck.format_report(results))
    ok = gradcheck.all_passed(results)
    print("all gradient checks passed" if ok else "GRADIENT CHECK FAILED")
    return ok


def cmd_dump_codebook(cfg: dict, checkpoint=None, out=None) -> str:
    params, mcfg, extra, flags, stats = _load_trained(
        checkpoint or Path(cfg["out"]) / "train" / "checkpoint.pfm")
    trained = _trained_state(params, mcfg, extra, flags, stats)
    protocols = [Protocol(*extra["protocols"][str(cid)]) for cid in trained.client_ids]
    text = pvqs.dump_codebook(pvqs.build_codebook(trained, protocols, stats))
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)
    return text


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML experiment config")
    common.add_argument("--preset", choices=sorted(PRESETS), help="built-in config preset")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--threads", type=int, help="worker cap (1 = bit-reproducible)")
    common.add_argument("--out", metavar="DIR", help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="physfed", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate client datasets")
    t = sub.add_parser("train", parents=[common], help="federated training")
    t.add_argument("--generic", action="store_true", help="train the generic shared-model baseline")
    t.add_argument("--ablation", choices=list(ABLATIONS), help="ablation row to train")
    t.add_argument("--rounds", type=int, help="override the number of rounds")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", metavar="PATH")
    e.add_argument("--clients", help="comma-separated client ids (default: all)")
    e.add_argument("--dump-images", action="store_true", help="write PGM images per sample")
    u = sub.add_parser("infer-unseen", parents=[common], help="route unseen protocols")
    u.add_argument("--checkpoint", metavar="PATH")
    u.add_argument("--codebook", metavar="PATH")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    g.add_argument("--tol", type=float, default=1e-4)
    d = sub.add_parser("dump-codebook", parents=[common], help="print the protocol codebook")
    d.add_argument("--checkpoint", metavar="PATH")
    return parser


def _overrides(args) -> dict:
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    fed = {}
    if args.threads is not None:
        fed["threads"] = args.threads
    if getattr(args, "generic", False):
        fed["ablation"] = "generic"
    if getattr(args, "ablation", None):
        fed["ablation"] = args.ablation
    if getattr(args, "rounds", None) is not None:
        fed["rounds"] = args.rounds
    if fed:
        over["federation"] = fed
    return over


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "gradcheck":
            return EXIT_OK if cmd_gradcheck(args.tol) else EXIT_RUNTIME
        cfg = load_config(args.config, args.preset, _overrides(args))
        if args.command == "simulate":
            cmd_simulate(cfg)
        elif args.command == "train":
            cmd_train(cfg, args.threads)
        elif args.command == "eval":
            ids = [int(i) for i in args.clients.split(",")] if args.clients else None
            cmd_eval(cfg, args.checkpoint, ids, args.dump_images)
        elif args.command == "infer-unseen":
            cmd_infer_unseen(cfg, args.checkpoint, args.codebook)
        elif args.command == "dump-codebook":
            cmd_dump_codebook(cfg, args.checkpoint, None)
    except (ConfigError, ProtocolError, ph.SeedCollision, M.UnknownClient,
            M.VersionMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
