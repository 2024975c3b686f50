"""Shared fixtures: tiny 16x16 client datasets and the desk4 preset runs."""

import shutil

import pytest

from physfed import cli
from physfed import federation as F
from physfed import phantom as ph
from physfed.gradcheck import TOY
from physfed.protocol import builtin_known_protocols, protocol_stats
from physfed.reportfeat import ProviderConfig, StubProvider

KNOWN = builtin_known_protocols()
TINY_IDS = (1, 3, 5)


@pytest.fixture(scope="session")
def tiny_datasets():
    out = {}
    for cid in TINY_IDS:
        p = KNOWN[cid - 1]
        ds = ph.build_client_dataset(cid, p, [10 * cid], 3, 16, noise_seed=1)
        ph.build_client_dataset(cid, p, [999], 2, 16, noise_seed=1, split="test", dataset=ds)
        out[cid] = ds
    return out


@pytest.fixture
def make_clients(tiny_datasets):
    """Fresh mutable client states for the given ids."""
    provider = StubProvider(ProviderConfig(d=TOY.report_dim))
    stats = protocol_stats([tiny_datasets[c].protocol for c in TINY_IDS])

    def build(ids=TINY_IDS):
        return F.prepare_clients([tiny_datasets[c] for c in ids], provider, stats)

    return build


@pytest.fixture(scope="session")
def desk4_runs(tmp_path_factory):
    """Simulate desk4 once, then train the full and generic models and route unseen data."""
    root = tmp_path_factory.mktemp("desk4")
    full = cli.load_config(preset="desk4", overrides={"out": str(root / "full")})
    generic = cli.load_config(preset="desk4", overrides={
        "out": str(root / "generic"), "federation": {"ablation": "generic"}})
    cli.cmd_simulate(full)
    shutil.copytree(root / "full" / "data", root / "generic" / "data")
    cli.cmd_train(full, threads=1)
    cli.cmd_infer_unseen(full)
    cli.cmd_train(generic, threads=1)
    return {"full": full, "generic": generic, "root": root}


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, title, seconds, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {title} ({seconds:.1f} s) {detail}")
