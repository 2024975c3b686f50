"""Protocol codebook and nearest-code routing for unseen scanning protocols.

Each known client contributes its protocol code, its scanning modulation
(alpha, beta) and its decoder. An unseen protocol is encoded by the code head
only; the nearest stored code by cosine distance decides whose modulation and
decoder are used.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from .model import Ablation
from .protocol import MinMaxStats, Protocol, normalize_protocol

NORM_GUARD = 1e-12


class CodebookError(ValueError):
    pass


class ZeroNormCode(CodebookError):
    pass


class ZeroNormQuery(CodebookError):
    pass


@dataclass(frozen=True)
class CodebookEntry:
    client_id: int
    code: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    decoder_key: object


@dataclass(frozen=True)
class ProtocolCodebook:
    entries: tuple
    stats: MinMaxStats

    def __post_init__(self):
        if not self.entries:
            raise CodebookError("a codebook needs at least one entry")

    @property
    def client_ids(self) -> list:
        return [e.client_id for e in self.entries]

    def entry(self, client_id) -> CodebookEntry:
        for e in self.entries:
            if e.client_id == client_id:
                return e
        raise KeyError(client_id)

    def codes(self) -> np.ndarray:
        return np.stack([e.code for e in self.entries])

    def cosine_matrix(self) -> np.ndarray:
        u = _unit(self.codes())
        return u @ u.T


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), NORM_GUARD)


def build_codebook(trained, known_protocols: Sequence[Protocol],
                   stats: MinMaxStats) -> ProtocolCodebook:
    """Evaluate the final scanning hypernetwork on each known protocol."""
    if len(known_protocols) != len(trained.client_ids):
        raise CodebookError("one protocol per trained client is required")
    generic = trained.config.ablation.generic_decoder
    entries = []
    for cid, p in zip(trained.client_ids, known_protocols):
        g = normalize_protocol(p, stats).as_array()
        alpha, beta, code = M.hypernet_outputs(trained.shared, g)
        if not np.linalg.norm(code) > NORM_GUARD:
            raise ZeroNormCode(f"client {cid} has a zero protocol code")
        entries.append(CodebookEntry(cid, code, alpha, beta, M.GENERIC if generic else cid))
    return ProtocolCodebook(tuple(entries), stats)


def quantize(book: ProtocolCodebook, c_un) -> tuple:
    """``(client_id, distance)`` of the stored code nearest in cosine distance.

    Ties go to the lowest client id. Distance is ``1 - cos`` in [0, 2].
    """
    c = np.asarray(c_un, dtype=np.float64)
    if not np.linalg.norm(c) > NORM_GUARD:
        raise ZeroNormQuery("query code has zero norm")
    u = _unit(c)
    best = None
    for e in sorted(book.entries, key=lambda e: e.client_id):
        diff = _unit(e.code) - u
        # |u - v|^2 / 2 == 1 - cos for unit vectors, and is exactly 0 on a self match
        d = float(diff @ diff) / 2.0
        if best is None or d < best[1]:
            best = (e.client_id, d)
    return best[0], min(max(best[1], 0.0), 2.0)


def infer_unseen(trained, book: ProtocolCodebook, x, g_un: Protocol, f_t,
                 flags: Ablation | None = None):
    """Reconstruct ``x`` for an unseen protocol using the nearest known client.

    Returns ``(prediction, client_id, distance)``. Only the code head sees
    ``g_un``; modulation and decoder come from the matched codebook entry.
    """
    flags = trained.config.ablation if flags is None else flags
    g = normalize_protocol(g_un, book.stats).as_array()
    cid, dist = quantize(book, M.code_only(trained.shared, g))
    e = book.entry(cid)
    alpha, beta = e.alpha, e.beta
    if flags.disable_scanning:
        alpha, beta = np.ones_like(alpha), np.zeros_like(beta)
    pred = M.predict_with_modulation(trained.params, trained.model_cfg, x, f_t,
                                     alpha, beta, e.decoder_key, flags)
    return pred, cid, dist


# --------------------------------------------------------------------------
# text dump
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    return " ".join(f"{float(a):.17g}" for a in np.ravel(v))


def dump_codebook(book: ProtocolCodebook) -> str:
    lines = ["# protocol codebook",
             f"# stats.mins {_fmt(book.stats.mins)}",
             f"# stats.maxs {_fmt(book.stats.maxs)}"]
    for e in book.entries:
        lines.append(f"code {e.client_id} {_fmt(e.code)}")
        lines.append(f"alpha {e.client_id} {_fmt(e.alpha)}")
        lines.append(f"beta {e.client_id} {_fmt(e.beta)}")
    cos = book.cosine_matrix()
    lines.append("# pairwise cosine similarity, rows/cols: " + " ".join(map(str, book.client_ids)))
    for cid, row in zip(book.client_ids, cos):
        lines.append(f"# {cid} " + " ".join(f"{c:+.6f}" for c in row))
    return "\n".join(lines) + "\n"


def load_codebook(text: str, generic: bool = False) -> ProtocolCodebook:
    rows: dict = {}
    mins = maxs = None
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[:2] == ["#", "stats.mins"]:
            mins = tuple(float(a) for a in parts[2:])
        elif parts[:2] == ["#", "stats.maxs"]:
            maxs = tuple(float(a) for a in parts[2:])
        elif parts[0] in ("code", "alpha", "beta"):
            cid = int(parts[1])
            rows.setdefault(cid, {})[parts[0]] = np.array([float(a) for a in parts[2:]])
    if mins is None or maxs is None:
        raise CodebookError("codebook dump lacks normalization statistics")
    entries = tuple(CodebookEntry(cid, r["code"], r["alpha"], r["beta"],
                                  M.GENERIC if generic else cid) for cid, r in rows.items())
    return ProtocolCodebook(entries, MinMaxStats(mins, maxs))


def save_codebook(path, book: ProtocolCodebook) -> None:
    Path(path).write_text(dump_codebook(book))


def read_codebook(path, generic: bool = False) -> ProtocolCodebook:
    return load_codebook(Path(path).read_text(), generic)
