"""Scanning protocols, min-max normalization and the built-in protocol tables.

A protocol is the 7-parameter scanner configuration
``(nv, ndb, pl, dbl, dsr, ddr, pn)``: number of views, number of detector
bins, pixel length, detector bin length, source-to-rotation-center distance,
detector-to-rotation-center distance and incident photon count. Lengths are
in millimetres.
"""

from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FIELDS = ("nv", "ndb", "pl", "dbl", "dsr", "ddr", "pn")


class ProtocolError(ValueError):
    pass


class EmptyList(ProtocolError):
    pass


class DegenerateColumn(ProtocolError):
    def __init__(self, column: int):
        self.column = column
        super().__init__(f"column {column} ({FIELDS[column]}) has max == min")


@dataclass(frozen=True)
class Protocol:
    nv: int
    ndb: int
    pl: float
    dbl: float
    dsr: float
    ddr: float
    pn: float

    def __post_init__(self):
        if int(self.nv) != self.nv or self.nv < 1:
            raise ProtocolError(f"nv must be a positive integer, got {self.nv}")
        if int(self.ndb) != self.ndb or self.ndb < 1:
            raise ProtocolError(f"ndb must be a positive integer, got {self.ndb}")
        object.__setattr__(self, "nv", int(self.nv))
        object.__setattr__(self, "ndb", int(self.ndb))
        for name in ("pl", "dbl", "dsr", "ddr", "pn"):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value <= 0:
                raise ProtocolError(f"{name} must be > 0, got {value}")
            object.__setattr__(self, name, value)

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    def scaled(self, factors: Sequence[float]) -> "Protocol":
        """Multiply each entry by a factor; counts are rounded to integers."""
        vals = self.as_array() * np.asarray(factors, dtype=np.float64)
        return Protocol(int(round(vals[0])), int(round(vals[1])), *vals[2:])


@dataclass(frozen=True)
class MinMaxStats:
    mins: tuple
    maxs: tuple

    def __post_init__(self):
        mins = tuple(float(v) for v in self.mins)
        maxs = tuple(float(v) for v in self.maxs)
        if len(mins) != 7 or len(maxs) != 7:
            raise ProtocolError("min/max statistics need 7 entries each")
        for j, (lo, hi) in enumerate(zip(mins, maxs)):
            if not hi > lo:
                raise DegenerateColumn(j)
        object.__setattr__(self, "mins", mins)
        object.__setattr__(self, "maxs", maxs)


@dataclass(frozen=True)
class NormalizedProtocol:
    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) != 7 or not all(np.isfinite(vals)):
            raise ProtocolError("normalized protocol must be 7 finite values")
        object.__setattr__(self, "values", vals)

    def as_array(self) -> np.ndarray:
        return np.array(self.values, dtype=np.float64)


def protocol_stats(protocols: Sequence[Protocol]) -> MinMaxStats:
    if len(protocols) == 0:
        raise EmptyList("need at least one protocol")
    table = np.stack([p.as_array() for p in protocols])
    return MinMaxStats(tuple(table.min(axis=0)), tuple(table.max(axis=0)))


def normalize_protocol(g: Protocol, stats: MinMaxStats) -> NormalizedProtocol:
    # no clipping: protocols outside the reference set keep their ordering
    lo = np.array(stats.mins)
    hi = np.array(stats.maxs)
    return NormalizedProtocol(tuple((g.as_array() - lo) / (hi - lo)))


def denormalize_protocol(gn: NormalizedProtocol, stats: MinMaxStats) -> np.ndarray:
    lo = np.array(stats.mins)
    hi = np.array(stats.maxs)
    return lo + gn.as_array() * (hi - lo)


_KNOWN = (
    (1024, 512, 0.66, 0.72, 250, 250, 1e5),
    (128, 768, 0.78, 0.58, 350, 300, 1e6),
    (512, 768, 1.00, 1.20, 500, 400, 5e4),
    (384, 600, 1.40, 1.50, 350, 300, 1.25e5),
    (712, 720, 0.60, 0.82, 300, 350, 1.3e5),
    (200, 730, 0.88, 0.78, 350, 280, 0.9e6),
    (560, 755, 1.20, 1.30, 300, 400, 4.5e4),
    (368, 500, 1.00, 1.30, 350, 350, 1.45e5),
)

_UNSEEN = (
    (768, 550, 0.57, 0.83, 200, 300, 1.3e5),
    (428, 590, 1.10, 1.10, 350, 300, 1.4e5),
    (100, 768, 0.50, 0.60, 200, 250, 1.1e6),
    (896, 730, 0.70, 0.93, 250, 400, 9e4),
)


def builtin_known_protocols() -> list[Protocol]:
    """The eight training-client protocols, client #1 first."""
    return [Protocol(*row) for row in _KNOWN]


def builtin_unseen_protocols() -> list[Protocol]:
    """The four held-out protocols used to exercise codebook quantization."""
    return [Protocol(*row) for row in _UNSEEN]


def protocols_to_csv(protocols: Iterable[Protocol]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FIELDS)
    for p in protocols:
        writer.writerow([p.nv, p.ndb] + [repr(v) for v in astuple(p)[2:]])
    return buf.getvalue()


def protocols_from_csv(text: str) -> list[Protocol]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(f.strip() for f in (reader.fieldnames or ())) != FIELDS:
        raise ProtocolError(f"expected header {','.join(FIELDS)}")
    out = []
    for row in reader:
        row = {k.strip(): v for k, v in row.items()}
        out.append(Protocol(int(float(row["nv"])), int(float(row["ndb"])),
                            *(float(row[k]) for k in FIELDS[2:])))
    return out


def save_protocols(path, protocols: Iterable[Protocol]) -> None:
    Path(path).write_text(protocols_to_csv(protocols))


def load_protocols(path) -> list[Protocol]:
    return protocols_from_csv(Path(path).read_text())


assert tuple(f.name for f in fields(Protocol)) == FIELDS
