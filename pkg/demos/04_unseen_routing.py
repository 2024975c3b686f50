"""Routing scanners the federation never saw.

Needs a trained desk4 run. Produce one with

    physfed simulate --preset desk4
    physfed train --preset desk4

then run this script from the repository root (or pass the run directory).
"""

import sys
from pathlib import Path

import numpy as np

from physfed import cli, pvqs
from physfed import model as M
from physfed.protocol import builtin_unseen_protocols, normalize_protocol

train = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/desk4") / "train"
if not (train / "checkpoint.pfm").exists():
    sys.exit(f"no checkpoint in {train}; train the desk4 preset first")

params, mcfg, extra, flags, stats = cli._load_trained(train / "checkpoint.pfm")
book = pvqs.read_codebook(train / "codebook.txt")
print("stored clients:", book.client_ids)
print("pairwise cosine of the stored codes:")
print(np.round(book.cosine_matrix(), 3))

for k, p in enumerate(builtin_unseen_protocols(), start=1):
    code = M.code_only(params.shared, normalize_protocol(p, stats).as_array())
    cid, dist = pvqs.quantize(book, code)
    print(f"unseen {k}: {p.nv} views, photons {p.pn:.3g} -> client {cid} (distance {dist:.4f})")
