"""Dual-level personalized reconstruction network.

A shared convolutional encoder produces an imaging feature map. Two
hypernetworks personalize it: the scanning hypernetwork turns a normalized
protocol into per-channel scale/shift vectors plus a protocol code, and the
anatomy hypernetwork turns a report feature into a spatial modulation map.
A client-specific decoder maps the modulated features back to an image with
a global residual connection.

Every network function takes a dict of parameter tensors (see
:func:`param_leaves`) and tensors recorded on the same tape.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

CHECKPOINT_MAGIC = b"PFM1"
GENERIC = "generic"

# callables invoked as hook(g_tensor) whenever the alpha/beta heads run
HEAD_HOOKS: list = []


class ModelError(ValueError):
    pass


class UnknownClient(KeyError):
    pass


class VersionMismatch(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    report_dim: int = 64
    hidden_dim: int = 32
    code_dim: int = 16
    n_heads: int = 4
    token_count: int = 8
    image_size: int = 64

    def __post_init__(self):
        if self.report_dim % 4:
            raise ModelError("report_dim must be divisible by 4")
        if self.hidden_dim % self.token_count:
            raise ModelError("hidden_dim must be divisible by token_count")
        if self.token_width % self.n_heads:
            raise ModelError("token width must be divisible by n_heads")
        if min(self.channels, self.code_dim, self.image_size) < 1:
            raise ModelError("channels, code_dim and image_size must be positive")

    @property
    def token_width(self) -> int:
        return self.hidden_dim // self.token_count

    @property
    def head_dim(self) -> int:
        return self.token_width // self.n_heads


@dataclass(frozen=True)
class Ablation:
    disable_scanning: bool = False
    disable_anatomy: bool = False
    generic_decoder: bool = False
    disable_orth: bool = False


@dataclass
class ModelParameters:
    """Shared partition (encoder, hypernetworks) and per-client decoders."""

    shared: dict = field(default_factory=dict)
    decoders: dict = field(default_factory=dict)

    def decoder(self, client_id):
        try:
            return self.decoders[client_id]
        except KeyError:
            raise UnknownClient(client_id) from None

    def copy(self) -> "ModelParameters":
        return ModelParameters({k: v.copy() for k, v in self.shared.items()},
                               {c: {k: v.copy() for k, v in d.items()}
                                for c, d in self.decoders.items()})


SHARED_PREFIXES = ("encoder.", "hs.", "ha.")


def _shapes(cfg: ModelConfig) -> dict:
    C, w = cfg.channels, cfg.token_width
    return {
        "encoder.conv1.w": (16, 1, 3, 3), "encoder.conv1.b": (16,),
        "encoder.conv2.w": (32, 16, 3, 3), "encoder.conv2.b": (32,),
        "encoder.conv3.w": (C, 32, 3, 3), "encoder.conv3.b": (C,),
        "hs.fc1.w": (7, 32), "hs.fc1.b": (32,),
        "hs.fc2.w": (32, 32), "hs.fc2.b": (32,),
        "hs.alpha.w": (32, C), "hs.alpha.b": (C,),
        "hs.beta.w": (32, C), "hs.beta.b": (C,),
        "hs.code.w": (32, cfg.code_dim), "hs.code.b": (cfg.code_dim,),
        "ha.proj.w": (cfg.report_dim // 4, cfg.hidden_dim), "ha.proj.b": (cfg.hidden_dim,),
        "ha.q.w": (w, w), "ha.q.b": (w,),
        "ha.k.w": (w, w), "ha.k.b": (w,),
        "ha.v.w": (w, w), "ha.v.b": (w,),
        "ha.o.w": (w, w), "ha.o.b": (w,),
        "ha.out.w": (cfg.hidden_dim, cfg.image_size ** 2), "ha.out.b": (cfg.image_size ** 2,),
    }


def _decoder_shapes(cfg: ModelConfig) -> dict:
    return {"conv1.w": (32, cfg.channels, 3, 3), "conv1.b": (32,),
            "conv2.w": (16, 32, 3, 3), "conv2.b": (16,),
            "conv3.w": (1, 16, 3, 3), "conv3.b": (1,)}


# output layers that start at zero so the network begins as the identity map
ZERO_INIT = ("hs.alpha.w", "hs.beta.w", "ha.out.w", "conv3.w")


def _he_uniform(rng, shape):
    fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_block(rng, shapes, zero_final):
    out = {}
    for name, shape in shapes.items():
        if name.endswith(".b") or (zero_final and name in ZERO_INIT):
            out[name] = np.zeros(shape)
        else:
            out[name] = _he_uniform(rng, shape)
    return out


def init_params(cfg: ModelConfig, seed: int, client_ids=(), zero_final: bool = True,
                generic: bool = False) -> ModelParameters:
    """He-uniform initialization; every decoder starts as the same copy.

    With ``zero_final`` the alpha/beta heads, the anatomy output layer and the
    last decoder convolution are zero, so the initial network is the identity.
    """
    rng = np.random.default_rng(seed)
    shared = _init_block(rng, _shapes(cfg), zero_final)
    template = _init_block(rng, _decoder_shapes(cfg), zero_final)
    keys = [GENERIC] if generic else list(client_ids)
    decoders = {cid: {k: v.copy() for k, v in template.items()} for cid in keys}
    return ModelParameters(shared, decoders)


def param_leaves(tape: Tape, arrays: dict) -> dict:
    return {k: tape.leaf(v, name=k) for k, v in arrays.items()}


# --------------------------------------------------------------------------
# network pieces
# --------------------------------------------------------------------------

def encode(p: dict, x: Tensor) -> Tensor:
    """Imaging feature map; spatial size is preserved."""
    h = ad.relu(ad.conv2d(x, p["encoder.conv1.w"], p["encoder.conv1.b"]))
    h = ad.relu(ad.conv2d(h, p["encoder.conv2.w"], p["encoder.conv2.b"]))
    return ad.relu(ad.conv2d(h, p["encoder.conv3.w"], p["encoder.conv3.b"]))


def _trunk(p: dict, g: Tensor) -> Tensor:
    h = ad.relu(ad.linear(g, p["hs.fc1.w"], p["hs.fc1.b"]))
    return ad.relu(ad.linear(h, p["hs.fc2.w"], p["hs.fc2.b"]))


def _rows(g: Tensor) -> Tensor:
    return ad.reshape(g, (1, g.shape[0])) if len(g.shape) == 1 else g


def _unrows(t: Tensor, like: Tensor) -> Tensor:
    return ad.reshape(t, (t.shape[-1],)) if len(like.shape) == 1 else t


def scanning_code(p: dict, g: Tensor) -> Tensor:
    """Protocol code only; the alpha/beta heads are not evaluated."""
    return _unrows(ad.linear(_trunk(p, _rows(g)), p["hs.code.w"], p["hs.code.b"]), g)


def scanning_hypernet(p: dict, g: Tensor):
    """(alpha, beta, code) for normalized protocols ``g`` of shape (..., 7)."""
    for hook in HEAD_HOOKS:
        hook(g)
    t = _trunk(p, _rows(g))
    alpha = ad.add_scalar(ad.linear(t, p["hs.alpha.w"], p["hs.alpha.b"]), 1.0)
    beta = ad.linear(t, p["hs.beta.w"], p["hs.beta.b"])
    code = ad.linear(t, p["hs.code.w"], p["hs.code.b"])
    return _unrows(alpha, g), _unrows(beta, g), _unrows(code, g)


def attention_core(p: dict, cfg: ModelConfig, tokens: Tensor) -> Tensor:
    """Multi-head self-attention over tokens of shape (N, T, width)."""
    n, t, w = tokens.shape
    nh, hd = cfg.n_heads, cfg.head_dim

    def heads(x):
        return ad.transpose(ad.reshape(x, (n, t, nh, hd)), (0, 2, 1, 3))

    q = heads(ad.linear(tokens, p["ha.q.w"], p["ha.q.b"]))
    k = heads(ad.linear(tokens, p["ha.k.w"], p["ha.k.b"]))
    v = heads(ad.linear(tokens, p["ha.v.w"], p["ha.v.b"]))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    att = ad.matmul(ad.softmax(scores), v)
    merged = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (n, t, w))
    return ad.linear(merged, p["ha.o.w"], p["ha.o.b"])


def anatomy_hypernet(p: dict, cfg: ModelConfig, f_t: Tensor) -> Tensor:
    """Spatial modulation map (N, 1, H, W) from report features (N, d)."""
    if f_t.shape[-1] != cfg.report_dim:
        raise ModelError(f"report feature has dim {f_t.shape[-1]}, expected {cfg.report_dim}")
    n = f_t.shape[0]
    f_tl = ad.linear(ad.avgpool1d(f_t, 4), p["ha.proj.w"], p["ha.proj.b"])
    tokens = ad.reshape(f_tl, (n, cfg.token_count, cfg.token_width))
    attended = ad.reshape(attention_core(p, cfg, tokens), (n, cfg.hidden_dim))
    flat = ad.add_scalar(ad.linear(attended, p["ha.out.w"], p["ha.out.b"]), 1.0)
    return ad.reshape(flat, (n, 1, cfg.image_size, cfg.image_size))


def modulate(f_x: Tensor, f_an: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
    """Spatial map broadcast over channels, then per-channel affine."""
    return ad.channel_affine(ad.mul(f_x, f_an), alpha, beta)


def decode(pd: dict, f_per: Tensor, x: Tensor) -> Tensor:
    h = ad.relu(ad.conv2d(f_per, pd["conv1.w"], pd["conv1.b"]))
    h = ad.relu(ad.conv2d(h, pd["conv2.w"], pd["conv2.b"]))
    return ad.add(ad.conv2d(h, pd["conv3.w"], pd["conv3.b"]), x)


def forward(p: dict, pd: dict, cfg: ModelConfig, x: Tensor, g: Tensor | None,
            f_t: Tensor | None, flags: Ablation = Ablation()) -> Tensor:
    """Prediction for a batch ``x`` (N, 1, H, W) of one client.

    ``g`` is that client's normalized protocol with shape (7,) and ``f_t`` the
    report features (N, d). ``pd`` is the decoder parameter dict to use.
    """
    tape = x.tape
    f_x = encode(p, x)
    C = cfg.channels
    if flags.disable_scanning:
        alpha, beta = tape.leaf(np.ones(C)), tape.leaf(np.zeros(C))
    else:
        alpha, beta, _ = scanning_hypernet(p, g)
    if flags.disable_anatomy:
        f_an = tape.leaf(np.ones((1, 1, cfg.image_size, cfg.image_size)))
    else:
        f_an = anatomy_hypernet(p, cfg, f_t)
    return decode(pd, modulate(f_x, f_an, alpha, beta), x)


def _batch(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[:, None]
    return x


def predict(params: ModelParameters, cfg: ModelConfig, x, g, f_t, client_id,
            flags: Ablation = Ablation()) -> np.ndarray:
    """Numpy convenience wrapper around :func:`forward`; returns (N, H, W)."""
    xb = _batch(x)
    key = GENERIC if flags.generic_decoder else client_id
    tape = Tape()
    p = param_leaves(tape, params.shared)
    pd = param_leaves(tape, params.decoder(key))
    gt = None if g is None else tape.leaf(np.asarray(g, dtype=np.float64))
    ft = None if f_t is None else tape.leaf(np.atleast_2d(np.asarray(f_t, dtype=np.float64)))
    out = forward(p, pd, cfg, tape.leaf(xb), gt, ft, flags)
    return out.data[:, 0]


def predict_with_modulation(params: ModelParameters, cfg: ModelConfig, x, f_t,
                            alpha: np.ndarray, beta: np.ndarray, decoder_key,
                            flags: Ablation = Ablation()) -> np.ndarray:
    """Prediction with externally supplied scanning modulation (alpha, beta)."""
    xb = _batch(x)
    tape = Tape()
    p = param_leaves(tape, params.shared)
    pd = param_leaves(tape, params.decoder(decoder_key))
    xt = tape.leaf(xb)
    f_x = encode(p, xt)
    if flags.disable_anatomy:
        f_an = tape.leaf(np.ones((1, 1, cfg.image_size, cfg.image_size)))
    else:
        f_an = anatomy_hypernet(p, cfg, tape.leaf(np.atleast_2d(f_t)))
    out = decode(pd, modulate(f_x, f_an, tape.leaf(alpha), tape.leaf(beta)), xt)
    return out.data[:, 0]


def hypernet_outputs(shared: dict, g) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(alpha, beta, code) as arrays for one normalized protocol."""
    tape = Tape()
    p = param_leaves(tape, {k: v for k, v in shared.items() if k.startswith("hs.")})
    a, b, c = scanning_hypernet(p, tape.leaf(np.asarray(g, dtype=np.float64)))
    return a.data, b.data, c.data


def code_only(shared: dict, g) -> np.ndarray:
    tape = Tape()
    p = param_leaves(tape, {k: v for k, v in shared.items() if k.startswith("hs.")})
    return scanning_code(p, tape.leaf(np.asarray(g, dtype=np.float64))).data


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def _blob_names(params: ModelParameters):
    for name in sorted(params.shared):
        yield f"shared/{name}", params.shared[name]
    for cid in sorted(params.decoders, key=str):
        for name in sorted(params.decoders[cid]):
            yield f"decoder/{cid}/{name}", params.decoders[cid][name]


def save_checkpoint(path, params: ModelParameters, cfg: ModelConfig, extra: dict | None = None):
    """Binary checkpoint: magic, JSON config block, named float64 blobs."""
    header = json.dumps({"model": asdict(cfg), "extra": extra or {}}, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(header)), header]
    blobs = list(_blob_names(params))
    parts.append(struct.pack("<I", len(blobs)))
    for name, arr in blobs:
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Returns ``(params, cfg, extra)``."""
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise VersionMismatch(f"bad checkpoint magic {blob[:4]!r}")
    pos = 4
    (hlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    header = json.loads(blob[pos:pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    params = ModelParameters()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        kind, _, rest = name.partition("/")
        if kind == "shared":
            params.shared[rest] = arr
        else:
            cid, _, pname = rest.partition("/")
            key = int(cid) if cid.lstrip("-").isdigit() else cid
            params.decoders.setdefault(key, {})[pname] = arr
    return params, ModelConfig(**header["model"]), header["extra"]
