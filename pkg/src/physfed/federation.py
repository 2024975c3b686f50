"""Federated training: server rounds, local Adam training, weighted aggregation.

The shared partition (encoder and both hypernetworks) is averaged across
clients after every round with weights proportional to their training set
sizes. Decoders stay on their clients. In generic mode there is a single
decoder and it is averaged along with everything else.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import Tape
from .model import GENERIC, Ablation, ModelConfig, ModelParameters
from .objective import LossConfig, MetricRecord, ShapeMismatch, psnr, ssim, total_loss
from .phantom import ClientDataset
from .protocol import MinMaxStats, normalize_protocol, protocol_stats


class FederationError(RuntimeError):
    pass


class EmptySet(FederationError, ValueError):
    pass


class NonFiniteLoss(FederationError):
    pass


# ablation rows, from the generic baseline to the full model
ABLATION_ROWS = (
    ("generic", Ablation(disable_scanning=True, disable_anatomy=True,
                         generic_decoder=True, disable_orth=True)),
    ("scanning", Ablation(disable_anatomy=True, disable_orth=True)),
    ("anatomy", Ablation(disable_scanning=True, disable_orth=True)),
    ("dual", Ablation(disable_orth=True)),
    ("full", Ablation()),
)


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 30
    local_epochs: int = 1
    batch_size: int = 4
    adam: AdamConfig = AdamConfig()
    loss: LossConfig = LossConfig()
    ablation: Ablation = Ablation()
    seed: int = 0
    threads: int = 1
    reset_moments: bool = False
    K: int | None = None

    def __post_init__(self):
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("rounds, local_epochs and batch_size must be >= 1")
        if self.K is not None and self.K < 1:
            raise ValueError("K must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


class Adam:
    """Adam with bias correction; moments are keyed by parameter name."""

    def __init__(self, cfg: AdamConfig):
        self.cfg = cfg
        self.reset()

    def reset(self) -> None:
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> dict:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        out = {}
        for k, w in params.items():
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = np.zeros_like(w)
                self.v[k] = np.zeros_like(w)
            m = c.beta1 * m + (1 - c.beta1) * g
            v = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = w - c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
        return out


@dataclass
class ClientState:
    """One client: its data, normalized protocol, features and optimizer."""

    client_id: int
    dataset: ClientDataset
    g_hat: np.ndarray
    features: dict            # split -> (N, d) report features
    decoder: dict = field(default_factory=dict)
    optimizer: Adam | None = None

    def arrays(self, split: str):
        samples = self.dataset.split(split)
        if not samples:
            return None
        x = np.stack([s.x for s in samples])
        y = np.stack([s.y for s in samples])
        return x, y, self.features[split]

    @property
    def n_train(self) -> int:
        return len(self.dataset.train)


def prepare_clients(datasets: Sequence[ClientDataset], provider,
                    stats: MinMaxStats | None = None) -> list[ClientState]:
    """Normalize protocols and precompute every sample's report feature."""
    if stats is None:
        stats = protocol_stats([d.protocol for d in datasets])
    clients = []
    for ds in datasets:
        feats = {}
        for split in ("train", "test"):
            rows = [provider.feature(s.low_dose, s.metadata).values for s in ds.split(split)]
            feats[split] = np.array(rows) if rows else np.zeros((0, 0))
        clients.append(ClientState(ds.client_id, ds,
                                   normalize_protocol(ds.protocol, stats).as_array(), feats))
    return clients


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------

def aggregate(param_sets: Sequence[dict], weights: Sequence[float]) -> dict:
    """Element-wise weighted mean of parameter dicts, summed in list order."""
    if not param_sets:
        raise EmptySet("nothing to aggregate")
    if len(weights) != len(param_sets):
        raise ValueError("one weight per parameter set is required")
    if any(not w > 0 for w in weights):
        raise ValueError("aggregation weights must be positive")
    keys = param_sets[0].keys()
    for ps in param_sets[1:]:
        if ps.keys() != keys:
            raise ShapeMismatch("parameter sets have different names")
        for k in keys:
            if ps[k].shape != param_sets[0][k].shape:
                raise ShapeMismatch(f"{k}: {ps[k].shape} vs {param_sets[0][k].shape}")
    total = float(sum(weights))
    out = {}
    for k in keys:
        acc = np.zeros_like(param_sets[0][k], dtype=np.float64)
        for ps, w in zip(param_sets, weights):
            acc = acc + (w / total) * ps[k]
        out[k] = acc
    return out


# --------------------------------------------------------------------------
# local training
# --------------------------------------------------------------------------

@dataclass
class LocalResult:
    client_id: int
    shared: dict
    decoder: dict
    losses: list


def _shuffle(seed: int, client_id, rnd: int, epoch: int, n: int) -> np.ndarray:
    ss = np.random.SeedSequence([seed, int(client_id), rnd, epoch])
    return np.random.default_rng(ss).permutation(n)


def train_step(shared: dict, decoder: dict, model_cfg: ModelConfig, flags: Ablation,
               loss_cfg: LossConfig, x, y, f_t, g_hat, all_g, index):
    """Loss and gradients for one mini-batch."""
    tape = Tape()
    p = M.param_leaves(tape, shared)
    pd = M.param_leaves(tape, decoder)
    xt = tape.leaf(x[:, None])
    pred = M.forward(p, pd, model_cfg, xt, tape.leaf(g_hat), tape.leaf(f_t), flags)
    codes = None
    if not flags.disable_orth and loss_cfg.tau > 0:
        codes = M.scanning_code(p, tape.leaf(np.asarray(all_g)))
    loss = total_loss(pred, tape.leaf(y[:, None]), codes, index, loss_cfg)
    grads = tape.backward(loss)
    return (float(loss.data),
            {k: grads[t.node_id] for k, t in p.items()},
            {k: grads[t.node_id] for k, t in pd.items()})


def local_train(shared: dict, client: ClientState, cfg: FederationConfig,
                model_cfg: ModelConfig, all_g: np.ndarray, index: int, rnd: int = 0,
                decoder: dict | None = None) -> LocalResult:
    """E epochs of Adam on the client's training split.

    ``shared`` is not modified. ``decoder`` defaults to the client's own.
    """
    data = client.arrays("train")
    if data is None:
        raise FederationError(f"client {client.client_id} has no training data")
    x, y, f_t = data
    if client.optimizer is None:
        client.optimizer = Adam(cfg.adam)
    opt = client.optimizer
    sh = dict(shared)
    dec = dict(client.decoder if decoder is None else decoder)
    losses = []
    for epoch in range(cfg.local_epochs):
        order = _shuffle(cfg.seed, client.client_id, rnd, epoch, len(x))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                loss, gs, gd = train_step(sh, dec, model_cfg, cfg.ablation, cfg.loss,
                                          x[idx], y[idx], f_t[idx], client.g_hat, all_g, index)
            except ad.AutodiffError as exc:
                raise NonFiniteLoss(f"client {client.client_id}, round {rnd}, epoch {epoch}, "
                                    f"batch at {start}: {exc}") from exc
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"client {client.client_id}, round {rnd}: loss {loss}")
            losses.append(loss)
            merged = opt.step({**sh, **{"decoder." + k: v for k, v in dec.items()}},
                              {**gs, **{"decoder." + k: v for k, v in gd.items()}})
            sh = {k: merged[k] for k in sh}
            dec = {k: merged["decoder." + k] for k in dec}
    return LocalResult(client.client_id, sh, dec, losses)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def predict_client(params: ModelParameters, model_cfg: ModelConfig, client: ClientState,
                   split: str, flags: Ablation = Ablation()) -> np.ndarray:
    x, _, f_t = client.arrays(split)
    return M.predict(params, model_cfg, x, client.g_hat, f_t, client.client_id, flags)


def evaluate_client(params: ModelParameters, model_cfg: ModelConfig, client: ClientState,
                    split: str = "test", rnd: int = 0,
                    flags: Ablation = Ablation()) -> MetricRecord:
    """Mean PSNR/SSIM of the model's predictions on one split."""
    data = client.arrays(split)
    if data is None:
        return MetricRecord(client.client_id, rnd, split, float("nan"), float("nan"), 0)
    _, y, _ = data
    pred = predict_client(params, model_cfg, client, split, flags)
    return MetricRecord(client.client_id, rnd, split,
                        float(np.mean([psnr(p, r) for p, r in zip(pred, y)])),
                        float(np.mean([ssim(p, r) for p, r in zip(pred, y)])), len(y))


def input_metrics(client: ClientState, split: str = "test") -> MetricRecord:
    """Metrics of the raw low-dose inputs against the references."""
    x, y, _ = client.arrays(split)
    return MetricRecord(client.client_id, 0, split,
                        float(np.mean([psnr(a, b) for a, b in zip(x, y)])),
                        float(np.mean([ssim(a, b) for a, b in zip(x, y)])), len(y))


def max_abs_cosine(codes: np.ndarray) -> float:
    c = np.asarray(codes, dtype=np.float64)
    if len(c) < 2:
        return 0.0
    u = c / np.maximum(np.linalg.norm(c, axis=1, keepdims=True), 1e-12)
    cos = np.abs(u @ u.T)
    return float(cos[~np.eye(len(c), dtype=bool)].max())


# --------------------------------------------------------------------------
# server loop
# --------------------------------------------------------------------------

@dataclass
class TrainedState:
    shared: dict
    decoders: dict
    client_ids: list
    g_hats: dict
    codes: dict
    alphas: dict
    betas: dict
    history: list
    cos_history: list
    config: FederationConfig
    model_cfg: ModelConfig

    @property
    def params(self) -> ModelParameters:
        return ModelParameters(self.shared, self.decoders)


def _codes(shared: dict, g_hats: dict):
    codes, alphas, betas = {}, {}, {}
    for cid, g in g_hats.items():
        alphas[cid], betas[cid], codes[cid] = M.hypernet_outputs(shared, g)
    return codes, alphas, betas


def run_federation(clients: Sequence[ClientState], cfg: FederationConfig,
                   model_cfg: ModelConfig, init: ModelParameters | None = None,
                   on_round: Callable | None = None) -> TrainedState:
    """Run ``cfg.rounds`` rounds of broadcast, local training and aggregation.

    ``on_round(rnd, params, records)`` is called after every round.
    """
    if not clients:
        raise EmptySet("no clients")
    if cfg.K is not None and cfg.K != len(clients):
        raise ValueError(f"config expects K={cfg.K} clients, got {len(clients)}")
    flags = cfg.ablation
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ValueError("client ids must be unique")
    params = init.copy() if init is not None else M.init_params(
        model_cfg, cfg.seed, ids, generic=flags.generic_decoder)
    generic = flags.generic_decoder
    for c in clients:
        c.decoder = {k: v.copy() for k, v in params.decoder(GENERIC if generic else c.client_id).items()}
        c.optimizer = Adam(cfg.adam)
    all_g = np.stack([c.g_hat for c in clients])
    g_hats = {c.client_id: c.g_hat for c in clients}
    weights = [c.n_train for c in clients]
    shared = params.shared

    def current():
        decs = ({GENERIC: clients[0].decoder} if generic
                else {c.client_id: c.decoder for c in clients})
        return ModelParameters(shared, decs)

    history = [evaluate_client(current(), model_cfg, c, "test", 0, flags) for c in clients]
    cos_history = [max_abs_cosine(np.stack(list(_codes(shared, g_hats)[0].values())))]

    def work(k):
        c = clients[k]
        return local_train(shared, c, cfg, model_cfg, all_g, k, rnd)

    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        for rnd in range(1, cfg.rounds + 1):
            if cfg.reset_moments:
                for c in clients:
                    c.optimizer.reset()
            if pool is None:
                results = [work(k) for k in range(len(clients))]
            else:
                results = list(pool.map(work, range(len(clients))))
            shared = aggregate([r.shared for r in results], weights)
            if generic:
                merged = aggregate([r.decoder for r in results], weights)
                for c in clients:
                    c.decoder = {k: v.copy() for k, v in merged.items()}
            else:
                for c, r in zip(clients, results):
                    c.decoder = r.decoder
            records = [evaluate_client(current(), model_cfg, c, "test", rnd, flags)
                       for c in clients]
            history.extend(records)
            cos_history.append(max_abs_cosine(
                np.stack(list(_codes(shared, g_hats)[0].values()))))
            if on_round is not None:
                on_round(rnd, current(), records)
    finally:
        if pool is not None:
            pool.shutdown()

    codes, alphas, betas = _codes(shared, g_hats)
    final = current()
    return TrainedState(final.shared, final.decoders, ids, g_hats, codes, alphas, betas,
                        history, cos_history, cfg, model_cfg)


def with_ablation(cfg: FederationConfig, flags: Ablation) -> FederationConfig:
    return replace(cfg, ablation=flags)
