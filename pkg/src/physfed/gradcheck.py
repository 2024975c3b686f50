"""Finite-difference checks of every operator and the composed network paths."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import GradCheckReport, finite_diff_check

# small model used for the composed-path checks on 16x16 images
TOY = M.ModelConfig(channels=8, report_dim=16, hidden_dim=16, code_dim=4,
                    n_heads=2, token_count=4, image_size=16)


def _weighted(t: ad.Tensor, seed: int) -> ad.Tensor:
    """Scalar from a fixed random weighting, so no gradient entry is trivially 0."""
    w = np.random.default_rng(seed).normal(size=t.shape)
    return ad.sum_all(ad.mul(t, t.tape.leaf(w)))


def _op_cases(rng) -> list:
    def r(*shape):
        return rng.normal(size=shape)

    # relu inputs kept away from the kink so central differences are valid
    away = r(3, 5)
    away[np.abs(away) < 0.05] = 0.5
    return [
        ("add", lambda t, v: _weighted(ad.add(v["a"], v["b"]), 1), {"a": r(3, 4), "b": r(1, 4)}),
        ("sub", lambda t, v: _weighted(ad.sub(v["a"], v["b"]), 2), {"a": r(3, 4), "b": r(3, 1)}),
        ("mul", lambda t, v: _weighted(ad.mul(v["a"], v["b"]), 3), {"a": r(2, 3, 4), "b": r(2, 1, 4)}),
        ("scale", lambda t, v: _weighted(ad.scale(v["a"], -1.7), 4), {"a": r(5)}),
        ("add_scalar", lambda t, v: _weighted(ad.add_scalar(v["a"], 0.3), 5), {"a": r(5)}),
        ("relu", lambda t, v: _weighted(ad.relu(v["a"]), 6), {"a": away}),
        ("reshape", lambda t, v: _weighted(ad.reshape(v["a"], (6, 2)), 7), {"a": r(3, 4)}),
        ("transpose", lambda t, v: _weighted(ad.transpose(v["a"], (2, 0, 1)), 8), {"a": r(2, 3, 4)}),
        ("take", lambda t, v: _weighted(ad.take(v["a"], slice(1, 3)), 9), {"a": r(4, 3)}),
        ("mean", lambda t, v: ad.mean(ad.mul(v["a"], v["a"])), {"a": r(3, 3)}),
        ("sum_all", lambda t, v: ad.sum_all(ad.mul(v["a"], v["a"])), {"a": r(3, 3)}),
        ("matmul", lambda t, v: _weighted(ad.matmul(v["a"], v["b"]), 10), {"a": r(2, 3, 4), "b": r(2, 4, 5)}),
        ("linear", lambda t, v: _weighted(ad.linear(v["x"], v["w"], v["b"]), 11),
         {"x": r(1, 4), "w": r(4, 3), "b": r(3)}),
        ("softmax", lambda t, v: _weighted(ad.softmax(v["a"]), 12), {"a": r(3, 6)}),
        ("softmax_matmul", lambda t, v: _weighted(ad.softmax(ad.matmul(v["a"], v["b"])), 13),
         {"a": r(3, 4), "b": r(4, 5)}),
        ("avgpool1d", lambda t, v: _weighted(ad.avgpool1d(v["a"], 4), 14), {"a": r(1, 16)}),
        ("channel_affine", lambda t, v: _weighted(ad.channel_affine(v["x"], v["al"], v["be"]), 15),
         {"x": r(2, 3, 4, 4), "al": r(3), "be": r(3)}),
        ("conv2d", lambda t, v: _weighted(ad.conv2d(v["x"], v["w"], v["b"]), 16),
         {"x": r(2, 4, 4), "w": r(3, 2, 3, 3), "b": r(3)}),
        ("conv2d_batched", lambda t, v: ad.mean(ad.conv2d(v["x"], v["w"], v["b"])),
         {"x": r(2, 2, 5, 5), "w": r(3, 2, 3, 3), "b": r(3)}),
    ]


def _toy_inputs(seed: int):
    rng = np.random.default_rng(seed)
    params = M.init_params(TOY, seed, client_ids=(1,), zero_final=False)
    # nonzero biases so every bias gradient path is exercised
    shared = {k: v + 0.05 * rng.normal(size=v.shape) for k, v in params.shared.items()}
    dec = {k: v + 0.05 * rng.normal(size=v.shape) for k, v in params.decoders[1].items()}
    x = rng.uniform(0, 1, size=(2, 1, 16, 16))
    g = rng.uniform(0, 1, size=7)
    f_t = rng.normal(size=(2, TOY.report_dim))
    f_t /= np.linalg.norm(f_t, axis=1, keepdims=True)
    return shared, dec, x, g, f_t


def _model_cases(seed: int) -> list:
    shared, dec, x, g, f_t = _toy_inputs(seed)
    enc = {k: v for k, v in shared.items() if k.startswith("encoder.")}
    hs = {k: v for k, v in shared.items() if k.startswith("hs.")}
    ha = {k: v for k, v in shared.items() if k.startswith("ha.")}

    def encoder(t, v):
        return _weighted(M.encode(v, v["x"]), 20)

    def scanning(t, v):
        a, b, c = M.scanning_hypernet(v, v["g"])
        return ad.add(ad.add(_weighted(a, 21), _weighted(b, 22)), _weighted(c, 23))

    # a key bias shifts every score of a query equally, which softmax ignores,
    # so its gradient is exactly zero; it is held constant here and checked
    # separately by zero_gradient_check
    key_bias = shared["ha.k.b"]

    def with_key_bias(t, v):
        return {**v, "ha.k.b": t.leaf(key_bias)}

    def anatomy(t, v):
        return _weighted(M.anatomy_hypernet(with_key_bias(t, v), TOY, v["f_t"]), 24)

    def full(t, v):
        pd = {k[len("dec."):]: val for k, val in v.items() if k.startswith("dec.")}
        pred = M.forward(with_key_bias(t, v), pd, TOY, v["x"], v["g"], v["f_t"])
        return _weighted(pred, 25)

    ha = {k: v for k, v in ha.items() if k != "ha.k.b"}
    full_inputs = {**{k: v for k, v in shared.items() if k != "ha.k.b"},
                   **{"dec." + k: val for k, val in dec.items()},
                   "x": x, "g": g, "f_t": f_t}
    return [
        ("model.encoder", encoder, {**enc, "x": x}),
        ("model.scanning_hypernet", scanning, {**hs, "g": g}),
        ("model.anatomy_hypernet", anatomy, {**ha, "f_t": f_t}),
        ("model.forward", full, full_inputs),
    ]


def zero_gradient_check(seed: int = 0, tol: float = 1e-12) -> GradCheckReport:
    """The attention key bias must receive an (absolutely) zero gradient."""
    shared, _, _, _, f_t = _toy_inputs(seed)
    tape = ad.Tape()
    p = M.param_leaves(tape, {k: v for k, v in shared.items() if k.startswith("ha.")})
    loss = _weighted(M.anatomy_hypernet(p, TOY, tape.leaf(f_t)), 24)
    g = tape.backward(loss)[p["ha.k.b"].node_id]
    return GradCheckReport({"ha.k.b": float(np.abs(g).max())}, tol, {"ha.k.b": g.size})


def run_suite(tol: float = 1e-4, h: float = 1e-5, max_coords: int = 12,
              seed: int = 0, progress: Callable | None = None,
              model_h: float = 1e-6) -> list:
    """Returns ``[(name, GradCheckReport), ...]`` for every op and model path.

    Composed paths use the smaller ``model_h`` so that the perturbation does
    not push any of their many relu units across its kink.
    """
    rng = np.random.default_rng(seed)
    cases = [(n, g, i, h) for n, g, i in _op_cases(rng)]
    cases += [(n, g, i, model_h) for n, g, i in _model_cases(seed)]
    results = []
    for name, graph, inputs, step in cases:
        report = finite_diff_check(graph, inputs, h=step, tol=tol, max_coords=max_coords,
                                   seed=seed)
        results.append((name, report))
        if progress is not None:
            progress(name, report)
    results.append(("model.attention_key_bias_zero", zero_gradient_check(seed)))
    if progress is not None:
        progress(*results[-1])
    return results


def format_report(results) -> str:
    lines = []
    for name, rep in results:
        status = "PASS" if rep.passed else "FAIL"
        lines.append(f"{status} {name:<26} max_rel_error={rep.worst:.3e} "
                     f"coords={sum(rep.coords_checked.values())}")
    return "\n".join(lines)


def all_passed(results) -> bool:
    return all(rep.passed for _, rep in results)


__all__ = ["TOY", "GradCheckReport", "run_suite", "format_report", "all_passed"]
