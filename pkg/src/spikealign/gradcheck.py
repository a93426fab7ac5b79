"""Central finite-difference checks of the analytic gradients.

Each case builds a scalar from float64 leaves.  Non-scalar op outputs are
contracted with a fixed random weight so the whole Jacobian is exercised.
The spike node is checked in its relaxed form, whose forward is the
integral of the surrogate; samples are redrawn until every membrane
potential sits away from the surrogate's kinks.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .distill import cosine_align_loss
from .encoders import Readout
from .finetune import ce_loss, class_probs, finetune_loss, kl_loss
from .lif import LifParams, lif_scan
from .tensor import Tensor, backward

STEP = 1e-3
TOLERANCE = 1e-4
KINK_MARGIN = 2e-2


@dataclass
class CheckResult:
    name: str
    size: int
    max_abs_err: float
    rel_err: float
    passed: bool

    def to_record(self) -> dict:
        return asdict(self)


def numeric_grad(fn: Callable[[dict], Tensor], values: dict[str, np.ndarray], name: str,
                 h: float = STEP) -> np.ndarray:
    base = values[name]
    out = np.zeros_like(base)
    for i in np.ndindex(base.shape):
        saved = base[i]
        base[i] = saved + h
        plus = float(fn(_leaves(values, False)).data)
        base[i] = saved - h
        minus = float(fn(_leaves(values, False)).data)
        base[i] = saved
        out[i] = (plus - minus) / (2 * h)
    return out


def _leaves(values: dict[str, np.ndarray], requires_grad: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, dtype=np.float64, name=k) for k, v in values.items()}


def check(name: str, fn: Callable[[dict], Tensor], values: dict[str, np.ndarray],
          h: float = STEP, tol: float = TOLERANCE) -> CheckResult:
    """Compare analytic and numeric gradients for every leaf in ``values``.

    The error is norm-wise: ``|a - n| / max(|a|, |n|)`` over all leaves
    concatenated, with a floor so an exactly-zero gradient compares absolutely.
    """
    values = {k: np.array(v, dtype=np.float64) for k, v in values.items()}
    leaves = _leaves(values, True)
    loss = fn(leaves)
    backward(loss)
    analytic = np.concatenate([
        (leaves[k].grad if leaves[k].grad is not None else np.zeros_like(values[k])).ravel()
        for k in values])
    numeric = np.concatenate([numeric_grad(fn, values, k, h).ravel() for k in values])
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    rel = float(diff / scale)
    return CheckResult(name, int(analytic.size), float(np.max(np.abs(analytic - numeric))), rel, rel <= tol)


def _contract(out: Tensor, rng: np.random.Generator) -> Tensor:
    w = Tensor(rng.normal(size=out.shape), dtype=np.float64)
    return T.tsum(T.mul(out, w))


def _simplex(rng, n, k):
    e = np.exp(rng.normal(size=(n, k)))
    return e / e.sum(axis=1, keepdims=True)


def _relaxed_lif_case(rng: np.random.Generator, params: LifParams, steps: int = 4, n: int = 5):
    # redraw until no membrane potential sits within KINK_MARGIN of a kink
    kinks = np.array([params.threshold - params.surrogate_width, params.threshold,
                      params.threshold + params.surrogate_width])
    for _ in range(1000):
        current = rng.uniform(-0.5, 2.0, (steps, n))
        trace: dict = {}
        with T.no_grad():
            lif_scan(Tensor(current, dtype=np.float64), params, relaxed=True, trace=trace)
        # the finite-difference stencil moves U by at most steps * h
        if np.min(np.abs(trace["u"][..., None] - kinks)) > KINK_MARGIN + steps * STEP:
            return current
    raise RuntimeError("could not draw a kink-free LIF sample")


def toy_suite(seed: int = 0) -> list[tuple[str, Callable, dict]]:
    """The shipped graph suite: (name, loss builder, leaf values)."""
    rng = np.random.default_rng(seed)
    n = 5

    def vec():
        return rng.normal(size=n)

    def pos():
        return rng.uniform(0.5, 2.0, n)

    cases = [
        ("add", lambda x: _contract(T.add(x["a"], x["b"]), np.random.default_rng(1)), {"a": vec(), "b": vec()}),
        ("add_broadcast", lambda x: _contract(T.add(x["a"], x["b"]), np.random.default_rng(2)),
         {"a": rng.normal(size=(3, n)), "b": vec()}),
        ("sub", lambda x: _contract(T.sub(x["a"], x["b"]), np.random.default_rng(3)), {"a": vec(), "b": vec()}),
        ("mul", lambda x: _contract(T.mul(x["a"], x["b"]), np.random.default_rng(4)), {"a": vec(), "b": vec()}),
        ("div", lambda x: _contract(T.div(x["a"], x["b"]), np.random.default_rng(5)), {"a": vec(), "b": pos()}),
        ("scale", lambda x: _contract(T.scale(x["a"], -1.7), np.random.default_rng(6)), {"a": vec()}),
        ("exp", lambda x: _contract(T.exp(x["a"]), np.random.default_rng(7)), {"a": vec()}),
        ("log", lambda x: _contract(T.log(x["a"]), np.random.default_rng(8)), {"a": pos()}),
        ("sqrt", lambda x: _contract(T.sqrt(x["a"]), np.random.default_rng(9)), {"a": pos()}),
        ("sum", lambda x: T.tsum(T.mul(x["a"], x["a"])), {"a": vec()}),
        ("sum_axis", lambda x: _contract(T.tsum(x["a"], axis=1), np.random.default_rng(10)),
         {"a": rng.normal(size=(3, n))}),
        ("mean", lambda x: _contract(T.mean(x["a"], axis=0), np.random.default_rng(11)),
         {"a": rng.normal(size=(3, n))}),
        ("matmul", lambda x: _contract(T.matmul(x["a"], x["b"]), np.random.default_rng(12)),
         {"a": rng.normal(size=(3, n)), "b": rng.normal(size=(n, 2))}),
        ("matmul_batched", lambda x: _contract(T.matmul(x["a"], x["b"]), np.random.default_rng(13)),
         {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(2, 4, 2))}),
        ("reshape", lambda x: _contract(T.reshape(x["a"], (n, 3)), np.random.default_rng(14)),
         {"a": rng.normal(size=(3, n))}),
        ("transpose", lambda x: _contract(T.transpose(x["a"], (1, 0)), np.random.default_rng(15)),
         {"a": rng.normal(size=(3, n))}),
        ("take_rows", lambda x: _contract(T.take_rows(x["a"], np.array([[0, 2], [2, 2]])),
                                          np.random.default_rng(16)),
         {"a": rng.normal(size=(3, n))}),
        ("softmax", lambda x: _contract(T.softmax(x["a"]), np.random.default_rng(17)),
         {"a": rng.normal(size=(2, n))}),
        ("l2_normalize", lambda x: _contract(T.l2_normalize(x["a"]), np.random.default_rng(18)),
         {"a": rng.normal(size=(2, n))}),
        ("cosine_align_loss", lambda x: cosine_align_loss(x["s"], _T3),
         {"s": rng.normal(size=(3, n))}),
        ("ce_loss", lambda x: ce_loss(T.softmax(x["z"]), np.eye(n)[[1, 4]]), {"z": rng.normal(size=(2, n))}),
        ("kl_loss", lambda x: kl_loss(_H, T.softmax(x["z"])), {"z": rng.normal(size=(2, n))}),
        ("finetune_loss", lambda x: finetune_loss(T.softmax(x["z"]), np.eye(n)[[0, 3]], _H, 0.7),
         {"z": rng.normal(size=(2, n))}),
        ("class_probs", lambda x: _contract(class_probs(x["img"], T.l2_normalize(Tensor(_LBL, dtype=np.float64)),
                                                        0.5), np.random.default_rng(19)),
         {"img": rng.normal(size=(2, 4))}),
    ]
    return cases


# constants shared by the loss cases; fixed so the suite is reproducible
_T3 = np.random.default_rng(123).normal(size=(3, 5))
_H = _simplex(np.random.default_rng(124), 2, 5)
_LBL = np.random.default_rng(125).normal(size=(3, 4))


def _readout_case(seed: int):
    rng = np.random.default_rng([seed, 7])
    ro = Readout("gc", 6, 3, 4, "TDW", rng, layer_norm=True)
    spikes = (rng.uniform(size=(4, 2, 3, 6)) < 0.5).astype(np.float64)
    # keep the layer-norm variance away from zero
    spikes[..., 0] = 1.0
    spikes[..., 1] = 0.0
    values = {"time_weights": ro.weights.data.astype(np.float64) + rng.normal(0, 0.1, 4),
              "ln_gain": rng.normal(1.0, 0.2, 6), "ln_shift": rng.normal(0, 0.2, 6),
              "proj.weight": rng.normal(size=(6, 3)), "proj.bias": rng.normal(size=3)}

    def fn(x):
        ro.weights, ro.ln_gain, ro.ln_shift = x["time_weights"], x["ln_gain"], x["ln_shift"]
        ro.proj.weight, ro.proj.bias = x["proj.weight"], x["proj.bias"]
        return _contract(ro(Tensor(spikes, dtype=np.float64)), np.random.default_rng(20))

    return "readout_tdw_layernorm", fn, values


def _lif_cases(seed: int):
    rng = np.random.default_rng([seed, 8])
    out = []
    for label, params in (("lif_relaxed", LifParams(1.0, 0.9, 1.0)),
                          ("lif_relaxed_attn", LifParams(0.25, 0.9, 0.5))):
        current = _relaxed_lif_case(rng, params)
        contract_seed = int(rng.integers(1 << 30))
        out.append((label, lambda x, p=params, c=contract_seed: _contract(
            lif_scan(x["current"], p, relaxed=True), np.random.default_rng(c)), {"current": current}))
    return out


def full_suite(seed: int = 0) -> list[tuple[str, Callable, dict]]:
    return toy_suite(seed) + [_readout_case(seed)] + _lif_cases(seed)


def run_suite(seed: int = 0, h: float = STEP, tol: float = TOLERANCE) -> list[CheckResult]:
    return [check(name, fn, values, h, tol) for name, fn, values in full_suite(seed)]


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'case':<24} {'n':>4} {'max abs err':>12} {'rel err':>10}  result"]
    for r in results:
        lines.append(f"{r.name:<24} {r.size:>4} {r.max_abs_err:12.3e} {r.rel_err:10.3e}  "
                     f"{'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)
