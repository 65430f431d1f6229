"""Finite-difference gradient checking for every op and the full model.

The oracle is central differences in float64: for each input element x,
(f(x+h) - f(x-h)) / 2h with h = 1e-5. Errors are reported per element as
|analytic - numeric| / max(|analytic|, |numeric|, 1), i.e. relative for large
gradients and absolute near zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .model import Model, ModelConfig, encode_subgraphs, forward, init_parameters
from .sampling import sample_stage1_batch
from .tensor import Tape, Tensor


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of f with respect to x (mutated in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f()
        flat[i] = keep - h
        down = f()
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float((np.abs(analytic - numeric) / denom).max())


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def check_function(
    name: str,
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
    tolerance: float = 1e-4,
) -> CheckResult:
    """Compare tape gradients of a scalar-valued f against central differences."""
    with Tape() as tape:
        loss = f(params)
    if loss.data.shape != ():
        raise ValueError(f"{name}: gradcheck target must be scalar, got shape {loss.data.shape}")
    tape.backward(loss)
    analytic = {key: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for key, t in params.items()}

    worst = 0.0
    for key, t in params.items():
        numeric = numeric_gradient(lambda: float(f(params).data), t.data)
        worst = max(worst, gradient_error(analytic[key], numeric))
    return CheckResult(name=name, max_error=worst, tolerance=tolerance)


def _p(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.normal(0.0, 0.5, size=shape), requires_grad=True, dtype=np.float64)


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Reduce any tensor to a scalar with fixed random weights."""
    w = Tensor(rng.normal(0.0, 1.0, size=out.data.shape), dtype=np.float64)
    return T.sum_all(T.mul(out, w))


def op_suite(tolerance: float = 1e-4) -> list[CheckResult]:
    """Gradcheck every differentiable op on small random instances."""
    results = []
    rng = np.random.default_rng(7)

    results.append(
        check_function(
            "add_broadcast",
            lambda p: _weighted(T.add(p["a"], p["b"]), np.random.default_rng(0)),
            {"a": _p(rng, 3, 4), "b": _p(rng, 4)},
            tolerance,
        )
    )
    results.append(
        check_function(
            "mul_broadcast",
            lambda p: _weighted(T.mul(p["a"], p["b"]), np.random.default_rng(1)),
            {"a": _p(rng, 3, 4), "b": _p(rng, 3, 1)},
            tolerance,
        )
    )
    results.append(
        check_function(
            "matmul_batched",
            lambda p: _weighted(T.matmul(p["a"], p["b"]), np.random.default_rng(2)),
            {"a": _p(rng, 2, 3, 4), "b": _p(rng, 4, 5)},
            tolerance,
        )
    )
    results.append(
        check_function(
            "reshape_transpose",
            lambda p: _weighted(T.transpose(T.reshape(p["a"], (2, 2, 3, 2)), (0, 2, 1, 3)), np.random.default_rng(3)),
            {"a": _p(rng, 4, 6)},
            tolerance,
        )
    )
    idx = np.array([0, 2, 2, 1], dtype=np.int64)
    results.append(
        check_function(
            "gather_rows_repeats",
            lambda p: _weighted(T.gather_rows(p["a"], idx), np.random.default_rng(4)),
            {"a": _p(rng, 3, 5)},
            tolerance,
        )
    )
    results.append(
        check_function(
            "slice_last",
            lambda p: _weighted(T.slice_last(p["a"], 1, 3), np.random.default_rng(5)),
            {"a": _p(rng, 4, 5)},
            tolerance,
        )
    )
    cond = np.random.default_rng(6).random((3, 4)) < 0.5
    results.append(
        check_function(
            "where",
            lambda p: _weighted(T.where(cond, p["a"], p["b"]), np.random.default_rng(6)),
            {"a": _p(rng, 3, 4), "b": _p(rng, 3, 4)},
            tolerance,
        )
    )
    results.append(
        check_function(
            "gelu",
            lambda p: _weighted(T.gelu(p["a"]), np.random.default_rng(8)),
            {"a": _p(rng, 5, 6)},
            tolerance,
        )
    )
    results.append(
        check_function(
            "layer_norm",
            lambda p: _weighted(T.layer_norm(p["a"], p["gain"], p["bias"]), np.random.default_rng(9)),
            {"a": _p(rng, 4, 6), "gain": _p(rng, 6), "bias": _p(rng, 6)},
            tolerance,
        )
    )
    attn_mask = np.random.default_rng(10).random((4, 5)) < 0.5
    attn_mask[:, 0] = True  # keep every row alive
    results.append(
        check_function(
            "masked_softmax",
            lambda p: _weighted(T.masked_softmax(p["a"], attn_mask), np.random.default_rng(10)),
            {"a": _p(rng, 4, 5)},
            tolerance,
        )
    )

    def dropout_case(p):
        out = T.dropout(p["a"], 0.4, np.random.default_rng(11), training=True)
        return _weighted(out, np.random.default_rng(11))

    results.append(check_function("dropout", dropout_case, {"a": _p(rng, 6, 5)}, tolerance))

    targets = np.array([1, 0, 3], dtype=np.int64)
    results.append(
        check_function(
            "cross_entropy_smoothed",
            lambda p: _weighted(T.cross_entropy(p["z"], targets, alpha=0.3), np.random.default_rng(12)),
            {"z": _p(rng, 3, 4)},
            tolerance,
        )
    )
    answer_sets = [np.array([0, 3]), np.array([5]), np.array([1, 2, 6])]
    results.append(
        check_function(
            "answer_masked_cross_entropy",
            lambda p: _weighted(T.answer_masked_cross_entropy(p["z"], answer_sets), np.random.default_rng(13)),
            {"z": _p(rng, 3, 8)},
            tolerance,
        )
    )
    return results


def model_check(tolerance: float = 1e-3) -> CheckResult:
    """End-to-end gradcheck of a small model in float64.

    Two layers, width 8, two heads, two experts, dropout off (the check layers
    training-mode routing on top of deterministic arithmetic), masked cross
    entropy at the sampled mask positions.
    """
    from .graph import KnowledgeGraph

    rng = np.random.default_rng(42)
    triples = []
    for _ in range(18):
        h, t = rng.integers(6, size=2)
        r = int(rng.integers(3))
        if (int(h), r, int(t)) not in triples:
            triples.append((int(h), r, int(t)))
    graph = KnowledgeGraph(6, 3, triples)
    config = ModelConfig(
        entity_count=6, relation_count=3, layers=2, hidden=8, heads=2, experts=2, top_k=2, dropout=0.0
    )
    params = init_parameters(config, rng, dtype=np.float64)
    model = Model(config=config, params=params)
    subs = sample_stage1_batch(graph, rng, batch_size=2, budget=(4, 6))
    batch = encode_subgraphs(subs, config)

    def f(p):
        logits = forward(Model(config=config, params=p), batch, training=True)
        losses = T.cross_entropy(logits, batch.targets, alpha=0.1)
        return T.mul(T.sum_all(losses), 1.0 / batch.graph_count)

    return check_function("model_end_to_end", f, params, tolerance)


def run_all(tolerance_ops: float = 1e-4, tolerance_model: float = 1e-3) -> list[CheckResult]:
    return op_suite(tolerance_ops) + [model_check(tolerance_model)]
