"""Central finite-difference verification of the analytic VJPs.

The checker perturbs every element of every input of a scalar-valued
composition and compares the numeric derivative against the recorded
backward pass. The suite covers each primitive on small randomized shapes;
inputs are kept away from kinks (relu/abs at 0, ties under max) so the
derivative exists everywhere it is probed.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import engine
from .engine import Tensor


def finite_diff_gradcheck(
    fn: Callable[[list[Tensor]], Tensor],
    inputs: list[Tensor],
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between analytic gradients and central differences.

    fn must map the given leaf tensors to a scalar Tensor and be re-runnable;
    the relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(inputs)
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in inputs]
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        ga_flat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(fn(inputs).data)
            flat[i] = orig - epsilon
            f_minus = float(fn(inputs).data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(ga_flat[i] - numeric) / max(abs(ga_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def _projection(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _signed_away_from_zero(rng: np.random.Generator, shape, low=0.1, high=1.0):
    mags = rng.uniform(low, high, size=shape)
    signs = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mags * signs


def _distinct(rng: np.random.Generator, shape):
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) * 0.37 - n * 0.19).reshape(shape)


def primitive_checks(seed: int = 0):
    """Named (fn, inputs) pairs covering every differentiation primitive."""
    rng = np.random.default_rng(seed)
    checks: list[tuple[str, Callable, list[Tensor]]] = []

    def project(out: Tensor, proj: Tensor) -> Tensor:
        return engine.sum_all(engine.mul(out, proj))

    # matmul / affine
    p = _projection(rng, (3, 2))
    checks.append(
        (
            "matmul",
            lambda ts, p=p: project(engine.matmul(ts[0], ts[1]), p),
            [Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((4, 2)))],
        )
    )
    p = _projection(rng, (3, 2))
    checks.append(
        (
            "linear",
            lambda ts, p=p: project(engine.linear(ts[0], ts[1], ts[2]), p),
            [
                Tensor(rng.standard_normal((3, 4))),
                Tensor(rng.standard_normal((4, 2))),
                Tensor(rng.standard_normal(2)),
            ],
        )
    )

    # elementwise
    p = _projection(rng, (3, 4))
    checks.append(
        (
            "add",
            lambda ts, p=p: project(engine.add(ts[0], ts[1]), p),
            [Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((3, 4)))],
        )
    )
    checks.append(
        (
            "mul",
            lambda ts, p=p: project(engine.mul(ts[0], ts[1]), p),
            [Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((3, 4)))],
        )
    )
    checks.append(
        (
            "scale_add_scalar",
            lambda ts, p=p: project(
                engine.add_scalar(engine.scale(ts[0], -1.7), 0.4), p
            ),
            [Tensor(rng.standard_normal((3, 4)))],
        )
    )
    checks.append(
        (
            "relu",
            lambda ts, p=p: project(engine.relu(ts[0]), p),
            [Tensor(_signed_away_from_zero(rng, (3, 4)))],
        )
    )
    checks.append(
        (
            "sigmoid",
            lambda ts, p=p: project(engine.sigmoid(ts[0]), p),
            [Tensor(rng.standard_normal((3, 4)))],
        )
    )
    checks.append(
        (
            "log",
            lambda ts, p=p: project(engine.log(ts[0]), p),
            [Tensor(rng.uniform(0.5, 2.0, (3, 4)))],
        )
    )
    checks.append(
        (
            "power",
            lambda ts, p=p: project(engine.power(ts[0], 1.7), p),
            [Tensor(rng.uniform(0.5, 2.0, (3, 4)))],
        )
    )
    checks.append(
        (
            "abs",
            lambda ts, p=p: project(engine.absolute(ts[0]), p),
            [Tensor(_signed_away_from_zero(rng, (3, 4)))],
        )
    )
    checks.append(
        (
            "clamp",
            lambda ts, p=p: project(engine.clamp(ts[0], -0.9, 0.9), p),
            [Tensor(_signed_away_from_zero(rng, (3, 4), 0.2, 2.0))],
        )
    )

    # structural
    p = _projection(rng, (6, 2))
    checks.append(
        (
            "reshape_moveaxis",
            lambda ts, p=p: project(
                engine.reshape(engine.moveaxis(ts[0], 0, 2), (6, 2)), p
            ),
            [Tensor(rng.standard_normal((2, 2, 3)))],
        )
    )
    p = _projection(rng, (5, 3))
    checks.append(
        (
            "concat_rows",
            lambda ts, p=p: project(engine.concat([ts[0], ts[1]], axis=0), p),
            [Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((3, 3)))],
        )
    )
    p = _projection(rng, (2, 6))
    checks.append(
        (
            "concat_cols",
            lambda ts, p=p: project(engine.concat([ts[0], ts[1]], axis=1), p),
            [Tensor(rng.standard_normal((2, 2))), Tensor(rng.standard_normal((2, 4)))],
        )
    )
    idx = np.array([0, 2, 2, 1, 0])
    p = _projection(rng, (5, 3))
    checks.append(
        (
            "gather_rows",
            lambda ts, p=p, idx=idx: project(engine.gather_rows(ts[0], idx), p),
            [Tensor(rng.standard_normal((4, 3)))],
        )
    )
    p = _projection(rng, (2, 3))
    checks.append(
        (
            "crop",
            lambda ts, p=p: project(engine.crop(ts[0], ((1, 3), (0, 3))), p),
            [Tensor(rng.standard_normal((4, 5)))],
        )
    )

    # reductions
    checks.append(
        (
            "sum_mean",
            lambda ts: engine.add(
                engine.sum_all(ts[0]), engine.scale(engine.mean_all(ts[0]), 2.0)
            ),
            [Tensor(rng.standard_normal((3, 4)))],
        )
    )
    p = _projection(rng, (3,))
    checks.append(
        (
            "sum_axis",
            lambda ts, p=p: project(engine.sum_axis(ts[0], 1), p),
            [Tensor(rng.standard_normal((3, 4)))],
        )
    )
    p = _projection(rng, (3, 5))
    checks.append(
        (
            "max_axis",
            lambda ts, p=p: project(engine.max_axis(ts[0], 1), p),
            [Tensor(_distinct(rng, (3, 4, 5)))],
        )
    )

    # row-wise normalizations
    p = _projection(rng, (2, 5))
    checks.append(
        (
            "softmax_rows",
            lambda ts, p=p: project(engine.softmax_rows(ts[0]), p),
            [Tensor(rng.standard_normal((2, 5)))],
        )
    )
    p = _projection(rng, (3, 5))
    checks.append(
        (
            "layer_norm",
            lambda ts, p=p: project(engine.layer_norm(ts[0], ts[1], ts[2]), p),
            [
                Tensor(rng.standard_normal((3, 5))),
                Tensor(rng.uniform(0.5, 1.5, 5)),
                Tensor(rng.standard_normal(5)),
            ],
        )
    )

    rm, rv = np.zeros(2), np.ones(2)
    p = _projection(rng, (2, 4, 5))
    checks.append(
        (
            "batch_norm_train",
            lambda ts, p=p, rm=rm, rv=rv: project(
                engine.batch_norm(ts[0], ts[1], ts[2], rm, rv, training=True), p
            ),
            [
                Tensor(rng.standard_normal((2, 4, 5))),
                Tensor(rng.uniform(0.5, 1.5, 2)),
                Tensor(rng.standard_normal(2)),
            ],
        )
    )
    rm_e = rng.standard_normal(2) * 0.1
    rv_e = rng.uniform(0.5, 1.5, 2)
    checks.append(
        (
            "batch_norm_eval",
            lambda ts, p=p, rm=rm_e, rv=rv_e: project(
                engine.batch_norm(ts[0], ts[1], ts[2], rm, rv, training=False), p
            ),
            [
                Tensor(rng.standard_normal((2, 4, 5))),
                Tensor(rng.uniform(0.5, 1.5, 2)),
                Tensor(rng.standard_normal(2)),
            ],
        )
    )

    # convolutions
    p = _projection(rng, (3, 5, 6))
    checks.append(
        (
            "conv2d_stride1",
            lambda ts, p=p: project(engine.conv_nd(ts[0], ts[1], ts[2], (1, 1)), p),
            [
                Tensor(rng.standard_normal((2, 5, 6))),
                Tensor(rng.standard_normal((3, 2, 3, 3))),
                Tensor(rng.standard_normal(3)),
            ],
        )
    )
    p = _projection(rng, (3, 3, 3))
    checks.append(
        (
            "conv2d_stride2",
            lambda ts, p=p: project(engine.conv_nd(ts[0], ts[1], ts[2], (2, 2)), p),
            [
                Tensor(rng.standard_normal((2, 5, 6))),
                Tensor(rng.standard_normal((3, 2, 3, 3))),
                Tensor(rng.standard_normal(3)),
            ],
        )
    )
    p = _projection(rng, (2, 2, 5, 3))
    checks.append(
        (
            "conv3d",
            lambda ts, p=p: project(
                engine.conv_nd(ts[0], ts[1], ts[2], (2, 1, 2)), p
            ),
            [
                Tensor(rng.standard_normal((2, 4, 5, 6))),
                Tensor(rng.standard_normal((2, 2, 3, 3, 3))),
                Tensor(rng.standard_normal(2)),
            ],
        )
    )
    p = _projection(rng, (3, 6, 8))
    checks.append(
        (
            "conv_transpose2d",
            lambda ts, p=p: project(engine.conv_transpose2d(ts[0], ts[1], ts[2]), p),
            [
                Tensor(rng.standard_normal((2, 3, 4))),
                Tensor(rng.standard_normal((2, 3, 3, 3))),
                Tensor(rng.standard_normal(3)),
            ],
        )
    )

    # scatter
    cells = np.array([0, 1, 1, 3, 0, 2])
    p = _projection(rng, (5, 3))
    checks.append(
        (
            "scatter_mean_rows",
            lambda ts, p=p, cells=cells: project(
                engine.scatter_mean_rows(ts[0], cells, 5), p
            ),
            [Tensor(rng.standard_normal((6, 3)))],
        )
    )
    return checks


def run_primitive_suite(seed: int = 0, epsilon: float = 1e-5):
    """Gradcheck every primitive; returns (name, max relative error) pairs."""
    results = []
    for name, fn, inputs in primitive_checks(seed):
        results.append((name, finite_diff_gradcheck(fn, inputs, epsilon)))
    return results
