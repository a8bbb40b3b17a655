"""Finite-difference gradient checks for every differentiable component.

Each check is a named factory: given a seeded Generator it builds a scalar
function of raw arrays plus the arrays to differentiate at. Inputs are
sampled away from non-smooth loci (relu/abs kinks, max ties, interpolation
cell boundaries, kernel support edges) so central differences are valid.

The same suite backs the unit tests, the `latentfluid gradcheck` CLI command
and the acceptance run (10 seeds per check).
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tape
from .tape import Tensor, gradcheck


@dataclass
class Check:
    name: str
    make: Callable[[np.random.Generator], tuple[Callable, list[np.ndarray]]]
    tol: float = 1e-4
    step: float | None = None  # overrides the suite step (high-frequency paths)


def _wrap(op, *shapes, transform=None, weight_shape=None):
    """Build f(inputs) = sum(op(inputs) * W) with a fixed random weight."""

    def make(rng: np.random.Generator):
        arrays = [rng.normal(size=s) for s in shapes]
        if transform is not None:
            arrays = transform(arrays, rng)
        probe = op(*[Tensor(a) for a in arrays])
        w = rng.normal(size=probe.value.shape)

        def f(*ts):
            return tape.tsum(tape.mul(op(*ts), Tensor(w)))

        return f, arrays

    return make


def _away_from(x: np.ndarray, where: float, margin: float) -> np.ndarray:
    """Push values outside [where - margin, where + margin], keeping the sign of the offset."""
    d = x - where
    d = np.where(np.abs(d) < margin, np.sign(d + (d == 0)) * margin * 2.0, d)
    return where + d


def op_checks() -> list[Check]:
    checks: list[Check] = []

    def positive(arrays, rng):
        return [0.2 + np.abs(a) for a in arrays]

    checks.append(Check("add", _wrap(tape.add, (3, 4), (3, 4))))
    checks.append(Check("add_broadcast", _wrap(tape.add, (3, 4), (1, 4))))
    checks.append(Check("sub", _wrap(tape.sub, (3, 4), (3, 4))))
    checks.append(Check("mul", _wrap(tape.mul, (3, 4), (3, 4))))
    checks.append(Check("mul_broadcast", _wrap(tape.mul, (5, 3), (5, 1))))
    checks.append(
        Check(
            "div",
            _wrap(
                tape.div,
                (3, 4),
                (3, 4),
                transform=lambda arrs, rng: [arrs[0], 0.5 + np.abs(arrs[1])],
            ),
        )
    )
    checks.append(Check("neg", _wrap(tape.neg, (4, 3))))
    checks.append(Check("matmul", _wrap(tape.matmul, (3, 4), (4, 2))))
    checks.append(Check("power_cube", _wrap(lambda t: tape.power(t, 3.0), (3, 4))))
    checks.append(
        Check(
            "power_half",
            _wrap(lambda t: tape.power(t, 0.5), (3, 4), transform=positive),
        )
    )
    checks.append(
        Check(
            "maximum_const",
            _wrap(
                lambda t: tape.maximum(t, 0.2),
                (4, 4),
                transform=lambda arrs, rng: [_away_from(arrs[0], 0.2, 0.05)],
            ),
        )
    )
    checks.append(
        Check(
            "abs",
            _wrap(
                tape.absval,
                (4, 4),
                transform=lambda arrs, rng: [_away_from(arrs[0], 0.0, 0.05)],
            ),
        )
    )
    checks.append(Check("exp", _wrap(tape.exp, (3, 4))))
    checks.append(Check("expm1", _wrap(tape.expm1, (3, 4))))
    checks.append(Check("log", _wrap(tape.log, (3, 4), transform=positive)))
    checks.append(Check("sqrt", _wrap(tape.sqrt, (3, 4), transform=positive)))
    checks.append(Check("tanh", _wrap(tape.tanh, (3, 4))))
    checks.append(Check("sigmoid", _wrap(tape.sigmoid, (3, 4))))
    checks.append(
        Check(
            "relu",
            _wrap(
                tape.relu,
                (4, 4),
                transform=lambda arrs, rng: [_away_from(arrs[0], 0.0, 0.05)],
            ),
        )
    )
    checks.append(Check("softplus", _wrap(tape.softplus, (3, 4))))
    checks.append(Check("sin", _wrap(tape.sin, (3, 4))))
    checks.append(Check("cos", _wrap(tape.cos, (3, 4))))
    checks.append(Check("sum_all", _wrap(lambda t: tape.tsum(t), (3, 4))))
    checks.append(Check("sum_axis0", _wrap(lambda t: tape.tsum(t, axis=0), (3, 4))))
    checks.append(
        Check("sum_axis1_keep", _wrap(lambda t: tape.tsum(t, axis=1, keepdims=True), (3, 4)))
    )
    checks.append(Check("mean_all", _wrap(lambda t: tape.tmean(t), (3, 4))))
    checks.append(Check("mean_axis", _wrap(lambda t: tape.tmean(t, axis=1), (3, 4))))

    def spread_max(arrs, rng):
        # ensure a unique per-row max with a comfortable gap
        a = arrs[0]
        a[np.arange(a.shape[0]), rng.integers(0, a.shape[1], a.shape[0])] += 3.0
        return [a]

    checks.append(
        Check("reduce_max", _wrap(lambda t: tape.reduce_max(t, axis=1), (4, 5), transform=spread_max))
    )
    checks.append(Check("reshape", _wrap(lambda t: tape.reshape(t, (2, 6)), (3, 4))))
    checks.append(
        Check("concat_axis0", _wrap(lambda a, b: tape.concat([a, b], axis=0), (2, 3), (4, 3)))
    )
    checks.append(
        Check("concat_axis1", _wrap(lambda a, b: tape.concat([a, b], axis=1), (3, 2), (3, 4)))
    )
    checks.append(Check("col", _wrap(lambda t: tape.col(t, 1), (5, 3))))
    checks.append(Check("cumsum_axis0", _wrap(lambda t: tape.cumsum(t, axis=0), (4, 3))))
    checks.append(Check("cumsum_axis1", _wrap(lambda t: tape.cumsum(t, axis=1), (3, 5))))

    gather_idx = np.array([0, 2, 2, 4, 1], dtype=np.int64)
    checks.append(Check("gather", _wrap(lambda t: tape.gather(t, gather_idx), (5, 3))))
    scat_idx = np.array([1, 0, 3, 1, 1, 2], dtype=np.int64)
    checks.append(
        Check("scatter_add", _wrap(lambda t: tape.scatter_add(t, scat_idx, 4), (6, 2)))
    )
    return checks


def model_checks() -> list[Check]:
    """Gradient checks through the composite model pieces."""
    from . import modelchecks

    return modelchecks.all_checks()


def run_suite(
    which: str = "all", n_seeds: int = 10, step: float = 1e-5, seed0: int = 0
) -> list[dict]:
    """Run every check over n_seeds seeds; returns one record per check."""
    checks: list[Check] = []
    if which in ("all", "ops"):
        checks += op_checks()
    if which in ("all", "model"):
        checks += model_checks()
    results = []
    for chk in checks:
        worst = 0.0
        t0 = time.perf_counter()
        for s in range(n_seeds):
            rng = np.random.default_rng(seed0 + 1000 * s + zlib.crc32(chk.name.encode()) % 997)
            f, arrays = chk.make(rng)
            err = gradcheck(f, arrays, step=chk.step if chk.step is not None else step)
            worst = max(worst, err)
        results.append(
            {
                "name": chk.name,
                "max_rel_err": worst,
                "tol": chk.tol,
                "passed": worst < chk.tol,
                "seconds": time.perf_counter() - t0,
            }
        )
    return results
