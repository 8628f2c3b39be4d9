"""Accuracy and timing report for the quantile fast path."""
from __future__ import annotations

import time

import numpy as np

from . import risk
from .errors import ValidationError


def quantile_error(table: risk.QuantileTable | None = None, dof_step: float = 0.1) -> dict:
    """Max |fast - exact| over the table's dof range (``dof_step`` grid) and levels."""
    table = table or risk.default_table()
    dofs = np.round(np.arange(table.dof_min, table.dof_max + 1e-9, dof_step), 10)
    worst = 0.0
    where = None
    for c in table.levels:
        for d in dofs:
            e = abs(risk.t_quantile_fast(table, float(d), c) - risk.t_quantile_exact(float(d), c))
            if e > worst:
                worst, where = e, (float(d), c)
    return {"max_abs_quantile_error": worst, "worst_dof": where[0] if where else None,
            "worst_level": where[1] if where else None, "points": int(dofs.size * len(table.levels))}


def speed(n: int = 1_000_000, level: float = risk.DEFAULT_LEVEL, seed: int = 0,
          table: risk.QuantileTable | None = None) -> dict:
    """Time ``n`` quantile evaluations at random dof in the table range.

    ``speedup_ratio`` compares the table path (vectorised spline lookup, as
    used by map compression) with one exact evaluation per call. The other
    two ratios are reported for context.
    """
    table = table or risk.default_table()
    rng = np.random.default_rng(seed)
    dof = rng.uniform(table.dof_min, table.dof_max, n)
    dof_list = dof.tolist()

    t0 = time.perf_counter()
    exact = [risk.t_quantile_exact(d, level) for d in dof_list]
    t_exact = time.perf_counter() - t0

    t0 = time.perf_counter()
    fast = table.quantile_array(dof, level)
    t_fast = time.perf_counter() - t0

    m = min(n, 100_000)
    t0 = time.perf_counter()
    for d in dof_list[:m]:
        table.quantile(d, level)
    t_fast_scalar = (time.perf_counter() - t0) * n / m

    t0 = time.perf_counter()
    risk.t_quantile_exact_array(dof, level)
    t_exact_vec = time.perf_counter() - t0

    return {
        "evaluations": n,
        "level": level,
        "exact_per_call_s": t_exact,
        "table_vectorized_s": t_fast,
        "table_per_call_s": t_fast_scalar,
        "exact_vectorized_s": t_exact_vec,
        "speedup_ratio": t_exact / t_fast,
        "speedup_per_call": t_exact / t_fast_scalar,
        "speedup_vs_exact_vectorized": t_exact_vec / t_fast,
        "max_abs_error_sampled": float(np.max(np.abs(fast - np.asarray(exact)))),
    }


def bench_risk(n: int = 1_000_000, seed: int = 0) -> dict:
    if n < 1:
        raise ValidationError("need at least one evaluation")
    out = quantile_error()
    out.update(speed(n, seed=seed))
    return out
