"""Trajectory error metrics."""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation
from .spatial import nearest_distances


def metric_dbar(true_seq: np.ndarray, pred_seq: np.ndarray) -> float:
    """Average distance from each true particle to its nearest predicted one.

    One-directional: for every frame t and true particle i,
    min over predicted particles of ||p_t^i - phat_t||, averaged over all
    (t, i). The two sequences must cover the same frames but may have
    different particle counts. Units are raw scene units.
    """
    t_arr = np.asarray(true_seq, dtype=np.float64)
    p_arr = np.asarray(pred_seq, dtype=np.float64)
    if t_arr.ndim != 3 or p_arr.ndim != 3 or t_arr.shape[2] != 3 or p_arr.shape[2] != 3:
        raise ContractViolation(f"sequences must be (T, N, 3), got {t_arr.shape} and {p_arr.shape}")
    if t_arr.shape[0] != p_arr.shape[0]:
        raise ContractViolation(
            f"frame counts differ: {t_arr.shape[0]} vs {p_arr.shape[0]}"
        )
    per_frame = np.zeros(t_arr.shape[0])
    for t in range(t_arr.shape[0]):
        per_frame[t] = nearest_distances(t_arr[t], p_arr[t]).mean()
    return float(per_frame.mean())


def metric_dt(true_seq: np.ndarray, pred_seq: np.ndarray, tau: int) -> float:
    """Index-aligned mean error at horizon tau.

    Both sequences start at the first predicted frame (tau = 1 is row 0);
    particles correspond one-to-one by index.
    """
    t_arr = np.asarray(true_seq, dtype=np.float64)
    p_arr = np.asarray(pred_seq, dtype=np.float64)
    if t_arr.shape != p_arr.shape:
        raise ContractViolation(f"shape mismatch: {t_arr.shape} vs {p_arr.shape}")
    if not (1 <= tau <= t_arr.shape[0]):
        raise ContractViolation(f"tau {tau} outside [1, {t_arr.shape[0]}]")
    d = t_arr[tau - 1] - p_arr[tau - 1]
    return float(np.sqrt((d * d).sum(axis=1)).mean())


def metric_report(
    true_seq: np.ndarray,
    pred_seqs: list[np.ndarray],
    taus: tuple[int, ...] = (1, 2),
    display_scale: float = 1.0,
) -> dict:
    """d-bar mean/std over prediction samples plus index-aligned horizons.

    display_scale multiplies reported values (1000 shows millimeters when the
    scene is in meters); raw values are also included.
    """
    dbars = np.array([metric_dbar(true_seq, p) for p in pred_seqs])
    out = {
        "n_samples": len(pred_seqs),
        "dbar_mean": float(dbars.mean()),
        "dbar_std": float(dbars.std()),
        "dbar_raw": dbars.tolist(),
        "display_scale": display_scale,
        "dbar_mean_display": float(dbars.mean() * display_scale),
    }
    same_shape = all(p.shape == np.asarray(true_seq).shape for p in pred_seqs)
    if same_shape:
        for tau in taus:
            if tau <= np.asarray(true_seq).shape[0]:
                vals = np.array([metric_dt(true_seq, p, tau) for p in pred_seqs])
                out[f"dt_{tau}_mean"] = float(vals.mean())
                out[f"dt_{tau}_std"] = float(vals.std())
    return out
