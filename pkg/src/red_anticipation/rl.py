"""Early-anticipation reward, returns, sequence sampling and REINFORCE terms."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError


def transfer_time(labels) -> int | None:
    """First step where the labels switch from background to an action.

    A window that starts inside an action transfers at step 0.
    """
    labels = np.asarray(labels)
    for t in range(len(labels)):
        if labels[t] != 0 and (t == 0 or labels[t - 1] == 0):
            return t
    return None


def step_rewards(pred, gt, alpha: float = 1.0, action_only: bool = False) -> np.ndarray:
    """Per-step reward alpha / (t + 1 - t_f) for correct predictions at t >= t_f.

    With ``action_only`` a correct background prediction earns nothing.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise DimensionError(f"prediction/label length mismatch: {pred.shape} vs {gt.shape}")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    r = np.zeros(len(gt))
    tf = transfer_time(gt)
    if tf is None:
        return r
    for t in range(tf, len(gt)):
        if pred[t] == gt[t] and not (action_only and gt[t] == 0):
            r[t] = alpha / (t + 1 - tf)
    return r


def returns(r) -> np.ndarray:
    """Return-to-go: R_t is the (correctly rounded) sum of r[t:]."""
    r = np.asarray(r, dtype=np.float64)
    if r.ndim == 2:
        return np.stack([returns(row) for row in r]) if len(r) else r.copy()
    return np.array([math.fsum(r[t:]) for t in range(len(r))])


def total_returns(r) -> np.ndarray:
    """Every step weighted by the whole-sequence reward R (ablation mode)."""
    R = returns(r)
    if R.ndim == 1:
        return np.full_like(R, R[0] if len(R) else 0.0)
    return np.repeat(R[:, :1], R.shape[1], axis=1)


def _sample_rows(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf < u[..., None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def sample_sequence(step_probs, rng: np.random.Generator):
    """Draw one label per step; returns (labels, log-probabilities).

    ``step_probs`` may carry leading batch axes; the last axis is the class
    distribution.
    """
    P = np.asarray(step_probs, dtype=np.float64)
    if P.ndim < 2:
        raise DimensionError("expected one distribution per step")
    if np.any(np.abs(P.sum(axis=-1) - 1.0) > 1e-9) or np.any(P < 0):
        raise ValueError("step probabilities are not normalised distributions")
    u = rng.random(P.shape[:-1])
    labels = _sample_rows(P, u)
    with np.errstate(divide="ignore"):
        logp = np.log(np.take_along_axis(P, labels[..., None], axis=-1)[..., 0])
    return labels, logp


@dataclass
class RewardTrace:
    t_f: int | None
    r: np.ndarray
    R: np.ndarray
    sampled: np.ndarray
    logp: np.ndarray

    @property
    def total(self) -> float:
        return float(self.R[0]) if len(self.R) else 0.0


def reward_trace(step_probs, gt, rng, alpha=1.0, action_only=False) -> RewardTrace:
    sampled, logp = sample_sequence(step_probs, rng)
    r = step_rewards(sampled, gt, alpha, action_only)
    return RewardTrace(transfer_time(gt), r, returns(r), sampled, logp)


def _batch_shape(*arrays):
    arrs = [np.asarray(a, dtype=np.float64) for a in arrays]
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise DimensionError(f"length mismatch: {[a.shape for a in arrs]}")
    return [np.atleast_2d(a) for a in arrs]


def reinforce_surrogate(logp, R, b) -> float:
    """-(1/N) sum_k sum_t logp[k,t] (R[k,t] - b[k,t]), advantages held constant.

    1-D inputs are a single sequence (N = 1).
    """
    logp, R, b = _batch_shape(logp, R, b)
    adv = R - b
    return float(-(logp * adv).sum() / logp.shape[0])


def baseline_loss(b, R) -> float:
    """Mean squared error between predicted baselines and observed returns."""
    b, R = _batch_shape(b, R)
    return float(np.mean((b - R) ** 2))
