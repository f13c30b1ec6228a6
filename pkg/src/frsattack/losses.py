"""Attack objectives over detector grids and matcher embeddings.

All losses are pure functions of already-computed window probability
grids Y, binary active-window masks A, and embeddings, written in torch
so gradients flow back through whatever produced the inputs. The two
detection losses sum a signed margin over every window, but the mask
zeroes all inactive cells, so only windows that scored at least tau on
the clean image contribute:

    detectable:  sum_{k,l} (K * A - A * Y)^s    pushed down by raising Y
    evasive:     sum_{k,l} (A * Y - K * A)^s    pushed down by lowering Y

With an odd exponent s the terms keep their sign, so optimization keeps
pushing probabilities past the margin K instead of stalling on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .core import MODES


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float32)


def _check_grids(probs, active):
    y = _as_tensor(probs)
    a = _as_tensor(active)
    if a.dtype == torch.bool:
        a = a.to(y.dtype)
    if y.shape != a.shape:
        raise ValueError(f"grid shapes differ: probs {tuple(y.shape)} vs active {tuple(a.shape)}")
    return y, a


def _check_margin(k: float, s: float):
    if not 0.0 <= k <= 1.0:
        raise ValueError("margin k must lie in [0, 1]")
    if not s > 0.0:
        raise ValueError("exponent s must be > 0")


def det_loss_detectable(probs, active, k: float, s: float) -> torch.Tensor:
    """Penalty for active windows scoring below the margin k."""
    y, a = _check_grids(probs, active)
    _check_margin(k, s)
    return torch.sum((k * a - a * y) ** s)


def det_loss_evasive(probs, active, k: float, s: float) -> torch.Tensor:
    """Penalty for active windows scoring above the margin k."""
    y, a = _check_grids(probs, active)
    _check_margin(k, s)
    return torch.sum((a * y - k * a) ** s)


def minkowski_distance(a, b, p: float) -> torch.Tensor:
    x = _as_tensor(a)
    y = _as_tensor(b)
    if x.shape != y.shape:
        raise ValueError(f"embedding shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    if not p > 0:
        raise ValueError("p must be > 0")
    return torch.sum(torch.abs(x - y) ** p) ** (1.0 / p)


def imper_loss(target_emb, probe_emb, p: float = 2.0) -> torch.Tensor:
    """Distance to the impersonation target's embedding."""
    return minkowski_distance(target_emb, probe_emb, p)


def evasion_loss(registered_emb, probe_emb, p: float = 2.0) -> torch.Tensor:
    """Negated distance to the registered embedding."""
    return -minkowski_distance(registered_emb, probe_emb, p)


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar record of one optimization step's objective."""

    detection_term: float
    matcher_term: float
    total: float
    alpha: float


def total_loss(mode: str, detection_term, matcher_term, alpha: float) -> LossBreakdown:
    """Combine the two terms as alpha * detection + matcher.

    The total is recomputed from the floated terms with the same
    arithmetic, so LossBreakdown.total == alpha * detection_term +
    matcher_term holds exactly.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if not alpha >= 0.0:
        raise ValueError("alpha must be >= 0")
    d = float(detection_term)
    m = float(matcher_term)
    return LossBreakdown(
        detection_term=d, matcher_term=m, total=alpha * d + m, alpha=float(alpha)
    )
