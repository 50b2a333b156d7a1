"""Adam with global-norm gradient clipping and best-so-far selection."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NonFiniteLoss, SpecInvalid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    max_iters: int = 2000
    tol: float = 1e-8
    window: int = 20
    lr_final: float = 1.0  # lr multiplier reached at max_iters (exponential decay)
    min_iters: int = 0  # no convergence test before this many iterations

    def __post_init__(self):
        if not self.lr > 0:
            raise SpecInvalid("learning rate must be positive")
        if not self.clip_norm > 0:
            raise SpecInvalid("clip norm must be positive")
        if self.max_iters < 1:
            raise SpecInvalid("max_iters must be at least 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise SpecInvalid("Adam betas must lie in [0, 1)")
        if not 0 < self.lr_final <= 1:
            raise SpecInvalid("lr_final must lie in (0, 1]")
        if self.min_iters < 0:
            raise SpecInvalid("min_iters must be non-negative")


@dataclass
class OptimResult:
    x: np.ndarray
    loss: float
    history: list = field(default_factory=list)
    best_history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def clip_by_norm(g: np.ndarray, max_norm: float) -> np.ndarray:
    n = float(np.linalg.norm(g))
    if n > max_norm:
        return g * (max_norm / n)
    return g


def adam(fun: Callable, x0, cfg: AdamConfig, mask: Optional[np.ndarray] = None,
         callback: Optional[Callable] = None) -> OptimResult:
    """Minimize ``fun`` where ``fun(x) -> (loss, grad)``.

    ``mask`` freezes coordinates (False entries never move).  The returned
    iterate is the lowest-loss one seen.  Iteration stops after ``max_iters``
    or once the best loss improved by less than ``tol`` (relative) over the
    last ``window`` iterations; that test starts at ``min_iters``.
    """
    x = np.array(x0, dtype=float)
    decay = cfg.lr_final ** (1.0 / max(cfg.max_iters - 1, 1))
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    keep = np.ones_like(x, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    best_x, best = x.copy(), np.inf
    history, best_hist = [], []
    converged = False
    it = 0
    for it in range(cfg.max_iters):
        loss, g = fun(x)
        if not np.isfinite(loss) or not np.all(np.isfinite(g)):
            raise NonFiniteLoss(f"non-finite loss at iteration {it}", last_params=best_x)
        if loss < best:
            best, best_x = loss, x.copy()
        history.append(float(loss))
        best_hist.append(float(best))
        if callback is not None:
            callback(it, x, loss)
        if best == 0.0:
            converged = True
            break
        if it >= max(cfg.window, cfg.min_iters):
            old = best_hist[it - cfg.window]
            if old - best <= cfg.tol * abs(old):
                converged = True
                break
        g = clip_by_norm(np.where(keep, g, 0.0), cfg.clip_norm)
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1 ** (it + 1))
        vhat = v / (1 - cfg.beta2 ** (it + 1))
        lr = cfg.lr * decay ** it
        x = x - np.where(keep, lr * mhat / (np.sqrt(vhat) + cfg.eps), 0.0)
    log.debug("adam stopped after %d iterations, best loss %.6g", it + 1, best)
    return OptimResult(best_x, float(best), history, best_hist, it + 1, converged)
