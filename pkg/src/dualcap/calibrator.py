"""Per-view offset initialization and refinement against the scene."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .alignment import CorrespondenceSet, procrustes_yaw
from .errors import NumericalError, SizeMismatch, TooFewRegistrations
from .geometry import Pose, SimilarityTransform, Trajectory
from .losses import CalibrationProblem, LossBreakdown, LossWeights, OffsetParams
from .optim import AdamConfig, adam

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    adam: AdamConfig = field(default_factory=AdamConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    check_gradients: bool = False
    # Each round crops the scene cloud to the neighbourhood of every view's
    # placed local cloud, then runs Adam from the previous round's result.
    # An empty tuple evaluates the Chamfer term against the full scene cloud.
    crop_margins: tuple = (0.5, 0.1)


@dataclass
class CalibrationResult:
    offsets: OffsetParams
    history: list
    breakdown: LossBreakdown
    iterations: int
    view_histories: Optional[list] = None


def initialize_offsets(sai_traj: Trajectory, registered: Sequence, with_scale: bool = False
                       ) -> SimilarityTransform:
    """Yaw-constrained fit of native camera centers to registered ones.

    ``registered`` is a sparse list of ``(frame_index, Pose)`` in the scene
    frame.  Scale stays 1 unless ``with_scale`` is set.
    """
    if len(registered) < 2:
        raise TooFewRegistrations(f"{len(registered)} registered frames, need at least 2")
    frames = np.array([int(f) for f, _ in registered])
    if frames.min() < 0 or frames.max() >= len(sai_traj):
        raise SizeMismatch("registered frame outside the trajectory")
    src = sai_traj.centers[frames]
    tgt = np.stack([p.center for _, p in registered])
    return procrustes_yaw(CorrespondenceSet(src, tgt), with_scale=with_scale)


def numeric_gradient(problem: CalibrationProblem, offsets: OffsetParams, weights: LossWeights,
                     step: float = 1e-6) -> np.ndarray:
    x0 = offsets.to_vector()
    g = np.zeros_like(x0)
    for i in range(len(x0)):
        xp, xm = x0.copy(), x0.copy()
        xp[i] += step
        xm[i] -= step
        fp = problem.evaluate(OffsetParams.from_vector(xp), weights)[0].total
        fm = problem.evaluate(OffsetParams.from_vector(xm), weights)[0].total
        g[i] = (fp - fm) / (2 * step)
    return g.reshape(-1, 4)


def _run(problem: CalibrationProblem, init: OffsetParams, cfg: OptimizerConfig):
    weights = cfg.weights
    x = init.to_vector()
    history, iters, res = [], 0, None
    rounds = cfg.crop_margins or (None,)
    for margin in rounds:
        prob = problem if margin is None else problem.cropped(OffsetParams.from_vector(x), margin)

        def fun(z, prob=prob):
            b, g = prob.evaluate(OffsetParams.from_vector(z), weights, grad=True)
            return b.total, g.reshape(-1)

        if cfg.check_gradients:
            _, g = prob.evaluate(OffsetParams.from_vector(x), weights, grad=True)
            fd = numeric_gradient(prob, OffsetParams.from_vector(x), weights)
            rel = np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)
            if rel > 1e-4:
                raise NumericalError(f"analytic gradient disagrees with finite differences ({rel:.2e})")
            log.info("gradient check passed (relative error %.2e)", rel)
        res = adam(fun, x, cfg.adam)
        x = res.x
        history.extend(res.history)
        iters += res.iterations
        final = prob
    return OffsetParams.from_vector(x).wrapped(), history, iters, final


def calibrate(problem: CalibrationProblem, init: OffsetParams,
              cfg: Optional[OptimizerConfig] = None) -> CalibrationResult:
    """Refine per-view offsets by minimizing the composite loss with Adam.

    Without an active track term the views share nothing, so each view is
    optimized on its own; the result is then identical to separate
    single-view runs.
    """
    cfg = cfg or OptimizerConfig()
    if len(init) != problem.n_views:
        raise SizeMismatch(f"{len(init)} initial offsets for {problem.n_views} views")
    coupled = problem.has_track() and cfg.weights.track > 0
    if coupled or problem.n_views == 1:
        offsets, history, iters, final = _run(problem, init, cfg)
        breakdown = final.evaluate(offsets, cfg.weights)[0]
        return CalibrationResult(offsets, history, breakdown, iters)

    yaws, ts, hists, iters, finals = [], [], [], 0, []
    for v in range(problem.n_views):
        sub = problem.subproblem(v)
        off_v, hist, it, final = _run(sub, OffsetParams(init.yaw[v:v + 1], init.translation[v:v + 1]),
                                      cfg)
        yaws.append(off_v.yaw[0])
        ts.append(off_v.translation[0])
        hists.append(hist)
        finals.append(final.global_clouds[0])
        iters = max(iters, it)
    offsets = OffsetParams(yaws, ts)
    n = max(len(h) for h in hists)
    history = [float(sum(h[min(i, len(h) - 1)] for h in hists)) for i in range(n)]
    final = CalibrationProblem(problem.trajs, problem.tracks, problem.clouds, finals,
                               problem.landmark_obs, problem.landmarks)
    breakdown = final.evaluate(offsets, cfg.weights)[0]
    return CalibrationResult(offsets, history, breakdown, iters, view_histories=hists)


def registered_from_trajectory(traj: Trajectory, frames) -> list:
    return [(int(f), traj[int(f)]) for f in frames]
