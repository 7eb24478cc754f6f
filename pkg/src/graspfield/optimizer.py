"""Multi-start gradient ascent on grasp positions.

Every candidate keeps its own Adam moments on its position; the approach
direction stays fixed. The learning rate decays geometrically per step and
positions are clamped to a slightly inflated workspace box.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .field import EncodedObservation, ModelParams, grasp_theta

OBJECTIVES = ("one_view", "three_views")


@dataclass(frozen=True)
class OptimizerRunConfig:
    n_candidates: int = 2 ** 13
    max_iters: int = 16
    lr0: float = 0.05
    decay: float = 0.8
    snapshot_iters: tuple = (8, 12, 16)
    objective: str = "three_views"
    fixed_direction: tuple = (0.0, 0.0, -1.0)
    seed: int = 0
    box_inflation: float = 0.1
    chunk: int = 1024

    def __post_init__(self):
        object.__setattr__(self, "snapshot_iters", tuple(int(i) for i in self.snapshot_iters))
        object.__setattr__(self, "fixed_direction", tuple(float(v) for v in self.fixed_direction))
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be at least 1")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if any(i < 1 or i > self.max_iters for i in self.snapshot_iters):
            raise ValueError("snapshot iterations must lie in [1, max_iters]")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class CandidateTrajectory:
    index: int
    positions: dict
    scores: dict
    final_rank: int = -1

    @property
    def final_score(self) -> float:
        return self.scores[max(self.scores)]


@dataclass
class OptimizationResult:
    trajectories: list
    positions: dict
    scores: dict
    valid: np.ndarray
    config: OptimizerRunConfig

    def top(self, k: int = 5, at_iter: int | None = None) -> list[CandidateTrajectory]:
        return top_k(self.trajectories, k, at_iter)


def lr_at(t: int, lr0: float, decay: float) -> float:
    return lr0 * decay ** t


def objective(x, observations: Sequence[EncodedObservation], kind: str, params: ModelParams,
              direction=(0.0, 0.0, -1.0), theta=grasp_theta) -> Tensor:
    """Grasp score summed over the selected views; shape (N,)."""
    if kind == "one_view":
        if len(observations) < 1:
            raise ValueError("one_view needs at least one observation")
        views = observations[:1]
    elif kind == "three_views":
        if len(observations) != 3:
            raise ValueError(f"three_views needs exactly 3 observations, got {len(observations)}")
        views = observations
    else:
        raise ValueError(f"unknown objective {kind!r}")
    d = np.asarray(direction, dtype=np.float64)
    total = None
    for obs in views:
        s = theta(x, d, obs, params)
        total = s if total is None else total + s
    return total


def _evaluate(score_fn, x: np.ndarray, want_grad: bool, dropped: np.ndarray):
    """Scores and ascent gradients for each row of ``x``; bad rows get flagged."""
    n = len(x)
    scores = np.zeros(n, dtype=np.float64)
    grads = np.zeros_like(x)

    def run(lo, hi):
        xt = Tensor(x[lo:hi], requires_grad=want_grad)
        try:
            if want_grad:
                with ad.Tape() as tape:
                    tape.watch(xt)
                    y = score_fn(xt)
                    total = y.sum()
                grads[lo:hi] = tape.gradient(total, [xt])[0]
            else:
                y = score_fn(xt)
            scores[lo:hi] = y.data
        except ad.NonFiniteError:
            if hi - lo == 1:
                dropped[lo] = True
                return
            mid = (lo + hi) // 2
            run(lo, mid)
            run(mid, hi)

    return run, scores, grads


def optimize(score_fn: Callable[[Tensor], Tensor], box, config: OptimizerRunConfig,
             init: np.ndarray | None = None) -> OptimizationResult:
    """Maximise ``score_fn`` from ``config.n_candidates`` uniform starts in ``box``.

    Args:
        score_fn: maps (N, 3) positions to (N,) differentiable scores; rows
            must not interact.
        box: ``(lo, hi)`` of the sampling volume.
        init: optional explicit starting positions.

    Returns:
        Trajectories sorted by final score, plus per-snapshot arrays.
    """
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    rng = np.random.default_rng(config.seed)
    x = rng.uniform(lo, hi, size=(config.n_candidates, 3)) if init is None else np.array(init)
    x = x.astype(ad.get_dtype())
    pad = 0.5 * config.box_inflation * (hi - lo)
    clo, chi = (lo - pad).astype(x.dtype), (hi + pad).astype(x.dtype)
    dropped = np.zeros(len(x), dtype=bool)
    state = ad.AdamState(config.lr0)
    snaps = set(config.snapshot_iters)
    positions, scores = {}, {}
    for t in range(config.max_iters + 1):
        want_grad = t < config.max_iters
        run, s, g = _evaluate(score_fn, x, want_grad, dropped)
        for start in range(0, len(x), config.chunk):
            run(start, min(start + config.chunk, len(x)))
        if t == 0 or t in snaps:
            positions[t] = x.copy()
            scores[t] = np.where(dropped, -np.inf, s)
        if not want_grad:
            break
        g[dropped] = 0.0
        new, state = ad.adam_step({"x": Tensor(x)}, {"x": -g.astype(x.dtype)}, state,
                                  lr=lr_at(t, config.lr0, config.decay))
        x = np.clip(new["x"].data, clo, chi)
    final = max(scores)
    valid = ~dropped
    trajs = [CandidateTrajectory(int(i), {k: positions[k][i] for k in positions},
                                 {k: float(scores[k][i]) for k in scores})
             for i in np.nonzero(valid)[0]]
    trajs = _rank(trajs, final)
    for r, tr in enumerate(trajs):
        tr.final_rank = r
    return OptimizationResult(trajs, positions, scores, valid, config)


def optimize_field(params: ModelParams, observations: Sequence[EncodedObservation], box,
                   config: OptimizerRunConfig) -> OptimizationResult:
    def score_fn(x):
        return objective(x, observations, config.objective, params, config.fixed_direction)

    return optimize(score_fn, box, config)


def _rank(trajs, at_iter):
    order = sorted(range(len(trajs)), key=lambda i: (-trajs[i].scores[at_iter], trajs[i].index))
    return [trajs[i] for i in order]


def top_k(trajectories, k: int = 5, at_iter: int | None = None) -> list[CandidateTrajectory]:
    """``k`` best candidates by score at ``at_iter`` (default: last snapshot).

    Ties break by candidate index.
    """
    if len(trajectories) < k:
        raise ValueError(f"only {len(trajectories)} candidates survive, need {k}")
    if at_iter is None:
        at_iter = max(trajectories[0].scores)
    return _rank(trajectories, at_iter)[:k]
