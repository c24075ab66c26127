"""Projected gradient descent over a box of designs."""
from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionMismatch, EvaluationFailure, SolverFailure

log = logging.getLogger(__name__)


class Termination(enum.Enum):
    CONVERGED = "Converged"
    MAX_ITER = "MaxIter"
    LINE_SEARCH_EXHAUSTED = "LineSearchExhausted"


@dataclass
class DesignSpace:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.lo.shape != self.hi.shape:
            raise DimensionMismatch("lo and hi differ in shape")
        if np.any(self.lo > self.hi):
            raise ValueError("lo <= hi violated")

    @property
    def dim(self) -> int:
        return self.lo.shape[0]


@dataclass
class TuneConfig:
    beta: float = 1.2
    eta: float = 1.5
    eps_rel: float = 1e-3
    eps_abs: float = 1e-3
    p_hat: float = 0.0
    max_iter: int = 200
    max_shrinks: int = 50

    def __post_init__(self):
        if self.beta <= 1 or self.eta <= 1:
            raise ValueError("beta and eta must exceed 1")
        if self.eps_rel <= 0 or self.eps_abs <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class TraceEntry:
    omega: np.ndarray
    p: float
    alpha: float
    accepted: bool
    grad_norm: float


@dataclass
class TuneTrace:
    iterations: list[TraceEntry] = field(default_factory=list)
    terminated_by: Termination | None = None

    @property
    def accepted(self) -> list[TraceEntry]:
        return [e for e in self.iterations if e.accepted]

    @property
    def n_accepted(self) -> int:
        """Accepted steps, not counting the initial design."""
        return len(self.accepted) - 1

    @property
    def best(self) -> TraceEntry:
        return self.accepted[-1]

    def write_csv(self, path):
        p = self.iterations[0].omega.shape[0] if self.iterations else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "p", "alpha", "accepted", "grad_norm"] + [f"omega{i}" for i in range(p)])
            for k, e in enumerate(self.iterations):
                w.writerow([k, repr(e.p), repr(e.alpha), int(e.accepted), repr(e.grad_norm)]
                           + [repr(float(v)) for v in e.omega])


def project_box(omega, space: DesignSpace) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    if omega.shape != space.lo.shape:
        raise DimensionMismatch(f"omega has shape {omega.shape}, design space {space.lo.shape}")
    return np.minimum(np.maximum(omega, space.lo), space.hi)


def _converged(omega, grad, alpha, space, cfg) -> bool:
    step = omega - project_box(omega - alpha * grad, space)
    return np.linalg.norm(step) <= cfg.eps_rel * np.linalg.norm(omega) + cfg.eps_abs


def pgd(evaluate: Callable[[np.ndarray], tuple[float, np.ndarray]], omega0, space: DesignSpace,
        cfg: TuneConfig | None = None, callback: Callable[[TraceEntry], None] | None = None) -> TuneTrace:
    """Minimize ``evaluate`` over the box with a step-growing/shrinking line search.

    ``evaluate`` returns ``(p, grad)``. Raising :class:`EvaluationFailure` or
    :class:`SolverFailure` at a tentative design counts as a rejected step.
    """
    cfg = cfg or TuneConfig()
    trace = TuneTrace()

    def record(omega, p, alpha, accepted, grad):
        e = TraceEntry(omega.copy(), float(p), float(alpha), accepted,
                       float(np.linalg.norm(grad)) if grad is not None else float("nan"))
        trace.iterations.append(e)
        if callback is not None:
            callback(e)

    omega = project_box(omega0, space)
    p, grad = evaluate(omega)
    grad = np.asarray(grad, dtype=np.float64)
    gn2 = float(grad @ grad)
    alpha = 1.0 if gn2 == 0.0 else min((p - cfg.p_hat) / gn2, 1.0)
    if alpha <= 0:
        # p_hat above the current objective; fall back to the clip value
        alpha = 1.0
    record(omega, p, alpha, True, grad)

    if gn2 == 0.0:
        trace.terminated_by = Termination.CONVERGED
        return trace

    # repeat-until: the stopping test follows each accepted step
    k = 0
    while True:
        shrinks = 0
        while True:
            cand = project_box(omega - alpha * grad, space)
            try:
                p_new, g_new = evaluate(cand)
                ok = np.isfinite(p_new) and p_new < p
            except (EvaluationFailure, SolverFailure) as exc:
                log.debug("evaluation failed at tentative design: %s", exc)
                p_new, g_new, ok = float("nan"), None, False
            if ok:
                omega, p, grad = cand, float(p_new), np.asarray(g_new, dtype=np.float64)
                alpha *= cfg.beta
                record(omega, p, alpha, True, grad)
                break
            record(cand, p_new, alpha, False, g_new)
            alpha /= cfg.eta
            shrinks += 1
            if shrinks >= cfg.max_shrinks:
                trace.terminated_by = Termination.LINE_SEARCH_EXHAUSTED
                return trace
        k += 1
        log.info("iter %d  p=%.6g  alpha=%.3g", k, p, alpha)
        if _converged(omega, grad, alpha, space, cfg):
            trace.terminated_by = Termination.CONVERGED
            break
        if k >= cfg.max_iter:
            trace.terminated_by = Termination.MAX_ITER
            break
    return trace
