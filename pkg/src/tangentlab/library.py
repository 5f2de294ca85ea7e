"""Reference models shared by the tests, the acceptance suite and the CLI."""

from __future__ import annotations

import numpy as np

from .models import (
    AccessibleKernel,
    AfterFirstJump,
    ContinuousPart,
    CountLinear,
    DiscreteLaw,
    ElementaryIntegrand,
    JumpCountFeedback,
    MartingaleModel,
    QlcIntensity,
    TanhFeedback,
)
from .paths import TimeChange

__all__ = [
    "zero_model",
    "brownian",
    "compensated_poisson",
    "mixed_2d",
    "predictable_atom_model",
    "state_dependent_poisson",
    "feedback_diffusion",
    "history_kernel_model",
    "jump_dependent_mixed",
    "scaled_marks",
    "MODELS",
]


def zero_model(dim: int = 1, horizon: float = 1.0) -> MartingaleModel:
    return MartingaleModel(dim, horizon, name="zero")


def brownian(dim: int = 1, horizon: float = 1.0, sigma: float = 1.0) -> MartingaleModel:
    itg = ElementaryIntegrand.constant(horizon, sigma * np.eye(dim))
    return MartingaleModel(dim, horizon, continuous=ContinuousPart(itg), name="brownian")


def compensated_poisson(rate: float = 1.0, horizon: float = 1.0, mark=1.0, multiplier=None) -> MartingaleModel:
    mark = np.atleast_1d(np.asarray(mark, dtype=float))
    q = QlcIntensity.constant_rates(horizon, mark[None], [rate], multiplier)
    return MartingaleModel(mark.size, horizon, qlc=q, name=f"poisson-{rate:g}")


def mixed_2d(horizon: float = 1.0) -> MartingaleModel:
    """Brownian + two-mark Poisson + one Rademacher accessible jump in R^2."""
    itg = ElementaryIntegrand.constant(horizon, np.array([[1.0, 0.0], [0.3, 0.8]]))
    q = QlcIntensity.constant_rates(horizon, [[1.0, 0.0], [-0.5, 1.0]], [1.0, 0.7])
    a = AccessibleKernel([0.5 * horizon], [DiscreteLaw([[1.0, 1.0], [-1.0, -1.0]], [0.5, 0.5])])
    return MartingaleModel(2, horizon, continuous=ContinuousPart(itg), qlc=q, accessible=a, name="mixed-2d")


def predictable_atom_model(horizon: float = 1.0) -> MartingaleModel:
    """Compensated Poisson with one Rademacher jump at the midpoint (deterministic characteristics)."""
    q = QlcIntensity.constant_rates(horizon, [[1.0]], [1.0])
    a = AccessibleKernel([0.5 * horizon], [DiscreteLaw.rademacher()])
    return MartingaleModel(1, horizon, qlc=q, accessible=a, name="poisson+atom")


def state_dependent_poisson(factor: float = 2.0, rate: float = 1.0, horizon: float = 1.0) -> MartingaleModel:
    """Poisson whose intensity is multiplied by ``factor`` after its first jump."""
    q = QlcIntensity.constant_rates(horizon, [[1.0]], [rate], AfterFirstJump(factor))
    return MartingaleModel(1, horizon, qlc=q, name="poisson-self-exciting")


def feedback_diffusion(horizon: float = 1.0) -> MartingaleModel:
    """Diffusion whose volatility on each of 8 intervals depends on the current value, with a clock."""
    mesh = np.linspace(0.0, horizon, 9)
    mats = np.ones((8, 1, 1))
    tc = TimeChange(np.array([0.0, 0.5 * horizon, horizon]), np.array([0.0, 0.25 * horizon, 1.25 * horizon]))
    itg = ElementaryIntegrand(mesh, mats, feedback=TanhFeedback(0.6, (1.0,)))
    return MartingaleModel(1, horizon, continuous=ContinuousPart(itg, tc), name="feedback-diffusion")


def history_kernel_model(horizon: float = 1.0) -> MartingaleModel:
    """Three accessible jumps; the size of each depends on the sign of the previous one."""
    r = DiscreteLaw.rademacher()
    big = DiscreteLaw([[2.0], [-2.0]], [0.5, 0.5])
    skew = DiscreteLaw([[3.0], [-1.0]], [0.25, 0.75])

    def third(history):
        return big if history[-1, 0] > 0 else skew

    a = AccessibleKernel([0.25 * horizon, 0.5 * horizon, 0.75 * horizon], [r, {((1.0,),): big, ((-1.0,),): skew}, third])
    return MartingaleModel(1, horizon, accessible=a, name="history-kernel")


def jump_dependent_mixed(horizon: float = 1.0) -> MartingaleModel:
    """State-dependent mixed model in R^2: every part reacts to the history."""
    mesh = np.linspace(0.0, horizon, 5)
    mats = np.broadcast_to(np.array([[0.8, 0.0], [0.2, 0.6]]), (4, 2, 2)).copy()
    itg = ElementaryIntegrand(mesh, mats, feedback=JumpCountFeedback(0.5, cap=2))
    q = QlcIntensity.constant_rates(horizon, [[1.0, 0.0], [0.0, -1.0]], [1.0, 0.5], CountLinear(0.5, cap=4))
    r = DiscreteLaw([[0.5, 0.5], [-0.5, -0.5]], [0.5, 0.5])
    wide = DiscreteLaw([[1.0, 0.0], [-1.0, 0.0]], [0.5, 0.5])
    a = AccessibleKernel([0.3 * horizon, 0.7 * horizon], [r, {((0.5, 0.5),): wide, None: r}])
    return MartingaleModel(2, horizon, continuous=ContinuousPart(itg), qlc=q, accessible=a, name="jump-dependent-mixed")


def scaled_marks(model: MartingaleModel, c: float) -> MartingaleModel:
    """The q.l.c. part of ``model`` with every mark multiplied by ``c``."""
    q = model.qlc
    return MartingaleModel(model.dim, model.horizon, qlc=QlcIntensity(c * q.marks, q.breakpoints, q.multiplier), name=f"{model.name}×{c:g}")


MODELS = {
    "zero": zero_model,
    "brownian": brownian,
    "poisson": compensated_poisson,
    "mixed-2d": mixed_2d,
    "poisson+atom": predictable_atom_model,
    "poisson-self-exciting": state_dependent_poisson,
    "feedback-diffusion": feedback_diffusion,
    "history-kernel": history_kernel_model,
    "jump-dependent-mixed": jump_dependent_mixed,
}
