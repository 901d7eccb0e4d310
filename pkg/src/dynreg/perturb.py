"""Random branch scaling: the loss-driven perturbation and the shake baselines.

A perturbed branch is multiplied by ``theta = A + s * r`` in the forward pass
with ``r ~ Uniform[-R_l, R_l]``; gradients flowing back through the branch are
multiplied by an independent draw ``mu`` from the same law. At inference the
scale folds to its expectation ``A``.
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from .errors import ShapeError

Scale = Union[float, np.ndarray]


def noise_range(l: int, L: int) -> float:
    """Per-block noise half-range, growing linearly from bottom to top block."""
    if not (isinstance(l, (int, np.integer)) and isinstance(L, (int, np.integer))):
        raise TypeError("noise_range: block index and block count must be integers")
    if L < 1 or not 1 <= l <= L:
        raise ValueError(f"noise_range: need 1 <= l <= L, got l={l}, L={L}")
    return l / L


@dataclass
class PerturbUnit:
    """Perturbation state of one block.

    ``granularity`` is ``"batch"`` (one scalar per mini-batch) or ``"sample"``
    (one scale per example). With ``clamp`` set, draws are clipped to [0, 1].
    """

    A: float = 0.5
    R: float = 1.0
    l: int = 1
    granularity: str = "batch"
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    clamp: bool = False
    training: bool = True
    theta: Optional[Scale] = None
    mu: Optional[Scale] = None

    def __post_init__(self):
        if not 0.0 <= self.R <= 1.0:
            raise ValueError(f"PerturbUnit: R must lie in [0, 1], got {self.R}")
        if self.granularity not in ("batch", "sample"):
            raise ValueError(f"PerturbUnit: unknown granularity {self.granularity!r}")

    def _draw(self, s, size):
        if not self.training:
            raise RuntimeError("PerturbUnit: sampling requested in eval mode; use fold_inference")
        if s < 0:
            raise ValueError(f"PerturbUnit: dynamic factor must be >= 0, got {s}")
        if self.granularity == "sample":
            if size is None:
                raise ValueError("PerturbUnit: per-sample granularity needs a batch size")
            r = self.rng.uniform(-self.R, self.R, size=size)
        else:
            r = self.rng.uniform(-self.R, self.R)
        value = self.A + s * r
        if self.clamp:
            value = np.clip(value, 0.0, 1.0)
        return float(value) if np.ndim(value) == 0 else value

    def sample_theta(self, s: float, size: Optional[int] = None) -> Scale:
        self.theta = self._draw(s, size)
        return self.theta

    def sample_mu(self, s: float, size: Optional[int] = None) -> Scale:
        if self.theta is None:
            raise RuntimeError("PerturbUnit: sample_mu called before sample_theta")
        self.mu = self._draw(s, size)
        return self.mu

    def fold_inference(self) -> float:
        return fold_inference(self)


def sample_theta(unit: PerturbUnit, s: float, size: Optional[int] = None) -> Scale:
    return unit.sample_theta(s, size)


def sample_mu(unit: PerturbUnit, s: float, size: Optional[int] = None) -> Scale:
    return unit.sample_mu(s, size)


def fold_inference(unit: PerturbUnit) -> float:
    """Eval-mode branch scale: the expectation of theta, i.e. ``A``."""
    return float(unit.A)


# -- graph insertions ---------------------------------------------------------


def _check_same(g, kind, *nodes):
    shapes = [g.value(n).shape for n in nodes]
    if any(s != shapes[0] for s in shapes[1:]):
        raise ShapeError(f"{kind}: shape mismatch {shapes}")


def res2_forward(g, x: int, branch: int, theta: Scale, mu: Optional[Scale] = None,
                 stochastic: bool = True) -> int:
    """``x + theta * branch``; the branch gradient is scaled by ``mu``."""
    _check_same(g, "res2_forward", x, branch)
    scaled = g.scalar_mul(branch, theta, theta if mu is None else mu, stochastic=stochastic)
    return g.add(x, scaled)


def res3_forward(g, x: int, b1: int, b2: int, theta: Scale, mu: Optional[Scale] = None,
                 stochastic: bool = True) -> int:
    """``x + theta * b1 + (1 - theta) * b2`` with ``mu`` and ``1 - mu`` in backward."""
    _check_same(g, "res3_forward", x, b1, b2)
    mu = theta if mu is None else mu
    first = g.scalar_mul(b1, theta, mu, stochastic=stochastic)
    second = g.scalar_mul(b2, 1.0 - theta, 1.0 - mu, stochastic=stochastic)
    return g.add(g.add(x, first), second)


def dense_forward(g, prev: int, conv_out: int, theta: Scale, mu: Optional[Scale] = None,
                  stochastic: bool = True) -> int:
    """Concatenate ``prev`` with ``theta * conv_out`` along channels."""
    a, b = g.value(prev), g.value(conv_out)
    if a.ndim != b.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"dense_forward: spatial mismatch {a.shape} vs {b.shape}")
    scaled = g.scalar_mul(conv_out, theta, theta if mu is None else mu, stochastic=stochastic)
    return g.concat(prev, scaled)


# -- baselines ------------------------------------------------------------------


def shake_shake_scales(rng: np.random.Generator, size: Optional[int] = None) -> Tuple[Scale, Scale]:
    """Forward ``alpha`` and backward ``beta``, independent Uniform[0, 1].

    Branch one is scaled by alpha (beta in backward), branch two by 1 - alpha.
    """
    alpha = rng.uniform(0.0, 1.0, size=size)
    beta = rng.uniform(0.0, 1.0, size=size)
    if size is None:
        return float(alpha), float(beta)
    return alpha, beta


SHAKE_SHAKE_EVAL = 0.5


def shakedrop_keep_prob(l: int, L: int, p_L: float = 0.5) -> float:
    """Linear decay of the keep probability: ``1 - (l/L)(1 - p_L)``."""
    if L < 1 or not 1 <= l <= L:
        raise ValueError(f"shakedrop_keep_prob: need 1 <= l <= L, got l={l}, L={L}")
    if not 0.0 <= p_L <= 1.0:
        raise ValueError(f"shakedrop_keep_prob: p_L must lie in [0, 1], got {p_L}")
    return 1.0 - (l / L) * (1.0 - p_L)


def shakedrop_scale(l: int, L: int, p_L: float, rng: np.random.Generator,
                    size: Optional[int] = None) -> Tuple[Scale, Scale]:
    """Forward ``b + alpha - b*alpha`` and backward ``b + beta - b*beta``.

    ``b ~ Bernoulli(p_l)``, ``alpha ~ U[-1, 1]``, ``beta ~ U[0, 1]``.
    """
    p = shakedrop_keep_prob(l, L, p_L)
    b = rng.uniform(size=size) < p
    alpha = rng.uniform(-1.0, 1.0, size=size)
    beta = rng.uniform(0.0, 1.0, size=size)
    # b + alpha - b*alpha, evaluated exactly for binary b
    fwd = np.where(b, 1.0, alpha)
    bwd = np.where(b, 1.0, beta)
    if size is None:
        return float(fwd), float(bwd)
    return fwd, bwd


def shakedrop_eval_scale(l: int, L: int, p_L: float = 0.5) -> float:
    # p_l + (1 - p_l) * E[alpha], E[alpha] = 0
    return shakedrop_keep_prob(l, L, p_L)
