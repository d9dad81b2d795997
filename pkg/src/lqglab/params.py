"""Coupled constant family shared by every solver and sampler.

A single ``gamma`` in (0, 2) determines the whole family:

    kappa = 16 / gamma**2
    Q     = 2/gamma + gamma/2
    a_sq  = 2 / sin(4*pi/kappa)      variance rate of each tree coordinate
    corr  = -cos(4*pi/kappa)         correlation of the two tree coordinates

The hitting-order experiments live in the space-filling regime
gamma in (0, sqrt(2)) -- i.e. kappa > 8 -- where ``a_sq > 0`` and
``corr`` lies strictly between -1 and 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


@dataclass(frozen=True)
class LqgParams:
    """Derived constants for one value of the coupling ``gamma``."""

    gamma: float
    kappa: float = field(init=False)
    Q: float = field(init=False)
    a_sq: float = field(init=False)
    corr: float = field(init=False)

    def __post_init__(self) -> None:
        g = float(self.gamma)
        if not 0.0 < g < 2.0:
            raise ValueError(f"gamma must lie in (0, 2), got {g}")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "kappa", 16.0 / g**2)
        object.__setattr__(self, "Q", 2.0 / g + g / 2.0)
        angle = 4.0 * math.pi / self.kappa  # = pi*gamma^2/4
        s = math.sin(angle)
        if s == 0.0:
            raise ValueError(f"sin(4*pi/kappa) vanishes at gamma={g}")
        object.__setattr__(self, "a_sq", 2.0 / s)
        object.__setattr__(self, "corr", -math.cos(angle))

    @classmethod
    def from_gamma(cls, gamma: float) -> "LqgParams":
        return cls(gamma)

    @classmethod
    def from_kappa(cls, kappa: float) -> "LqgParams":
        if kappa <= 4.0:
            raise ValueError(f"kappa must exceed 4 (gamma < 2), got {kappa}")
        return cls(4.0 / math.sqrt(kappa))

    def delta(self, alpha: float) -> float:
        """Conformal weight alpha/2 * (Q - alpha/2)."""
        return 0.5 * alpha * (self.Q - 0.5 * alpha)

    @property
    def sum_var_rate(self) -> float:
        """Per-unit-time variance of the coordinate sum X + Y."""
        return 2.0 * self.a_sq * (1.0 + self.corr)

    @property
    def diff_var_rate(self) -> float:
        """Per-unit-time variance of the coordinate difference X - Y."""
        return 2.0 * self.a_sq * (1.0 - self.corr)

    def as_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "kappa": self.kappa,
            "Q": self.Q,
            "a_sq": self.a_sq,
            "corr": self.corr,
        }
