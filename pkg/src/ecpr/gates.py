"""Hard-concrete gates, their expected-L0 penalty and the input feature gate."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError, sigmoid


@dataclass(frozen=True)
class HardConcrete:
    """Hyper-parameters shared by a family of hard-concrete gates.

    The learnable ``log_alpha`` values live in the model's ParameterSet; this
    object only carries temperature ``beta`` and the stretch interval
    ``(gamma, zeta)``.
    """

    beta: float = 0.7
    gamma: float = -0.1
    zeta: float = 1.1

    def __post_init__(self):
        if not (self.gamma < 0.0 < 1.0 < self.zeta):
            raise ValueError(f"need gamma < 0 < 1 < zeta, got gamma={self.gamma}, zeta={self.zeta}")
        if not (0.0 < self.beta <= 1.0):
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")

    @property
    def l0_shift(self) -> float:
        return self.beta * math.log(-self.gamma / self.zeta)


@dataclass
class GateSample:
    m: np.ndarray
    s: np.ndarray
    s_bar: np.ndarray
    z: np.ndarray
    dz_dlog_alpha: np.ndarray


def hc_sample(log_alpha, hc: HardConcrete, m) -> GateSample:
    log_alpha = np.asarray(log_alpha, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if np.any(m <= 0.0) or np.any(m >= 1.0):
        raise ValueError("hard-concrete noise m must lie strictly inside (0, 1)")
    s = np.asarray(sigmoid((np.log(m) - np.log1p(-m) + log_alpha) / hc.beta))
    s_bar = s * (hc.zeta - hc.gamma) + hc.gamma
    z = np.minimum(1.0, np.maximum(s_bar, 0.0))
    inside = (s_bar > 0.0) & (s_bar < 1.0)
    dz = np.where(inside, (hc.zeta - hc.gamma) * s * (1.0 - s) / hc.beta, 0.0)
    return GateSample(m=m, s=s, s_bar=s_bar, z=z, dz_dlog_alpha=dz)


def hc_expected_l0(log_alpha, hc: HardConcrete):
    """P(z != 0) for each gate."""
    return sigmoid(np.asarray(log_alpha, dtype=np.float64) - hc.l0_shift)


def hc_expected_l0_grad(log_alpha, hc: HardConcrete) -> np.ndarray:
    p = np.asarray(hc_expected_l0(log_alpha, hc))
    return p * (1.0 - p)


def hc_test_gate(log_alpha, hc: HardConcrete):
    """Noise-free gate value used at inference."""
    s = sigmoid(np.asarray(log_alpha, dtype=np.float64))
    return np.minimum(1.0, np.maximum(0.0, s * (hc.zeta - hc.gamma) + hc.gamma))


def hc_prob_zero(log_alpha, hc: HardConcrete):
    """Analytic P(z = 0), i.e. P(s_bar <= 0)."""
    t = math.log(-hc.gamma) - math.log(hc.zeta)
    return 1.0 - sigmoid(np.asarray(log_alpha, dtype=np.float64) - hc.beta * t)


def hc_prob_one(log_alpha, hc: HardConcrete):
    """Analytic P(z = 1), i.e. P(s_bar >= 1)."""
    t = math.log(1.0 - hc.gamma) - math.log(hc.zeta - 1.0)
    return sigmoid(np.asarray(log_alpha, dtype=np.float64) - hc.beta * t)


def feature_gate(E: np.ndarray, Wg: np.ndarray):
    """``E * sigmoid(E @ Wg)`` row-wise; returns ``(gated, gate_values)``."""
    E = np.asarray(E, dtype=np.float64)
    single = E.ndim == 1
    if single:
        E = E.reshape(1, -1)
    if Wg.shape != (E.shape[1], E.shape[1]):
        raise DimensionError(f"feature_gate: E has width {E.shape[1]}, Wg has shape {Wg.shape}")
    g = np.asarray(sigmoid(E @ Wg))
    out = E * g
    return (out[0], g[0]) if single else (out, g)


def feature_gate_backward(E: np.ndarray, Wg: np.ndarray, g: np.ndarray, dout: np.ndarray):
    """Returns ``(dE, dWg)``."""
    dpre = dout * E * g * (1.0 - g)
    return dout * g + dpre @ Wg.T, E.T @ dpre
