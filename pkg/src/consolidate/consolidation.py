"""Quadratic consolidation penalties anchoring weights to a snapshot.

Original form::

    (lam / 2) * sum_i omega_i * (w_i - w*_i)**2

Stabilized form replaces ``omega_i`` by ``omega_i / (alpha*lam*omega_i + 1)``,
so that a plain SGD step with learning rate ``alpha`` moves a weight back by
at most ``|w_i - w*_i|``, however large its importance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import NonFiniteError
from .importance import ImportanceMap
from .nn import SGD


def stabilization_factor(alpha, ewc_lambda, omega):
    """Fraction of ``w - w*`` removed by one SGD step under the stabilized penalty."""
    a = alpha * ewc_lambda * np.asarray(omega, dtype=np.float64)
    return a / (a + 1.0)


@dataclass(frozen=True, eq=False)
class ConsolidatedState:
    """Anchor weights, importances and penalty settings for the next task."""

    w_star: np.ndarray
    omega: ImportanceMap
    ewc_lambda: float = 1.0
    alpha: float = 0.001
    stabilized: bool = False
    coef: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.ewc_lambda < 0:
            raise ValueError("ewc_lambda must be >= 0")
        if self.stabilized and self.alpha <= 0:
            raise ValueError("alpha must be > 0 for the stabilized penalty")
        if self.w_star.shape != self.omega.omega.shape:
            raise ValueError("w_star and omega are not aligned")
        om = self.omega.omega
        if self.stabilized:
            om = om / (self.alpha * self.ewc_lambda * om + 1.0)
        # gradient of the penalty is coef * (w - w*)
        object.__setattr__(self, "coef", self.ewc_lambda * om)

    def save(self, directory, fingerprint=""):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.w_star.astype("<f8").tofile(directory / "w_star.bin")
        self.omega.save(directory / "omega", fingerprint)
        header = {
            "lambda": self.ewc_lambda,
            "alpha": self.alpha,
            "stabilized": self.stabilized,
            "n_params": int(self.w_star.size),
        }
        (directory / "state.json").write_text(json.dumps(header, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        header = json.loads((directory / "state.json").read_text())
        w_star = np.fromfile(directory / "w_star.bin", dtype="<f8").astype(np.float64)
        omega = ImportanceMap.load(directory / "omega")
        return cls(w_star, omega, header["lambda"], header["alpha"], header["stabilized"])


def consolidate(net, omega, ewc_lambda=1.0, alpha=0.001, stabilized=False):
    """Snapshot the current parameters as the penalty anchor."""
    return ConsolidatedState(net.params.copy(), omega, ewc_lambda, alpha, stabilized)


def penalty_value(state, w):
    d = w - state.w_star
    return 0.5 * float(np.dot(state.coef, d * d))


def penalty_gradient(state, w, out=None):
    """Gradient of :func:`penalty_value`, to be added to the task gradient.

    Under plain SGD with learning rate ``alpha`` the resulting increment is
    ``-alpha*lam*omega*(w - w*)`` (original) or
    ``-alpha*lam*omega/(alpha*lam*omega + 1)*(w - w*)`` (stabilized).
    """
    out = np.subtract(w, state.w_star, out=out)
    out *= state.coef
    return out


@dataclass
class ExplosionTrajectory:
    distances: list
    diverged: bool = False

    @property
    def ratios(self):
        d = np.asarray(self.distances)
        with np.errstate(divide="ignore", invalid="ignore"):
            return d[1:] / d[:-1]


class _Scalar:
    def __init__(self, value):
        self.params = np.array([value], dtype=np.float64)


def explosion_demo(alpha, ewc_lambda, omega, n_steps, stabilized=False, w0=1.0, w_star=0.0):
    """Track ``|w - w*|`` for a single weight under plain SGD with zero task loss.

    Overflow stops the trajectory and sets ``diverged``.
    """
    state = ConsolidatedState(
        np.array([w_star], dtype=np.float64),
        ImportanceMap(np.array([omega], dtype=np.float64), "mas"),
        ewc_lambda,
        alpha,
        stabilized,
    )
    holder = _Scalar(w0)
    opt = SGD(alpha)
    traj = ExplosionTrajectory([abs(w0 - w_star)])
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(n_steps):
            grad = penalty_gradient(state, holder.params)
            try:
                opt.step(holder, grad)
            except NonFiniteError:
                traj.diverged = True
                break
            traj.distances.append(abs(float(holder.params[0]) - w_star))
    return traj
