"""Estimation problem representation: variables, Gaussian factors, and the
max-mixture multi-hypothesis landmark factor.

Residual convention (shared by every factor): the whitened error is
``L @ log(z * h(x)^-1)`` where ``z`` is the measurement, ``h`` the
prediction, and ``L`` the upper Cholesky factor of the information matrix
(``L.T @ L = info``).  Jacobians are taken with respect to the left
perturbation ``exp(delta) * x`` of each variable, in the global
[rot|trans] twist ordering.

Factors and values are immutable during evaluation; all residual and
linearization calls are pure.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import pose_algebra as pa
from .pose_algebra import Pose3


class VariableKind(enum.IntEnum):
    ROBOT = 0
    LANDMARK = 1


@dataclass(frozen=True, order=True)
class VariableKey:
    kind: VariableKind
    index: int

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("variable index must be nonnegative")

    def __repr__(self):
        prefix = "x" if self.kind == VariableKind.ROBOT else "l"
        return f"{prefix}{self.index}"


def robot(index: int) -> VariableKey:
    return VariableKey(VariableKind.ROBOT, index)


def landmark(index: int) -> VariableKey:
    return VariableKey(VariableKind.LANDMARK, index)


class MissingVariableError(KeyError):
    """A factor referenced a variable with no value assigned."""


class GraphValues:
    """Ordered map from VariableKey to Pose3.

    Insertion order is preserved and fixes the variable ordering used by
    the solver, which keeps floating-point summation deterministic.
    """

    def __init__(self, items=None):
        self._data: dict[VariableKey, Pose3] = {}
        if items is not None:
            for k, v in items:
                self[k] = v

    def __getitem__(self, key: VariableKey) -> Pose3:
        try:
            return self._data[key]
        except KeyError:
            raise MissingVariableError(f"no value for variable {key}") from None

    def __setitem__(self, key: VariableKey, pose: Pose3):
        if not isinstance(pose, Pose3):
            raise TypeError("values must be Pose3")
        self._data[key] = pose

    def __contains__(self, key) -> bool:
        return key in self._data

    def __len__(self):
        return len(self._data)

    def __iter__(self):
        return iter(self._data)

    def keys(self):
        return self._data.keys()

    def items(self):
        return self._data.items()

    def copy(self) -> "GraphValues":
        out = GraphValues()
        out._data = dict(self._data)
        return out


def _validate_information(info) -> np.ndarray:
    info = np.asarray(info, dtype=np.float64)
    if info.shape != (6, 6):
        raise ValueError("information matrix must be 6x6")
    if not np.allclose(info, info.T, atol=1e-9):
        raise ValueError("information matrix must be symmetric")
    info = 0.5 * (info + info.T)
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise ValueError("information matrix must be positive-definite") from None
    info.flags.writeable = False
    return info


def _whitener(info: np.ndarray) -> np.ndarray:
    # upper-triangular L with L.T @ L = info
    return np.linalg.cholesky(info).T


def information_from_sigmas(sigma_rot: float, sigma_trans: float, floor: float = 1e-6):
    """Diagonal information diag(1/sigma^2) in [rot|trans] ordering.

    Sigmas are floored to keep exact-measurement configs (sigma = 0)
    solvable with finite information.
    """
    sr = max(float(sigma_rot), floor)
    st = max(float(sigma_trans), floor)
    return np.diag([1.0 / sr**2] * 3 + [1.0 / st**2] * 3)


@dataclass(frozen=True, eq=False)
class Linearization:
    """Whitened residual plus one 6x6 Jacobian block per connected variable."""

    keys: tuple
    jacobians: tuple
    residual: np.ndarray
    offset: float = 0.0
    active_index: int | None = None


def _between_error(z: Pose3, x_from: Pose3, x_to: Pose3) -> np.ndarray:
    # log(z * (x_from^-1 x_to)^-1) = log(z * x_to^-1 * x_from)
    return pa.log(pa.compose(pa.compose(z, pa.inverse(x_to)), x_from))


def _between_jacobians(r: np.ndarray, x_from: Pose3):
    # d r / d(left perturbation): J_from = Jr^-1(r) Ad(x_from^-1), J_to = -J_from
    x_from_inv = pa.inverse(x_from)
    j_from = pa.se3_right_jacobian_inverse(r) @ pa.se3_adjoint(
        x_from_inv.quat, x_from_inv.trans
    )
    return j_from, -j_from


@dataclass(frozen=True, eq=False)
class PriorFactor:
    """Gaussian prior anchoring one pose (gauge fixing)."""

    key: VariableKey
    prior: Pose3
    information: np.ndarray
    sqrt_information: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        info = _validate_information(self.information)
        object.__setattr__(self, "information", info)
        object.__setattr__(self, "sqrt_information", _whitener(info))

    @property
    def keys(self):
        return (self.key,)

    def residual(self, values: GraphValues) -> np.ndarray:
        x = values[self.key]
        return self.sqrt_information @ pa.log(pa.compose(self.prior, pa.inverse(x)))

    def linearize(self, values: GraphValues) -> Linearization:
        x = values[self.key]
        r = pa.log(pa.compose(self.prior, pa.inverse(x)))
        jac = -self.sqrt_information @ pa.se3_right_jacobian_inverse(r)
        return Linearization(
            keys=(self.key,), jacobians=(jac,), residual=self.sqrt_information @ r
        )


@dataclass(frozen=True, eq=False)
class OdometryFactor:
    """Gaussian relative-pose constraint z ~ x_from^-1 * x_to.

    Typically connects consecutive robot poses; any two distinct
    variables are accepted, which also covers plain Gaussian
    robot-to-landmark edges.
    """

    key_from: VariableKey
    key_to: VariableKey
    measurement: Pose3
    information: np.ndarray
    sqrt_information: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.key_from == self.key_to:
            raise ValueError("odometry factor endpoints must be distinct")
        info = _validate_information(self.information)
        object.__setattr__(self, "information", info)
        object.__setattr__(self, "sqrt_information", _whitener(info))

    @property
    def keys(self):
        return (self.key_from, self.key_to)

    def residual(self, values: GraphValues) -> np.ndarray:
        r = _between_error(self.measurement, values[self.key_from], values[self.key_to])
        return self.sqrt_information @ r

    def linearize(self, values: GraphValues) -> Linearization:
        x_from = values[self.key_from]
        r = _between_error(self.measurement, x_from, values[self.key_to])
        j_from, j_to = _between_jacobians(r, x_from)
        L = self.sqrt_information
        return Linearization(
            keys=(self.key_from, self.key_to),
            jacobians=(L @ j_from, L @ j_to),
            residual=L @ r,
        )


@dataclass(frozen=True, eq=False)
class MaxMixtureFactor:
    """Multi-hypothesis landmark factor.

    The N measurement components share one information matrix; at any
    evaluation point only the most likely component (max of the weighted
    Gaussian mixture) contributes to the error and the linearization.
    The per-component constant is stored relative to the uniform-weight
    baseline, ``-log(N * w_j)``, so it is exactly zero for uniform
    weights.
    """

    robot_key: VariableKey
    landmark_key: VariableKey
    measurements: tuple
    information: np.ndarray
    weights: np.ndarray = None
    sqrt_information: np.ndarray = field(init=False, repr=False)
    weight_offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.robot_key == self.landmark_key:
            raise ValueError("factor endpoints must be distinct")
        meas = tuple(self.measurements)
        if len(meas) < 1:
            raise ValueError("max-mixture factor needs at least one component")
        if not all(isinstance(m, Pose3) for m in meas):
            raise TypeError("measurements must be Pose3")
        info = _validate_information(self.information)
        n = len(meas)
        if self.weights is None:
            w = np.full(n, 1.0 / n)
        else:
            w = np.asarray(self.weights, dtype=np.float64).reshape(-1).copy()
            if w.shape[0] != n:
                raise ValueError("weight count does not match component count")
            if np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
                raise ValueError("weights must be nonnegative with positive sum")
            w = w / w.sum()
        with np.errstate(divide="ignore"):
            offsets = -np.log(n * w)
        w.flags.writeable = False
        offsets.flags.writeable = False
        object.__setattr__(self, "measurements", meas)
        object.__setattr__(self, "information", info)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "sqrt_information", _whitener(info))
        object.__setattr__(self, "weight_offsets", offsets)

    @property
    def keys(self):
        return (self.robot_key, self.landmark_key)

    def num_components(self) -> int:
        return len(self.measurements)

    def residual_component(self, j: int, values: GraphValues) -> np.ndarray:
        if not 0 <= j < len(self.measurements):
            raise IndexError(f"component {j} out of range")
        r = _between_error(
            self.measurements[j], values[self.robot_key], values[self.landmark_key]
        )
        return self.sqrt_information @ r

    def component_costs(self, values: GraphValues) -> np.ndarray:
        """0.5 ||r_j||^2 - log(N w_j) for every component."""
        x_r = values[self.robot_key]
        x_l = values[self.landmark_key]
        costs = np.empty(len(self.measurements))
        for j, z in enumerate(self.measurements):
            r = self.sqrt_information @ _between_error(z, x_r, x_l)
            costs[j] = 0.5 * float(r @ r) + self.weight_offsets[j]
        return costs

    def select_component(self, values: GraphValues) -> int:
        """Most likely component at the current estimate (ties -> lowest index)."""
        return int(np.argmin(self.component_costs(values)))

    def residual_active(self, values: GraphValues):
        """(active index, whitened residual, constant offset).

        The offset is the active component's weight constant
        ``-log(N w_j)``; adding it to 0.5||r||^2 reproduces the mixture
        negative log-likelihood up to constants shared by every
        component.
        """
        j = self.select_component(values)
        return j, self.residual_component(j, values), float(self.weight_offsets[j])

    def linearize(self, values: GraphValues) -> Linearization:
        j = self.select_component(values)
        x_r = values[self.robot_key]
        r = _between_error(self.measurements[j], x_r, values[self.landmark_key])
        j_from, j_to = _between_jacobians(r, x_r)
        L = self.sqrt_information
        return Linearization(
            keys=(self.robot_key, self.landmark_key),
            jacobians=(L @ j_from, L @ j_to),
            residual=L @ r,
            offset=float(self.weight_offsets[j]),
            active_index=j,
        )


class FactorGraph:
    """Ordered factor container; insertion order drives solver determinism."""

    def __init__(self, factors=None):
        self.factors: list = []
        if factors is not None:
            for f in factors:
                self.add(f)

    def add(self, factor):
        if not isinstance(factor, (PriorFactor, OdometryFactor, MaxMixtureFactor)):
            raise TypeError(f"unsupported factor type {type(factor).__name__}")
        self.factors.append(factor)
        return factor

    def __len__(self):
        return len(self.factors)

    def __iter__(self):
        return iter(self.factors)

    def variable_keys(self):
        seen = {}
        for f in self.factors:
            for k in f.keys:
                seen.setdefault(k, None)
        return list(seen.keys())

    def has_prior(self) -> bool:
        return any(isinstance(f, PriorFactor) for f in self.factors)
