"""Levenberg-Marquardt optimization of pose graphs on the SE(3) manifold,
with per-iteration reselection of max-mixture components, plus the
warm-started incremental driver used for SLAM-style measurement streams.

Each outer iteration (1) reselects the active component of every
max-mixture factor at the current estimate, (2) linearizes all factors,
(3) solves the damped sparse normal equations, and (4) retracts
``x <- exp(delta) * x``, accepting the step only if the total error
(0.5 sum ||r||^2 plus weight offsets, components reselected at the
candidate) decreases.

Determinism contract: one optimization problem runs single-threaded;
residual rows are ordered by factor insertion order and variables by
value insertion order, so identical inputs produce identical outputs.
Factor evaluation is vectorized internally but routes every between-type
residual (odometry and active mixture components alike) through the same
batched code path, which is what makes an N = 1 mixture bit-identical to
a plain Gaussian edge.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from . import pose_algebra as pa
from .factor_graph import (
    FactorGraph,
    GraphValues,
    MaxMixtureFactor,
    MissingVariableError,
    OdometryFactor,
    Pose3,
    PriorFactor,
)


class GaugeError(RuntimeError):
    """The graph does not pin down a unique solution (missing prior or
    variables unreachable from any prior)."""


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 100
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.5
    convergence_tol_abs: float = 1e-8
    convergence_tol_rel: float = 1e-10
    max_inner_retries: int = 12

    def __post_init__(self):
        if self.max_iterations <= 0 or self.max_inner_retries <= 0:
            raise ValueError("iteration limits must be positive")
        if self.initial_damping <= 0 or self.damping_up <= 1 or not 0 < self.damping_down < 1:
            raise ValueError("invalid damping schedule")
        if not 0 < self.convergence_tol_abs < 1 or not 0 < self.convergence_tol_rel < 1:
            raise ValueError("tolerances must be in (0, 1)")


@dataclass
class SolveStats:
    iterations: int
    final_error: float
    error_history: list
    active_components: list  # one {factor_index: component} dict per record
    converged: bool


def _inv_qt(q, t):
    qi = pa.quat_conjugate(q)
    return qi, -pa.quat_rotate(qi, t)


def _comp_qt(qa, ta, qb, tb):
    return pa.quat_mul(qa, qb), pa.quat_rotate(qa, tb) + ta


def _between_residual_qt(zq, zt, qf, tf, qt_, tt_):
    """log(z * x_to^-1 * x_from) for stacked (B, .) arrays."""
    qti, tti = _inv_qt(qt_, tt_)
    aq, at = _comp_qt(zq, zt, qti, tti)
    mq, mt = _comp_qt(aq, at, qf, tf)
    return pa.se3_log_qt(mq, mt)


def _whiten(L, r):
    return np.einsum("bij,bj->bi", L, r)


class _BatchProblem:
    """Struct-of-arrays view of (graph, values) used by one optimize call."""

    def __init__(self, graph: FactorGraph, values: GraphValues):
        referenced = {}
        for f in graph.factors:
            for k in f.keys:
                if k not in values:
                    raise MissingVariableError(f"factor references {k} with no initial value")
                referenced.setdefault(k, None)
        self.var_keys = [k for k in values.keys() if k in referenced]
        self.key_index = {k: i for i, k in enumerate(self.var_keys)}
        self.num_vars = len(self.var_keys)
        self.num_factors = len(graph.factors)

        self._check_gauge(graph)

        self.q0 = np.array([values[k].quat for k in self.var_keys]).reshape(-1, 4)
        self.t0 = np.array([values[k].trans for k in self.var_keys]).reshape(-1, 3)

        prior_pos, prior_var, prior_q, prior_t, prior_L = [], [], [], [], []
        bet_pos, bet_from, bet_to, bet_zq, bet_zt, bet_L = [], [], [], [], [], []
        mm_groups: dict[int, dict] = {}
        for pos, f in enumerate(graph.factors):
            if isinstance(f, PriorFactor):
                prior_pos.append(pos)
                prior_var.append(self.key_index[f.key])
                prior_q.append(f.prior.quat)
                prior_t.append(f.prior.trans)
                prior_L.append(f.sqrt_information)
            elif isinstance(f, OdometryFactor):
                bet_pos.append(pos)
                bet_from.append(self.key_index[f.key_from])
                bet_to.append(self.key_index[f.key_to])
                bet_zq.append(f.measurement.quat)
                bet_zt.append(f.measurement.trans)
                bet_L.append(f.sqrt_information)
            elif isinstance(f, MaxMixtureFactor):
                g = mm_groups.setdefault(
                    f.num_components(),
                    {"pos": [], "robot": [], "lmk": [], "zq": [], "zt": [], "L": [], "off": []},
                )
                g["pos"].append(pos)
                g["robot"].append(self.key_index[f.robot_key])
                g["lmk"].append(self.key_index[f.landmark_key])
                g["zq"].append([m.quat for m in f.measurements])
                g["zt"].append([m.trans for m in f.measurements])
                g["L"].append(f.sqrt_information)
                g["off"].append(f.weight_offsets)
            else:  # pragma: no cover - FactorGraph.add restricts types
                raise TypeError(type(f).__name__)

        def arr(x, shape):
            return np.array(x, dtype=np.float64).reshape(shape) if x else np.zeros(shape)

        np_int = lambda x: np.array(x, dtype=np.int64)
        self.prior_pos = np_int(prior_pos)
        self.prior_var = np_int(prior_var)
        self.prior_q = arr(prior_q, (-1, 4) if prior_q else (0, 4))
        self.prior_t = arr(prior_t, (-1, 3) if prior_t else (0, 3))
        self.prior_L = arr(prior_L, (-1, 6, 6) if prior_L else (0, 6, 6))
        self.bet_pos = np_int(bet_pos)
        self.bet_from = np_int(bet_from)
        self.bet_to = np_int(bet_to)
        self.bet_zq = arr(bet_zq, (-1, 4) if bet_zq else (0, 4))
        self.bet_zt = arr(bet_zt, (-1, 3) if bet_zt else (0, 3))
        self.bet_L = arr(bet_L, (-1, 6, 6) if bet_L else (0, 6, 6))
        self.mm = []
        for n, g in sorted(mm_groups.items()):
            self.mm.append(
                {
                    "n": n,
                    "pos": np_int(g["pos"]),
                    "robot": np_int(g["robot"]),
                    "lmk": np_int(g["lmk"]),
                    "zq": np.array(g["zq"], dtype=np.float64).reshape(-1, n, 4),
                    "zt": np.array(g["zt"], dtype=np.float64).reshape(-1, n, 3),
                    "L": np.array(g["L"], dtype=np.float64).reshape(-1, 6, 6),
                    "off": np.array(g["off"], dtype=np.float64).reshape(-1, n),
                }
            )

        self._precompute_jacobian_pattern()

    def _check_gauge(self, graph: FactorGraph):
        if not graph.has_prior():
            raise GaugeError("graph has no prior factor; gauge is not fixed")
        adjacency = {k: set() for k in self.var_keys}
        seeds = []
        for f in graph.factors:
            if isinstance(f, PriorFactor):
                seeds.append(f.key)
            else:
                a, b = f.keys
                adjacency[a].add(b)
                adjacency[b].add(a)
        reached = set()
        stack = list(seeds)
        while stack:
            k = stack.pop()
            if k in reached:
                continue
            reached.add(k)
            stack.extend(adjacency[k] - reached)
        unreached = [k for k in self.var_keys if k not in reached]
        if unreached:
            raise GaugeError(f"variables not constrained to any prior: {unreached}")

    def _block_indices(self, positions, var_indices):
        # rows: residual block of the factor; cols: state block of the variable
        rows = (6 * positions[:, None, None] + np.arange(6)[None, :, None]) * np.ones(
            (1, 1, 6), dtype=np.int64
        )
        cols = (6 * var_indices[:, None, None] + np.arange(6)[None, None, :]) * np.ones(
            (1, 6, 1), dtype=np.int64
        )
        return rows.astype(np.int64).reshape(-1), cols.astype(np.int64).reshape(-1)

    def _precompute_jacobian_pattern(self):
        rows, cols = [], []
        r, c = self._block_indices(self.prior_pos, self.prior_var)
        rows.append(r), cols.append(c)
        for pos, var in ((self.bet_pos, self.bet_from), (self.bet_pos, self.bet_to)):
            r, c = self._block_indices(pos, var)
            rows.append(r), cols.append(c)
        for g in self.mm:
            for var in (g["robot"], g["lmk"]):
                r, c = self._block_indices(g["pos"], var)
                rows.append(r), cols.append(c)
        self.jac_rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        self.jac_cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)

    def evaluate(self, q, t):
        """Residual vector (factor order), weight offsets, and the
        max-mixture selections at (q, t)."""
        res = np.zeros((self.num_factors, 6))
        offset_total = 0.0
        selections = []
        if len(self.prior_pos):
            qi, ti = _inv_qt(q[self.prior_var], t[self.prior_var])
            mq, mt = _comp_qt(self.prior_q, self.prior_t, qi, ti)
            res[self.prior_pos] = _whiten(self.prior_L, pa.se3_log_qt(mq, mt))
        if len(self.bet_pos):
            r = _between_residual_qt(
                self.bet_zq,
                self.bet_zt,
                q[self.bet_from],
                t[self.bet_from],
                q[self.bet_to],
                t[self.bet_to],
            )
            res[self.bet_pos] = _whiten(self.bet_L, r)
        for g in self.mm:
            n = g["n"]
            f = len(g["pos"])
            qf = np.repeat(q[g["robot"]], n, axis=0)
            tf = np.repeat(t[g["robot"]], n, axis=0)
            qt_ = np.repeat(q[g["lmk"]], n, axis=0)
            tt_ = np.repeat(t[g["lmk"]], n, axis=0)
            r = _between_residual_qt(
                g["zq"].reshape(-1, 4), g["zt"].reshape(-1, 3), qf, tf, qt_, tt_
            )
            wr = _whiten(np.repeat(g["L"], n, axis=0), r).reshape(f, n, 6)
            costs = 0.5 * np.sum(wr * wr, axis=2) + g["off"]
            sel = np.argmin(costs, axis=1)
            selections.append(sel)
            res[g["pos"]] = wr[np.arange(f), sel]
            offset_total += float(np.sum(g["off"][np.arange(f), sel]))
        return res.reshape(-1), offset_total, selections

    def linearize(self, q, t, selections):
        """Sparse whitened Jacobian under the given component selections."""
        data = []
        if len(self.prior_pos):
            qi, ti = _inv_qt(q[self.prior_var], t[self.prior_var])
            mq, mt = _comp_qt(self.prior_q, self.prior_t, qi, ti)
            r = pa.se3_log_qt(mq, mt)
            jac = -(self.prior_L @ pa.se3_right_jacobian_inverse(r))
            data.append(jac.reshape(-1))
        if len(self.bet_pos):
            j_from, j_to = self._between_jacobians(
                self.bet_zq,
                self.bet_zt,
                q[self.bet_from],
                t[self.bet_from],
                q[self.bet_to],
                t[self.bet_to],
                self.bet_L,
            )
            data.append(j_from.reshape(-1))
            data.append(j_to.reshape(-1))
        for g, sel in zip(self.mm, selections):
            f = len(g["pos"])
            zq = g["zq"][np.arange(f), sel]
            zt = g["zt"][np.arange(f), sel]
            j_from, j_to = self._between_jacobians(
                zq, zt, q[g["robot"]], t[g["robot"]], q[g["lmk"]], t[g["lmk"]], g["L"]
            )
            data.append(j_from.reshape(-1))
            data.append(j_to.reshape(-1))
        flat = np.concatenate(data) if data else np.zeros(0)
        jac = sp.coo_matrix(
            (flat, (self.jac_rows, self.jac_cols)),
            shape=(6 * self.num_factors, 6 * self.num_vars),
        )
        return jac.tocsr()

    @staticmethod
    def _between_jacobians(zq, zt, qf, tf, qt_, tt_, L):
        r = _between_residual_qt(zq, zt, qf, tf, qt_, tt_)
        qfi, tfi = _inv_qt(qf, tf)
        j_from = L @ (pa.se3_right_jacobian_inverse(r) @ pa.se3_adjoint(qfi, tfi))
        return j_from, -j_from

    def selection_record(self, selections) -> dict:
        record = {}
        for g, sel in zip(self.mm, selections):
            for pos, j in zip(g["pos"], sel):
                record[int(pos)] = int(j)
        return record

    @staticmethod
    def retract(q, t, delta):
        dq, dt = pa.se3_exp_qt(delta.reshape(-1, 6))
        return (
            pa.quat_normalize_hemisphere(pa.quat_mul(dq, q)),
            pa.quat_rotate(dq, t) + dt,
        )


def total_error(graph: FactorGraph, values: GraphValues) -> float:
    """0.5 sum ||r||^2 + weight offsets with components reselected at `values`."""
    batch = _BatchProblem(graph, values)
    r, offs, _ = batch.evaluate(batch.q0, batch.t0)
    return 0.5 * float(r @ r) + offs


def optimize(graph: FactorGraph, initial: GraphValues, config: SolverConfig = None):
    """Run LM to convergence; returns (GraphValues, SolveStats).

    Accepted steps never increase the total error; the reported
    active-component record always matches a reselection at the returned
    solution.
    """
    config = config or SolverConfig()
    batch = _BatchProblem(graph, initial)
    q, t = batch.q0, batch.t0
    identity = sp.identity(6 * batch.num_vars, format="csc")

    r, offs, selections = batch.evaluate(q, t)
    err = 0.5 * float(r @ r) + offs
    history = [err]
    records = [batch.selection_record(selections)]
    lam = config.initial_damping
    converged = False
    iterations = 0

    for _ in range(config.max_iterations):
        iterations += 1
        jac = batch.linearize(q, t, selections)
        hess = (jac.T @ jac).tocsc()
        grad = jac.T @ r
        accepted = False
        for _ in range(config.max_inner_retries):
            delta = spsolve(hess + lam * identity, -grad)
            if not np.all(np.isfinite(delta)):
                raise GaugeError("normal equations singular beyond damping rescue")
            q_new, t_new = batch.retract(q, t, delta)
            r_new, offs_new, sel_new = batch.evaluate(q_new, t_new)
            err_new = 0.5 * float(r_new @ r_new) + offs_new
            change = err - err_new
            tol = max(config.convergence_tol_abs, config.convergence_tol_rel * abs(err))
            if err_new <= err:
                q, t, r, offs, selections, err = q_new, t_new, r_new, offs_new, sel_new, err_new
                history.append(err)
                records.append(batch.selection_record(selections))
                lam = max(lam * config.damping_down, 1e-15)
                accepted = True
                if change < tol:
                    converged = True
                break
            if -change < tol:
                # step stalled within tolerance of the current error
                converged = True
                break
            lam *= config.damping_up
        if converged or not accepted:
            break

    out = initial.copy()
    for i, k in enumerate(batch.var_keys):
        out[k] = Pose3(q[i], t[i])
    stats = SolveStats(
        iterations=iterations,
        final_error=err,
        error_history=history,
        active_components=records,
        converged=converged,
    )
    return out, stats


@dataclass(frozen=True)
class Timestep:
    """One increment of the measurement stream.

    Factors are applied in the order priors, odometry, observations;
    variables they introduce are initialized on first reference.
    """

    priors: tuple = ()
    odometry: tuple = ()
    observations: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "priors", tuple(self.priors))
        object.__setattr__(self, "odometry", tuple(self.odometry))
        object.__setattr__(self, "observations", tuple(self.observations))


def _initial_hypothesis_index(factor: MaxMixtureFactor, robot_known: bool) -> int:
    # For a brand-new landmark every hypothesis has zero residual against
    # its own composed pose, so the minimum-whitened-residual rule
    # degenerates to the likelihood tie-break: highest weight, lowest
    # index.  Index 0 doubles as the fallback when the robot pose itself
    # is unknown.
    if not robot_known:
        return 0
    return int(np.argmax(factor.weights))


def incremental_solve(stream, config: SolverConfig = None):
    """Process timesteps with warm-started full batch solves.

    Returns the list of per-timestep GraphValues estimates.  New robot
    poses are initialized by composing the previous estimate with the
    odometry measurement; new landmarks from the first observation's
    selected hypothesis composed with the current robot pose estimate.
    """
    config = config or SolverConfig()
    graph = FactorGraph()
    values = GraphValues()
    per_step = []
    for step in stream:
        for f in step.priors:
            graph.add(f)
            if f.key not in values:
                values[f.key] = f.prior
        for f in step.odometry:
            graph.add(f)
            if f.key_to not in values:
                if f.key_from not in values:
                    raise MissingVariableError(
                        f"odometry to {f.key_to} from unknown pose {f.key_from}"
                    )
                values[f.key_to] = pa.compose(values[f.key_from], f.measurement)
        for f in step.observations:
            graph.add(f)
            if f.landmark_key not in values:
                robot_known = f.robot_key in values
                j = _initial_hypothesis_index(f, robot_known)
                base = values[f.robot_key] if robot_known else Pose3.identity()
                values[f.landmark_key] = pa.compose(base, f.measurements[j])
        values, _ = optimize(graph, values, config)
        per_step.append(values.copy())
    return per_step
