"""Optimal-transport retrieval between two feature rows.

The matching cost between positions j and k on the same row is
exp(1 - <x1_j, x2_k>) over conv-projected, L2-normalized feature columns.
Per-position masses come from a conv + ReLU + L1-normalization head on each
input, and the transport plan is solved per row by log-domain Sinkhorn
iterations under those row/column mass constraints.

Each row's solve is independent: iteration stops per row once its marginal
residual drops below tolerance, and the potentials of converged rows are
frozen, so a row's result never depends on data from other rows.  Gradients
are obtained by unrolling exactly the iterations that executed.
"""

from __future__ import annotations

import dataclasses
import itertools

import numpy as np

from . import tensor as t
from .tensor import Array


class NumericalError(RuntimeError):
    """A computation produced non-finite values (divergence, NaN loss)."""


@dataclasses.dataclass(frozen=True)
class SinkhornConfig:
    """Entropic regularization strength, iteration cap and marginal tolerance.

    ``tol == 0`` disables early stopping, giving a fixed, fully smooth
    iteration count (used by gradient checks).
    """
    epsilon: float = 0.05
    max_iters: int = 100
    tol: float = 1e-6

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")


@dataclasses.dataclass(frozen=True)
class Conv1x1Params:
    w: Array
    b: Array


@dataclasses.dataclass(frozen=True)
class RetrievalParams:
    """Projection and mass heads for the OT retrieval (all 1x1 convs)."""
    conv_sim_1: Conv1x1Params
    conv_sim_2: Conv1x1Params
    conv_mass_1: Conv1x1Params
    conv_mass_2: Conv1x1Params


@dataclasses.dataclass(frozen=True)
class Marginals:
    """Per-row nonnegative masses summing to 1 along the position axis."""
    values: Array  # [h, w]

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ValueError(f"marginals must be [h,w], got {v.shape}")
        if np.any(v < 0):
            raise ValueError("marginals must be nonnegative")
        if np.max(np.abs(v.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("marginal rows must sum to 1")


@dataclasses.dataclass
class MatchingMatrix:
    """Transport plans per epipolar row, with their convergence record.

    values[i, j, k] is the mass moved from position j of input 1 to
    position k of input 2 on row i.  Row sums target ``row_mass`` and
    column sums equal ``col_mass`` (exactly, up to float roundoff, because
    the column scaling runs last).
    """
    values: Array            # [h, w, w]
    row_mass: Array          # [h, w] target for sum over k
    col_mass: Array          # [h, w] target for sum over j
    iterations: Array        # [h] int, iterations executed per row
    residual: Array          # [h] final row-marginal residual per row
    converged: Array         # [h] bool

    @property
    def all_converged(self) -> bool:
        return bool(self.converged.all())

    def marginal_residuals(self) -> tuple[float, float]:
        row = np.abs(self.values.sum(axis=2) - self.row_mass).max()
        col = np.abs(self.values.sum(axis=1) - self.col_mass).max()
        return float(row), float(col)


def transport_objective(plan: Array, cost: Array) -> float:
    """Frobenius inner product <plan, cost>."""
    return float((plan * cost).sum())


# ---------------------------------------------------------------------------
# cost and mass construction

def _conv_rows(x: Array, w: Array, b: Array) -> Array:
    """1x1 conv over the channel axis of [h,c,w] features."""
    return np.einsum("oc,hcw->how", w, x) + b[None, :, None]


def _conv_rows_vjp(x: Array, w: Array, gy: Array):
    gx = np.einsum("oc,how->hcw", w, gy)
    gw = np.einsum("how,hcw->oc", gy, x)
    gb = gy.sum(axis=(0, 2))
    return gx, gw, gb


def build_cost(x1: Array, x2: Array, params: RetrievalParams) -> Array:
    """Cost[i,j,k] = exp(1 - cosine similarity of projected feature columns)."""
    c, _ = _build_cost_d(x1, x2, params)
    return c


def _build_cost_d(x1: Array, x2: Array, params: RetrievalParams):
    if x1.shape != x2.shape:
        raise ValueError(f"build_cost shape mismatch: {x1.shape} vs {x2.shape}")
    p1, p2 = params.conv_sim_1, params.conv_sim_2
    z1 = _conv_rows(x1, p1.w, p1.b)
    z2 = _conv_rows(x2, p2.w, p2.b)
    n1 = t.normalize(z1, 1, "euclidean")
    n2 = t.normalize(z2, 1, "euclidean")
    sim = np.einsum("hcj,hck->hjk", n1, n2)
    cost = np.exp(1.0 - sim)

    def vjp(gcost):
        gsim = -cost * gcost
        gn1 = np.einsum("hjk,hck->hcj", gsim, n2)
        gn2 = np.einsum("hjk,hcj->hck", gsim, n1)
        gz1 = t.normalize_vjp(z1, 1, "euclidean", gn1)
        gz2 = t.normalize_vjp(z2, 1, "euclidean", gn2)
        gx1, gw1, gb1 = _conv_rows_vjp(x1, p1.w, gz1)
        gx2, gw2, gb2 = _conv_rows_vjp(x2, p2.w, gz2)
        return gx1, gx2, {"conv_sim_1.w": gw1, "conv_sim_1.b": gb1,
                          "conv_sim_2.w": gw2, "conv_sim_2.b": gb2}

    return cost, vjp


def compute_mass(x: Array, conv_mass: Conv1x1Params) -> Marginals:
    """Per-position transported mass: L1-normalized ReLU of a 1-channel conv."""
    m, _ = _compute_mass_d(x, conv_mass)
    return m


def _compute_mass_d(x: Array, conv_mass: Conv1x1Params):
    if conv_mass.w.shape[0] != 1:
        raise ValueError("mass conv must reduce to one channel")
    z = _conv_rows(x, conv_mass.w, conv_mass.b)  # [h,1,w]
    r = t.relu(z)
    m = t.normalize(r, 2, "l1")

    def vjp(gmass):
        gm = gmass[:, None, :]
        gr = t.normalize_vjp(r, 2, "l1", gm)
        gz = t.relu_vjp(z, gr)
        gx, gw, gb = _conv_rows_vjp(x, conv_mass.w, gz)
        return gx, gw, gb

    return Marginals(m[:, 0, :]), vjp


# ---------------------------------------------------------------------------
# log-domain Sinkhorn

def _lse(z: Array, axis: int) -> Array:
    m = np.max(z, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = m_safe + np.log(np.exp(z - m_safe).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _softmax_axis(z: Array, axis: int) -> Array:
    m = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - np.where(np.isfinite(m), m, 0.0))
    return e / e.sum(axis=axis, keepdims=True)


@dataclasses.dataclass
class _SinkhornTrace:
    cost: Array
    row_mass: Array
    col_mass: Array
    epsilon: float
    f_steps: list
    g_steps: list
    active_steps: list
    f: Array
    g: Array


def _plan_from_potentials(f, g, cost, eps):
    return np.exp((f[:, :, None] + g[:, None, :] - cost) / eps)


def sinkhorn_solve(cost: Array, row_mass: Marginals, col_mass: Marginals,
                   cfg: SinkhornConfig) -> MatchingMatrix:
    """Entropic transport plans for a stack of row problems [h,w,w].

    Alternates row and column scalings in the log domain, columns last, so
    the column marginal holds exactly at exit.  Per-row early stopping: a
    row freezes once its row-marginal residual is <= cfg.tol.
    """
    mm, _ = _sinkhorn_solve_d(cost, row_mass, col_mass, cfg)
    return mm


def _sinkhorn_solve_d(cost: Array, row_mass: Marginals, col_mass: Marginals,
                      cfg: SinkhornConfig):
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 3 or cost.shape[1] != cost.shape[2]:
        raise ValueError(f"cost must be [h,w,w], got {cost.shape}")
    if not np.all(np.isfinite(cost)) or np.any(cost <= 0):
        raise ValueError("cost must be finite and positive")
    mu = row_mass.values
    nu = col_mass.values
    if mu.shape != cost.shape[:2] or nu.shape != cost.shape[:2]:
        raise ValueError("marginal shapes do not match the cost")

    h, w = mu.shape
    eps = cfg.epsilon
    with np.errstate(divide="ignore"):
        log_mu = np.log(mu)
        log_nu = np.log(nu)

    f = np.zeros((h, w))
    g = np.zeros((h, w))
    active = np.ones(h, dtype=bool)
    iterations = np.full(h, cfg.max_iters, dtype=int)
    residual = np.full(h, np.inf)
    trace = _SinkhornTrace(cost, mu, nu, eps, [], [], [], f, g)

    for it in range(1, cfg.max_iters + 1):
        act = active[:, None]
        f_new = eps * (log_mu - _lse((g[:, None, :] - cost) / eps, axis=2))
        f = np.where(act, f_new, f)
        g_new = eps * (log_nu - _lse((f[:, :, None] - cost) / eps, axis=1))
        g = np.where(act, g_new, g)
        trace.f_steps.append(f)
        trace.g_steps.append(g)
        trace.active_steps.append(active.copy())

        plan = _plan_from_potentials(f, g, cost, eps)
        bad = ~np.isfinite(plan).all(axis=(1, 2))
        if bad.any():
            raise NumericalError(
                f"sinkhorn diverged (non-finite plan) at row {int(np.argmax(bad))}")
        resid = np.abs(plan.sum(axis=2) - mu).max(axis=1)
        residual = np.where(active, resid, residual)
        done = active & (resid <= cfg.tol)
        iterations[done] = it
        active &= resid > cfg.tol
        if not active.any():
            break

    trace.f, trace.g = f, g
    plan = _plan_from_potentials(f, g, cost, eps)
    mm = MatchingMatrix(values=plan, row_mass=mu, col_mass=nu,
                        iterations=iterations, residual=residual,
                        converged=residual <= cfg.tol)

    def vjp(gplan):
        return _sinkhorn_vjp(trace, gplan)

    return mm, vjp


def _sinkhorn_vjp(trace: _SinkhornTrace, gplan: Array):
    """Reverse through the executed Sinkhorn iterations.

    Frozen rows pass their cotangents through untouched; active rows push
    gradient into the cost, the marginals, and the previous potentials.
    """
    cost, mu, nu, eps = trace.cost, trace.row_mass, trace.col_mass, trace.epsilon
    f, g = trace.f, trace.g
    plan = _plan_from_potentials(f, g, cost, eps)

    gf = (gplan * plan).sum(axis=2) / eps
    gg = (gplan * plan).sum(axis=1) / eps
    gcost = -gplan * plan / eps
    gmu = np.zeros_like(mu)
    gnu = np.zeros_like(nu)

    n_steps = len(trace.f_steps)
    for it in range(n_steps - 1, -1, -1):
        act = trace.active_steps[it]
        if not act.any():
            continue
        a1 = act[:, None]
        a2 = act[:, None, None]
        f_it = trace.f_steps[it]
        g_prev = trace.g_steps[it - 1] if it > 0 else np.zeros_like(g)

        # reverse g = eps*log_nu - eps*LSE_j((f_it - cost)/eps)
        tmat = _softmax_axis((f_it[:, :, None] - cost) / eps, axis=1)
        gnu_step = np.where(act[:, None] & (nu > 0),
                            np.divide(eps * gg, nu, out=np.zeros_like(nu),
                                      where=nu > 0), 0.0)
        gnu = gnu + gnu_step
        gf = gf + np.where(a1, -np.einsum("hk,hjk->hj", gg, tmat), 0.0)
        gcost = gcost + np.where(a2, gg[:, None, :] * tmat, 0.0)
        gg = np.where(a1, 0.0, gg)

        # reverse f = eps*log_mu - eps*LSE_k((g_prev - cost)/eps)
        smat = _softmax_axis((g_prev[:, None, :] - cost) / eps, axis=2)
        gmu_step = np.where(act[:, None] & (mu > 0),
                            np.divide(eps * gf, mu, out=np.zeros_like(mu),
                                      where=mu > 0), 0.0)
        gmu = gmu + gmu_step
        gg = gg + np.where(a1, -np.einsum("hj,hjk->hk", gf, smat), 0.0)
        gcost = gcost + np.where(a2, gf[:, :, None] * smat, 0.0)
        gf = np.where(a1, 0.0, gf)

    return gcost, gmu, gnu


# ---------------------------------------------------------------------------
# retrieval and the exact oracle

def ot_retrieve(x1: Array, x2: Array, params: RetrievalParams,
                cfg: SinkhornConfig) -> MatchingMatrix:
    """Full OT retrieval: cost + masses + per-row Sinkhorn solve."""
    mm, _ = ot_retrieve_d(x1, x2, params, cfg)
    return mm


def ot_retrieve_d(x1: Array, x2: Array, params: RetrievalParams,
                  cfg: SinkhornConfig):
    """Differentiable retrieval; vjp(gplan) -> (gx1, gx2, param grads dict)."""
    if x1.shape != x2.shape:
        raise ValueError(f"ot_retrieve shape mismatch: {x1.shape} vs {x2.shape}")
    cost, cost_vjp = _build_cost_d(x1, x2, params)
    mass1, mass1_vjp = _compute_mass_d(x1, params.conv_mass_1)
    mass2, mass2_vjp = _compute_mass_d(x2, params.conv_mass_2)
    mm, solve_vjp = _sinkhorn_solve_d(cost, mass1, mass2, cfg)

    def vjp(gplan):
        gcost, gmu, gnu = solve_vjp(gplan)
        gx1_c, gx2_c, gsim = cost_vjp(gcost)
        gx1_m, gw1, gb1 = mass1_vjp(gmu)
        gx2_m, gw2, gb2 = mass2_vjp(gnu)
        grads = dict(gsim)
        grads["conv_mass_1.w"] = gw1
        grads["conv_mass_1.b"] = gb1
        grads["conv_mass_2.w"] = gw2
        grads["conv_mass_2.b"] = gb2
        return gx1_c + gx1_m, gx2_c + gx2_m, grads

    return mm, vjp


def exact_transport_oracle(cost: Array) -> tuple[Array, float]:
    """Brute-force optimum for uniform marginals by permutation enumeration.

    Birkhoff: with uniform 1/w masses the optimal plan is a scaled
    permutation, so enumerating all w! of them is exact.  Limited to w <= 6.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"oracle cost must be square, got {cost.shape}")
    w = cost.shape[0]
    if w > 6:
        raise ValueError(f"oracle limited to w <= 6 (got {w}): factorial blow-up")
    best_perm = None
    best_obj = np.inf
    for perm in itertools.permutations(range(w)):
        obj = sum(cost[j, perm[j]] for j in range(w)) / w
        if obj < best_obj:
            best_obj = obj
            best_perm = perm
    plan = np.zeros((w, w))
    for j, k in enumerate(best_perm):
        plan[j, k] = 1.0 / w
    return plan, float(best_obj)


def uniform_marginals(h: int, w: int) -> Marginals:
    return Marginals(np.full((h, w), 1.0 / w))
