"""Numerically stable evaluation of materialized circuits.

Everything here works in log space.  ``log_forward`` is the single-pass
bottom-up evaluator over an explicit circuit; ``latent_tree_loglik`` is an
equivalent fused evaluator for circuits in latent-tree tensor form (the
shape produced by materialization), used where building the explicit unit
graph would dominate runtime.  Marginalization uses NaN as the
"marginalized out" marker in evidence arrays.
"""

from __future__ import annotations

import time

import numpy as np
from scipy.special import gammaln

from .circuit import Circuit, post_order
from .errors import NumericError, UnsupportedStructureError

LOG_2PI = float(np.log(2.0 * np.pi))


def _input_log_prob(dist, var: int, x: np.ndarray) -> np.ndarray:
    """Log density/mass of one input distribution at evidence column x; NaN
    entries are marginalized out and contribute log 1 = 0."""
    observed = ~np.isnan(x)
    out = np.zeros_like(x)
    if not observed.any():
        return out
    xv = x[observed]
    if dist.family == "categorical":
        k = dist.num_states
        xi = xv.astype(np.int64)
        if np.any(xi != xv) or np.any((xi < 0) | (xi >= k)):
            raise ValueError(
                f"evidence for variable {var} outside categorical({k}) support"
            )
        out[observed] = dist.params[xi]
    elif dist.family == "binomial":
        k = dist.num_states
        xi = xv.astype(np.int64)
        if np.any(xi != xv) or np.any((xi < 0) | (xi > k)):
            raise ValueError(
                f"evidence for variable {var} outside binomial({k}) support"
            )
        p = dist.params[0]
        out[observed] = (
            gammaln(k + 1)
            - gammaln(xi + 1)
            - gammaln(k - xi + 1)
            + xi * np.log(p)
            + (k - xi) * np.log1p(-p)
        )
    else:
        if not np.isfinite(xv).all():
            raise ValueError(f"evidence for variable {var} must be finite")
        mu, log_sigma = dist.params
        z = (xv - mu) * np.exp(-log_sigma)
        out[observed] = -0.5 * z * z - log_sigma - 0.5 * LOG_2PI
    return out


def _logsumexp_rows(stacked: np.ndarray) -> np.ndarray:
    """logsumexp over axis 0; all-(-inf) columns give -inf, never NaN."""
    m = stacked.max(axis=0)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.exp(stacked - safe).sum(axis=0)) + np.where(np.isfinite(m), safe, m)


def _check_concrete(qpc: Circuit) -> None:
    for u in qpc.units:
        if u.kind == "integral":
            raise UnsupportedStructureError(
                f"unit {u.uid} is symbolic (integral); materialize the circuit first"
            )
        if u.kind == "input" and u.dist.symbolic:
            raise UnsupportedStructureError(
                f"input unit {u.uid} has symbolic parameters; materialize the circuit first"
            )


def forward_values(qpc: Circuit, ev: np.ndarray, order=None) -> np.ndarray:
    """Per-unit log values of one evidence block, shape (units, B)."""
    if order is None:
        order = post_order(qpc)
    values = np.empty((len(qpc.units), ev.shape[0]))
    for uid in order:
        u = qpc.units[uid]
        if u.kind == "input":
            vals = _input_log_prob(u.dist, u.var, ev[:, u.var])
        elif u.kind == "product":
            vals = values[list(u.children)].sum(axis=0)
        else:
            stacked = values[list(u.children)] + u.weights[:, None]
            vals = _logsumexp_rows(stacked)
        if np.isnan(vals).any() or np.isposinf(vals).any():
            raise NumericError(f"non-finite value at unit {uid}")
        values[uid] = vals
    return values


def log_forward(qpc: Circuit, evidence: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Batched log-likelihoods of evidence rows under a concrete circuit.

    evidence is (B, D) or (D,); NaN marks a variable as marginalized out.
    Returns (B,) log-likelihoods (or a scalar for 1-D input).
    """
    evidence = np.asarray(evidence, dtype=np.float64)
    single = evidence.ndim == 1
    if single:
        evidence = evidence[None, :]
    if evidence.shape[1] != qpc.num_vars:
        raise ValueError(f"evidence has {evidence.shape[1]} columns, circuit has {qpc.num_vars}")
    _check_concrete(qpc)
    order = post_order(qpc)
    out = np.empty(evidence.shape[0])
    for lo in range(0, evidence.shape[0], chunk):
        ev = evidence[lo : lo + chunk]
        out[lo : lo + chunk] = forward_values(qpc, ev, order)[qpc.root]
    return out[0] if single else out


def marginal(qpc: Circuit, evidence: np.ndarray) -> np.ndarray:
    """Log-probability of the marginal event described by the evidence.

    Identical single pass as log_forward: marginalized variables (NaN)
    contribute total mass 1 at their input units.
    """
    return log_forward(qpc, evidence)


def sample_pc(qpc: Circuit, n: int, seed: int) -> np.ndarray:
    """Ancestral sampling: n rows over the circuit's observables.

    Sum units draw a child proportionally to exp(weights), products
    descend into all children, input units draw from their family.
    """
    rng = np.random.default_rng(seed)
    out = np.full((n, qpc.num_vars), np.nan)
    child_probs = {}
    for u in qpc.units:
        if u.kind == "sum":
            p = np.exp(u.weights - _logsumexp_rows(u.weights[:, None])[0])
            child_probs[u.uid] = p / p.sum()
    for row in range(n):
        stack = [qpc.root]
        while stack:
            u = qpc.units[stack.pop()]
            if u.kind == "sum":
                stack.append(u.children[rng.choice(len(u.children), p=child_probs[u.uid])])
            elif u.kind == "product":
                stack.extend(u.children)
            else:
                d = u.dist
                if d.family == "categorical":
                    val = rng.choice(d.num_states, p=np.exp(d.params))
                elif d.family == "binomial":
                    val = rng.binomial(d.num_states, d.params[0])
                else:
                    val = d.params[0] + np.exp(d.params[1]) * rng.standard_normal()
                out[row, u.var] = val
    return out


def bpd(loglik, num_vars: int):
    """Bits per dimension: -loglik / (D ln 2)."""
    if num_vars < 1:
        raise ValueError("bpd needs at least one variable")
    return -np.asarray(loglik) / (num_vars * np.log(2.0))


def _lse_matmul(log_w: np.ndarray, log_v: np.ndarray) -> np.ndarray:
    """log(exp(log_w) @ exp(log_v)) with per-row/column max subtraction.

    log_w: (J, N) and log_v: (N, B) -> (J, B).  Exact up to float
    rounding; the shifted exponentials stay in range by construction.
    """
    m1 = log_w.max(axis=1, keepdims=True)
    m2 = log_v.max(axis=0, keepdims=True)
    m1 = np.where(np.isfinite(m1), m1, 0.0)
    m2 = np.where(np.isfinite(m2), m2, 0.0)
    prod = np.exp(log_w - m1) @ np.exp(log_v - m2)
    with np.errstate(divide="ignore"):
        return np.log(prod) + m1 + m2


def latent_tree_loglik(latent_parent, obs_parent, sum_rows, obs_loglik) -> np.ndarray:
    """Fused log-likelihood of a latent-tree circuit in tensor form.

    sum_rows[i] is the (N_parent, N_i) log-weight matrix of latent i
    (row j: log of quadrature weight times conditional density at parent
    point j; the root has a single prior row).  obs_loglik[j] is the
    (N_parent, B) per-point evidence log-likelihood of observable j.
    Equivalent to log_forward over the fully materialized circuit.
    """
    n_latents = len(latent_parent)
    roots = [i for i, p in enumerate(latent_parent) if p is None]
    if len(roots) != 1:
        raise ValueError("latent_parent must define exactly one root")
    children = [[] for _ in range(n_latents)]
    for i, p in enumerate(latent_parent):
        if p is not None:
            children[p].append(i)
    order = [roots[0]]
    i = 0
    while i < len(order):
        order.extend(children[order[i]])
        i += 1

    acc: list[np.ndarray | None] = [None] * n_latents
    for j, p in enumerate(obs_parent):
        acc[p] = obs_loglik[j] if acc[p] is None else acc[p] + obs_loglik[j]
    for i in order[::-1]:
        if acc[i] is None:
            raise ValueError(f"latent {i} has no children")
        up = _lse_matmul(sum_rows[i], acc[i])
        p = latent_parent[i]
        if p is None:
            return up[0]
        acc[p] = up if acc[p] is None else acc[p] + up
    raise AssertionError("unreachable: root handled inside the loop")


def benchmark_eval(qpc: Circuit, batch: np.ndarray, iters: int) -> dict:
    """Wall-time per log_forward call and resulting edge throughput."""
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        log_forward(qpc, batch)
        times.append(time.perf_counter() - t0)
    times_arr = np.array(times)
    edges = qpc.num_edges * batch.shape[0]
    return {
        "times": times_arr,
        "edges_per_second": edges / float(np.median(times_arr)),
        "num_edges": qpc.num_edges,
    }
