"""Fixed-step Runge-Kutta integration of sparse models with exact gradients.

The forward pass records every stage state on a tape; the backward pass
replays the unrolled computation in reverse, so the returned gradients are
those of the discrete recurrence that was actually evaluated (not of the
continuous flow).  Memory is O(steps) and the tape shape is static, which is
what makes the training loop deterministic and cheap.

Inputs are held constant within a step (zero-order hold): step t uses U[t].

All public entry points come in two flavors: the single-trajectory functions
(`solve`, `backprop_solve`) that operate on one SparseModel, and `_batch`
variants used by the training loop, where every batch item carries its own
coefficient matrix.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DivergedError
from .library import SparseModel, TermLibrary, _jacobian_batch, evaluate_batch

# Any state component beyond this magnitude aborts the solve; wrong
# coefficient iterates routinely blow up chaotic systems during training.
DIVERGE_LIMIT = 1e6

# Butcher tableaus (explicit): list of rows of stage coefficients, plus the
# combination weights.  The step function is isolated here so a second-order
# method can be configured without touching the tape machinery.
TABLEAUS = {
    "rk4": (
        ((), (0.5,), (0.0, 0.5), (0.0, 0.0, 1.0)),
        (1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0),
    ),
    "rk2": (((), (0.5,)), (0.0, 1.0)),
}


class SolveTape:
    """Recorded intermediates of one batched fixed-step integration.

    Arrays (None where not applicable):
      states  (B, steps+1, n)   integrated trajectory, row 0 = y0
      stages  (B, steps, S, n)  stage states fed to the right-hand side
      ks      (B, steps, S, n)  stage derivatives
      feats   (B, steps, S, L)  library features at each stage state
      u       (B, steps, m)     held input per step (None when m = 0)
      diverged (B,)             first bad step per item, -1 if clean
    """

    def __init__(self, lib, dt, steps, method, states, stages, ks, feats, u, diverged, u_rows=None):
        self.lib = lib
        self.dt = float(dt)
        self.steps = int(steps)
        self.method = method
        self.states = states
        self.stages = stages
        self.ks = ks
        self.feats = feats
        self.u = u
        self.diverged = diverged
        self.u_rows = u_rows  # row count of the U that was passed in

    @property
    def batch(self) -> int:
        return self.states.shape[0]


def solve_batch(thetas, lib: TermLibrary, y0, U, dt, steps, method="rk4"):
    """Integrate a batch of models, one theta per item.

    thetas (B, n, L), y0 (B, n), U (B, N, m) or None when m = 0.
    Returns (Y (B, steps+1, n), SolveTape).  Diverged items are frozen at
    their last finite state and flagged on the tape rather than raising, so
    one bad batch element cannot poison the rest.
    """
    thetas = np.asarray(thetas, dtype=float)
    y0 = np.asarray(y0, dtype=float)
    if dt <= 0:
        raise ContractError(f"dt must be positive, got {dt}")
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    B, n = y0.shape
    if thetas.shape != (B, n, lib.size):
        raise ContractError(
            f"thetas shape {thetas.shape} does not match (B={B}, n={n}, L={lib.size})"
        )
    if lib.m > 0:
        if U is None:
            raise ContractError(f"model has {lib.m} inputs but no U was given")
        U = np.asarray(U, dtype=float)
        if U.ndim != 3 or U.shape[0] != B or U.shape[2] != lib.m:
            raise ContractError(f"U shape {U.shape} does not match (B, N, m={lib.m})")
        if U.shape[1] < steps:
            raise ContractError(f"U has {U.shape[1]} rows, need >= steps = {steps}")
    A, b = TABLEAUS[method]
    S = len(b)

    states = np.zeros((B, steps + 1, n))
    stages = np.zeros((B, steps, S, n))
    ks = np.zeros((B, steps, S, n))
    feats = np.zeros((B, steps, S, lib.size))
    u_used = np.zeros((B, steps, lib.m)) if lib.m > 0 else None
    diverged = np.full(B, -1, dtype=np.int64)

    states[:, 0] = y0
    y = y0.copy()
    active = np.isfinite(y).all(axis=1) & (np.abs(y) <= DIVERGE_LIMIT).all(axis=1)
    diverged[~active] = 0
    for t in range(steps):
        if lib.m > 0:
            u_t = U[:, t, :]
            u_used[:, t] = u_t
        kbuf = np.zeros((B, S, n))
        for s in range(S):
            ys = y.copy()
            for j, a in enumerate(A[s]):
                if a != 0.0:
                    ys = ys + (dt * a) * kbuf[:, j]
            z = np.concatenate([ys, u_t], axis=1) if lib.m > 0 else ys
            f = evaluate_batch(lib, z)
            k = np.einsum("bnl,bl->bn", thetas, f)
            bad = active & ~(
                np.isfinite(ys).all(axis=1)
                & np.isfinite(k).all(axis=1)
                & (np.abs(ys) <= DIVERGE_LIMIT).all(axis=1)
            )
            if bad.any():
                diverged[bad] = t
                active &= ~bad
            # records of inactive items are zeroed so the masked backward
            # pass never multiplies gradients into inf/nan stage values
            stages[:, t, s] = np.where(active[:, None], ys, 0.0)
            feats[:, t, s] = np.where(active[:, None], f, 0.0)
            kbuf[:, s] = np.where(active[:, None], k, 0.0)
        ks[:, t] = kbuf
        y_next = y + dt * np.einsum("s,bsn->bn", np.asarray(b), kbuf)
        bad = active & ~(
            np.isfinite(y_next).all(axis=1)
            & (np.abs(y_next) <= DIVERGE_LIMIT).all(axis=1)
        )
        if bad.any():
            diverged[bad] = t
            active &= ~bad
        y = np.where(active[:, None], y_next, y)
        states[:, t + 1] = y
    tape = SolveTape(
        lib, dt, steps, method, states, stages, ks, feats, u_used, diverged,
        u_rows=None if U is None else U.shape[1],
    )
    return states, tape


def solve(model: SparseModel, y0, U, dt, steps, method="rk4"):
    """Integrate one sparse model from y0 for `steps` fixed steps.

    Returns (Y_est of shape (steps+1, n), SolveTape).  Raises DivergedError
    with the offending step index if the state leaves the finite range.
    """
    lib = model.library
    y0 = np.asarray(y0, dtype=float).reshape(1, -1)
    Ub = None
    if lib.m > 0:
        U = np.asarray(U, dtype=float)
        if U.ndim != 2 or U.shape[1] != lib.m:
            raise ContractError(f"U shape {U.shape} does not match (N, m={lib.m})")
        if U.shape[0] < steps + 1:
            raise ContractError(
                f"U has {U.shape[0]} rows, need >= steps + 1 = {steps + 1}"
            )
        Ub = U[None, :, :]
    Y, tape = solve_batch(model.theta[None], lib, y0, Ub, dt, steps, method)
    if tape.diverged[0] >= 0:
        raise DivergedError("integration diverged", step=int(tape.diverged[0]))
    return Y[0], tape


def replay_tape(tape: SolveTape, thetas) -> np.ndarray:
    """Re-run the integration recorded on a tape; bit-identical by construction."""
    U = tape.u if tape.lib.m > 0 else None
    Y, _ = solve_batch(
        thetas, tape.lib, tape.states[:, 0].copy(), U, tape.dt, tape.steps, tape.method
    )
    return Y


def backprop_solve_batch(tape: SolveTape, thetas, dL_dY):
    """Exact reverse-mode gradients through the recorded integration.

    dL_dY is (B, steps+1, n).  Returns (dL_dtheta (B, n, L),
    dL_dy0 (B, n), dL_dU (B, steps, m) or None).  Items flagged diverged on
    the tape contribute zero gradients.
    """
    thetas = np.asarray(thetas, dtype=float)
    dL_dY = np.asarray(dL_dY, dtype=float)
    lib = tape.lib
    B, _, n = tape.states.shape
    if dL_dY.shape != (B, tape.steps + 1, n):
        raise ContractError(
            f"dL_dY shape {dL_dY.shape} does not match (B={B}, steps+1={tape.steps + 1}, n={n})"
        )
    if thetas.shape != (B, n, lib.size):
        raise ContractError(f"thetas shape {thetas.shape} does not match tape")
    A, b = TABLEAUS[tape.method]
    S = len(b)
    dt = tape.dt

    ok = (tape.diverged < 0)[:, None]
    gtheta = np.zeros_like(thetas)
    gU = np.zeros((B, tape.steps, lib.m)) if lib.m > 0 else None
    lam = dL_dY[:, tape.steps] * ok
    for t in range(tape.steps - 1, -1, -1):
        g_k = np.zeros((B, S, n))
        for s in range(S):
            g_k[:, s] = (dt * b[s]) * lam
        gy_t = lam.copy()
        for s in range(S - 1, -1, -1):
            v = g_k[:, s]
            f = tape.feats[:, t, s]
            gtheta += np.einsum("bn,bl->bnl", v, f)
            w = np.einsum("bnl,bn->bl", thetas, v)  # theta^T v in feature space
            ys = tape.stages[:, t, s]
            z = np.concatenate([ys, tape.u[:, t]], axis=1) if lib.m > 0 else ys
            J = _jacobian_batch(lib, z, range(lib.n + lib.m))  # (B, L, n+m)
            g_z = np.einsum("blv,bl->bv", J, w)
            g_ys = g_z[:, :n]
            if lib.m > 0:
                gU[:, t] += g_z[:, n:] * ok
            gy_t += g_ys
            for j, a in enumerate(A[s]):
                if a != 0.0:
                    g_k[:, j] += (dt * a) * g_ys
        lam = gy_t * ok + dL_dY[:, t] * ok
    gtheta *= ok[:, :, None]
    return gtheta, lam, gU


def backprop_solve(tape: SolveTape, model: SparseModel, dL_dY):
    """Single-model wrapper around `backprop_solve_batch`.

    Returns (dL_dtheta (n, L), dL_dy0 (n,), dL_dU (N, m)); the dL_dU rows
    beyond the last integration step are zero (each step only reads U[t]).
    """
    dL_dY = np.asarray(dL_dY, dtype=float)
    gtheta, gy0, gU = backprop_solve_batch(tape, model.theta[None], dL_dY[None])
    m = model.library.m
    rows = tape.u_rows if tape.u_rows is not None else tape.steps + 1
    dU = np.zeros((rows, m))
    if m > 0:
        dU[: tape.steps] = gU[0]
    return gtheta[0], gy0[0], dU
