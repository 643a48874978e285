"""Recurrent coefficient estimator with hand-written reverse-mode gradients.

A window of measurements runs through a GRU encoder; the final hidden state
feeds a small ReLU MLP whose output splits into a dense coefficient matrix
(one row per state equation over the term library) and one additive shift per
input channel.  The coefficients are hard-thresholded to the p largest
magnitudes, the shifted inputs and the window's first sample go through the
fixed-step solver, and the loss is the mean squared error between the solved
and the measured window.

Everything here is differentiated manually.  The top-p selection acts as a
frozen mask inside an epoch: gradients flow straight through the selected
entries and are exactly zero elsewhere.

Batched variants (suffix ``_batch``) carry a leading window axis and are what
the training loop calls; the unsuffixed functions operate on one sequence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .library import INDEX_MAP_VERSION, SparseModel, TermLibrary
from .solver import backprop_solve_batch, solve_batch

# Loss assigned to a window whose solve diverged; its gradient is zero.
DIVERGED_WINDOW_LOSS = 1e6


def _sigmoid(x):
    # tanh form saturates cleanly instead of overflowing exp
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class GruParams:
    """Gate weights, each (H, H+D); concat order is [h_prev, x]."""

    Wz: np.ndarray
    Wr: np.ndarray
    Wa: np.ndarray
    bias_z: np.ndarray
    bias_r: np.ndarray
    bias_c: np.ndarray

    @property
    def hidden(self) -> int:
        return self.Wz.shape[0]

    @property
    def input_size(self) -> int:
        return self.Wz.shape[1] - self.Wz.shape[0]


@dataclass
class DenseParams:
    """MLP layers, ReLU on hidden layers, identity on the output layer."""

    weights: list
    biases: list

    @property
    def output_size(self) -> int:
        return self.weights[-1].shape[0]


@dataclass
class NetworkParams:
    gru: GruParams
    dense: DenseParams


@dataclass
class NetworkOutput:
    """Raw head output plus the hard-thresholded model."""

    theta_raw: np.ndarray
    shifts: np.ndarray
    theta_sparse: SparseModel


def init_params(library: TermLibrary, hidden: int, dense_hidden, seed: int) -> NetworkParams:
    """Uniform(-s, s) init with s = 1/sqrt(fan-in), from one seeded stream.

    Draw order is fixed (gate weights, gate biases, then dense layers) so a
    seed pins every parameter bit-for-bit.
    """
    n, m = library.n, library.m
    D = n + m
    out_size = n * library.size + m
    rng = np.random.default_rng(seed)
    s = 1.0 / np.sqrt(hidden + D)
    gru = GruParams(
        Wz=rng.uniform(-s, s, size=(hidden, hidden + D)),
        Wr=rng.uniform(-s, s, size=(hidden, hidden + D)),
        Wa=rng.uniform(-s, s, size=(hidden, hidden + D)),
        bias_z=rng.uniform(-s, s, size=hidden),
        bias_r=rng.uniform(-s, s, size=hidden),
        bias_c=rng.uniform(-s, s, size=hidden),
    )
    widths = [hidden, *dense_hidden, out_size]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        sl = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-sl, sl, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-sl, sl, size=fan_out))
    return NetworkParams(gru=gru, dense=DenseParams(weights=weights, biases=biases))


def param_items(params: NetworkParams):
    """Deterministically ordered (name, array) pairs, for optimizers and I/O."""
    items = [
        ("gru.Wz", params.gru.Wz),
        ("gru.Wr", params.gru.Wr),
        ("gru.Wa", params.gru.Wa),
        ("gru.bias_z", params.gru.bias_z),
        ("gru.bias_r", params.gru.bias_r),
        ("gru.bias_c", params.gru.bias_c),
    ]
    for i, (W, b) in enumerate(zip(params.dense.weights, params.dense.biases)):
        items.append((f"dense.W{i}", W))
        items.append((f"dense.b{i}", b))
    return items


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------

class GruTape:
    def __init__(self, x, h_prev, z, r, c, h0):
        self.x = x          # (B, k, D)
        self.h_prev = h_prev  # (B, k, H)
        self.z = z
        self.r = r
        self.c = c
        self.h0 = h0


def gru_forward_batch(params: GruParams, seqs: np.ndarray, h0: np.ndarray):
    """seqs (B, k, D), h0 (B, H) -> hidden states (B, k, H) and a tape.

    Per step: z and r from sigmoid gates over [h_prev, x]; candidate
    c = tanh(Wa @ [r*h_prev, x] + bias); blend h = z*h_prev + (1-z)*c.
    """
    B, k, D = seqs.shape
    H = params.hidden
    if D != params.input_size:
        raise ContractError(f"sequence feature size {D} != params input size {params.input_size}")
    hs = np.zeros((B, k, H))
    tx = np.zeros((B, k, D))
    th_prev = np.zeros((B, k, H))
    tz = np.zeros((B, k, H))
    tr = np.zeros((B, k, H))
    tc = np.zeros((B, k, H))
    h = h0.copy()
    for t in range(k):
        x = seqs[:, t]
        concat = np.concatenate([h, x], axis=1)
        z = _sigmoid(concat @ params.Wz.T + params.bias_z)
        r = _sigmoid(concat @ params.Wr.T + params.bias_r)
        concat_c = np.concatenate([r * h, x], axis=1)
        c = np.tanh(concat_c @ params.Wa.T + params.bias_c)
        tx[:, t], th_prev[:, t], tz[:, t], tr[:, t], tc[:, t] = x, h, z, r, c
        h = z * h + (1.0 - z) * c
        hs[:, t] = h
    return hs, GruTape(tx, th_prev, tz, tr, tc, h0.copy())


def gru_backward_batch(params: GruParams, tape: GruTape, d_hs: np.ndarray):
    """Backpropagation through time.

    d_hs (B, k, H) holds the upstream gradient at every step (zero rows for
    steps without one).  Returns ({name: grad}, dL/dh0).
    """
    B, k, H = d_hs.shape
    gWz = np.zeros_like(params.Wz)
    gWr = np.zeros_like(params.Wr)
    gWa = np.zeros_like(params.Wa)
    gbz = np.zeros_like(params.bias_z)
    gbr = np.zeros_like(params.bias_r)
    gbc = np.zeros_like(params.bias_c)
    dh = np.zeros((B, H))
    for t in range(k - 1, -1, -1):
        dh = dh + d_hs[:, t]
        x, h_prev = tape.x[:, t], tape.h_prev[:, t]
        z, r, c = tape.z[:, t], tape.r[:, t], tape.c[:, t]
        concat = np.concatenate([h_prev, x], axis=1)
        concat_c = np.concatenate([r * h_prev, x], axis=1)
        dz = dh * (h_prev - c)
        dc = dh * (1.0 - z)
        dh_prev = dh * z
        dac = dc * (1.0 - c * c)
        gWa += dac.T @ concat_c
        gbc += dac.sum(axis=0)
        dconcat_c = dac @ params.Wa
        drh = dconcat_c[:, :H]
        dr = drh * h_prev
        dh_prev = dh_prev + drh * r
        daz = dz * z * (1.0 - z)
        gWz += daz.T @ concat
        gbz += daz.sum(axis=0)
        dh_prev = dh_prev + (daz @ params.Wz)[:, :H]
        dar = dr * r * (1.0 - r)
        gWr += dar.T @ concat
        gbr += dar.sum(axis=0)
        dh_prev = dh_prev + (dar @ params.Wr)[:, :H]
        dh = dh_prev
    grads = {
        "gru.Wz": gWz, "gru.Wr": gWr, "gru.Wa": gWa,
        "gru.bias_z": gbz, "gru.bias_r": gbr, "gru.bias_c": gbc,
    }
    return grads, dh


def gru_forward(params: GruParams, sequence: np.ndarray, h0: np.ndarray):
    """Single-sequence wrapper: sequence (k, D), h0 (H,) -> ((k, H), tape)."""
    sequence = np.asarray(sequence, dtype=float)
    h0 = np.asarray(h0, dtype=float)
    hs, tape = gru_forward_batch(params, sequence[None], h0[None])
    return hs[0], tape


# ---------------------------------------------------------------------------
# dense head
# ---------------------------------------------------------------------------

class DenseTape:
    def __init__(self, activations, pres):
        self.activations = activations  # layer inputs, len = n_layers
        self.pres = pres                # pre-activations of hidden layers


def dense_forward_batch(params: DenseParams, h: np.ndarray):
    a = h
    activations = []
    pres = []
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        activations.append(a)
        pre = a @ W.T + b
        if i < last:
            pres.append(pre)
            a = np.maximum(pre, 0.0)
        else:
            a = pre
    return a, DenseTape(activations, pres)


def dense_backward_batch(params: DenseParams, tape: DenseTape, d_out: np.ndarray):
    grads = {}
    da = d_out
    last = len(params.weights) - 1
    for i in range(last, -1, -1):
        grads[f"dense.W{i}"] = da.T @ tape.activations[i]
        grads[f"dense.b{i}"] = da.sum(axis=0)
        da = da @ params.weights[i]
        if i > 0:
            da = da * (tape.pres[i - 1] > 0.0)
    return grads, da


def dense_forward(params: DenseParams, h_final: np.ndarray, n: int, lib_size: int, q: int):
    """One hidden vector -> (theta_raw (n, lib_size), shifts (q,), tape)."""
    h_final = np.asarray(h_final, dtype=float)
    out, tape = dense_forward_batch(params, h_final[None])
    theta_raw, shifts = split_head_output(out, n, lib_size, q)
    return theta_raw[0], shifts[0], tape


def split_head_output(out: np.ndarray, n: int, lib_size: int, q: int):
    expected = n * lib_size + q
    if out.shape[1] != expected:
        raise ContractError(f"head output width {out.shape[1]} != n*L+q = {expected}")
    theta_raw = out[:, : n * lib_size].reshape(out.shape[0], n, lib_size)
    shifts = out[:, n * lib_size:]
    return theta_raw, shifts


# ---------------------------------------------------------------------------
# sparsification, shifts, loss
# ---------------------------------------------------------------------------

def selection_mask(theta_raw: np.ndarray, p: int) -> np.ndarray:
    """Boolean mask of the p largest-magnitude entries.

    Ties (including exact zeros) go to the smallest flattened row-major
    index, so the selection is total and deterministic.
    """
    flat = np.abs(theta_raw).ravel()
    if not 1 <= p <= flat.size:
        raise ContractError(f"p must be in 1..{flat.size}, got {p}")
    order = np.lexsort((np.arange(flat.size), -flat))
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:p]] = True
    return mask.reshape(theta_raw.shape)


def sparsify(theta_raw: np.ndarray, p: int, library: TermLibrary) -> SparseModel:
    """Keep the p largest-magnitude coefficients, zero the rest."""
    theta_raw = np.asarray(theta_raw, dtype=float)
    if theta_raw.shape != (library.n, library.size):
        raise ContractError(
            f"theta_raw shape {theta_raw.shape} != (n={library.n}, L={library.size})"
        )
    mask = selection_mask(theta_raw, p)
    rows, cols = np.nonzero(mask)
    support = set(zip(rows.tolist(), cols.tolist()))
    degenerate = bool(np.min(np.abs(theta_raw[mask])) == 0.0)
    return SparseModel(library, theta_raw * mask, support=support, degenerate=degenerate)


def apply_shifts(U: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Add a per-channel offset to every row of U."""
    U = np.asarray(U, dtype=float)
    shifts = np.asarray(shifts, dtype=float).reshape(-1)
    if U.ndim != 2 or U.shape[1] != shifts.shape[0]:
        raise ContractError(f"U shape {U.shape} does not match {shifts.shape[0]} shifts")
    return U + shifts[None, :]


def ode_loss(Y: np.ndarray, Y_est: np.ndarray) -> float:
    """Mean squared error over all N*n entries."""
    Y = np.asarray(Y, dtype=float)
    Y_est = np.asarray(Y_est, dtype=float)
    if Y.shape != Y_est.shape:
        raise ContractError(f"shape mismatch: Y {Y.shape} vs Y_est {Y_est.shape}")
    diff = Y - Y_est
    return float(np.mean(diff * diff))


# ---------------------------------------------------------------------------
# composed pipeline: GRU -> dense -> mask -> shifts -> SOLVE -> loss
# ---------------------------------------------------------------------------

class PipelineTape:
    def __init__(self, gru_tape, dense_tape, solve_tape, mask, theta_masked,
                 Yw, Y_est, diverged, dims, coef_scale=None):
        self.gru_tape = gru_tape
        self.dense_tape = dense_tape
        self.solve_tape = solve_tape
        self.mask = mask
        self.theta_masked = theta_masked
        self.Yw = Yw
        self.Y_est = Y_est
        self.diverged = diverged
        self.dims = dims  # (n, m, L, H, k)
        self.coef_scale = coef_scale


def head_outputs_batch(params: NetworkParams, library: TermLibrary,
                       Yw: np.ndarray, Uw, input_mean=None, input_std=None,
                       coef_scale=None):
    """GRU + dense head only (no solve): raw coefficients and shifts per window."""
    B, k, n = Yw.shape
    X = Yw if library.m == 0 else np.concatenate([Yw, Uw], axis=2)
    if input_mean is not None:
        X = (X - input_mean) / input_std
    hs, _ = gru_forward_batch(params.gru, X, np.zeros((B, params.gru.hidden)))
    out, _ = dense_forward_batch(params.dense, hs[:, -1])
    theta_raw, shifts = split_head_output(out, n, library.size, library.m)
    if coef_scale is not None:
        theta_raw = theta_raw * coef_scale[None, None, :]
    return theta_raw, shifts


def network_forward_batch(params: NetworkParams, library: TermLibrary,
                          Yw: np.ndarray, Uw, mask: np.ndarray, dt: float,
                          steps=None, input_mean=None, input_std=None,
                          coef_scale=None):
    """Full pipeline over a batch of windows.

    Yw (B, k, n), Uw (B, k, m) or None.  ``mask`` is the epoch's frozen
    support selection.  ``coef_scale`` (library size,) multiplies the head's
    coefficient block, letting the head work in per-term normalized units
    while theta stays in natural units; gradients account for it.  Returns
    (per-window losses (B,), outputs, tape); diverged windows get the clip
    loss and are flagged on the tape.
    """
    B, k, n = Yw.shape
    m = library.m
    H = params.gru.hidden
    X = Yw if m == 0 else np.concatenate([Yw, Uw], axis=2)
    if input_mean is not None:
        X = (X - input_mean) / input_std
    hs, gru_tape = gru_forward_batch(params.gru, X, np.zeros((B, H)))
    out, dense_tape = dense_forward_batch(params.dense, hs[:, -1])
    theta_raw, shifts = split_head_output(out, n, library.size, m)
    if coef_scale is not None:
        theta_raw = theta_raw * coef_scale[None, None, :]
    theta_masked = theta_raw * mask[None, :, :]
    if steps is None:
        steps = k - 1
    U_solve = None
    if m > 0:
        U_solve = Uw + shifts[:, None, :]
    Y_est, solve_tape = solve_batch(theta_masked, library, Yw[:, 0].copy(), U_solve, dt, steps)
    diverged = solve_tape.diverged >= 0
    target = Yw[:, : steps + 1]
    diff = Y_est - target
    losses = np.mean(diff * diff, axis=(1, 2))
    losses = np.where(diverged, DIVERGED_WINDOW_LOSS, losses)
    tape = PipelineTape(gru_tape, dense_tape, solve_tape, mask, theta_masked,
                        target, Y_est, diverged, (n, m, library.size, H, k),
                        coef_scale=coef_scale)
    return losses, (theta_raw, shifts), tape


def network_backward_batch(params: NetworkParams, tape: PipelineTape, upstream=1.0,
                           extra_dout=None):
    """Gradients of mean(per-window loss) * upstream w.r.t. all parameters.

    The sparsify mask gates the coefficient gradient: entries outside the
    epoch's support receive exactly zero.  Diverged windows contribute
    nothing.  ``extra_dout`` (B, n*L+q) lets the caller add the gradient of
    an auxiliary head-level loss term (e.g. a sparsity penalty) without
    touching the reconstruction path.
    """
    n, m, L, H, k = tape.dims
    B = tape.Yw.shape[0]
    steps = tape.solve_tape.steps
    ok = ~tape.diverged
    # d mean-loss / d Y_est, zeroed for diverged windows
    scale = upstream / (B * (steps + 1) * n)
    dY_est = 2.0 * scale * (tape.Y_est - tape.Yw)
    dY_est[~ok] = 0.0
    dtheta_masked, _, dU = backprop_solve_batch(tape.solve_tape, tape.theta_masked, dY_est)
    dtheta_raw = dtheta_masked * tape.mask[None, :, :]
    if tape.coef_scale is not None:
        dtheta_raw = dtheta_raw * tape.coef_scale[None, None, :]
    if m > 0:
        dshifts = dU.sum(axis=1)
        dshifts[~ok] = 0.0
    else:
        dshifts = np.zeros((B, 0))
    dout = np.concatenate([dtheta_raw.reshape(B, n * L), dshifts], axis=1)
    if extra_dout is not None:
        dout = dout + extra_dout
    dense_grads, dh_last = dense_backward_batch(params.dense, tape.dense_tape, dout)
    d_hs = np.zeros((B, k, H))
    d_hs[:, -1] = dh_last
    gru_grads, _ = gru_backward_batch(params.gru, tape.gru_tape, d_hs)
    return {**gru_grads, **dense_grads}


def network_forward(params: NetworkParams, library: TermLibrary, Yw, Uw, p: int, dt: float):
    """Single-window convenience: computes its own mask via sparsify.

    Returns (loss, NetworkOutput, PipelineTape).
    """
    Yw = np.asarray(Yw, dtype=float)
    Uwb = None if library.m == 0 else np.asarray(Uw, dtype=float)[None]
    # probe pass to pick the support, then the real pass under that mask
    losses, (theta_raw, shifts), tape = network_forward_batch(
        params, library, Yw[None], Uwb, np.ones((library.n, library.size), dtype=bool), dt
    )
    model = sparsify(theta_raw[0], p, library)
    mask = np.zeros((library.n, library.size), dtype=bool)
    for r, c in model.support:
        mask[r, c] = True
    losses, (theta_raw, shifts), tape = network_forward_batch(
        params, library, Yw[None], Uwb, mask, dt
    )
    out = NetworkOutput(theta_raw=theta_raw[0], shifts=shifts[0],
                        theta_sparse=sparsify(theta_raw[0], p, library))
    return float(losses[0]), out, tape


def network_backward(params: NetworkParams, tape: PipelineTape, upstream=1.0):
    """Single-window wrapper around `network_backward_batch`."""
    return network_backward_batch(params, tape, upstream=upstream)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def checkpoint_dict(params: NetworkParams, library: TermLibrary, hidden: int,
                    dense_hidden, p: int, recovered=None, extra=None) -> dict:
    """JSON-ready snapshot: dimensions, index-map version, all weights."""
    data = {
        "format_version": CHECKPOINT_VERSION,
        "index_map_version": INDEX_MAP_VERSION,
        "dims": {
            "n": library.n, "m": library.m, "M": library.order,
            "H": hidden, "p": p, "q": library.m,
        },
        "dense_hidden": list(dense_hidden),
        "gru": {
            "Wz": params.gru.Wz.tolist(), "Wr": params.gru.Wr.tolist(),
            "Wa": params.gru.Wa.tolist(), "bias_z": params.gru.bias_z.tolist(),
            "bias_r": params.gru.bias_r.tolist(), "bias_c": params.gru.bias_c.tolist(),
        },
        "dense": {
            "weights": [W.tolist() for W in params.dense.weights],
            "biases": [b.tolist() for b in params.dense.biases],
        },
    }
    if recovered is not None:
        data["recovered"] = recovered
    if extra:
        data.update(extra)
    return data


def save_checkpoint(path, data: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if data.get("index_map_version") != INDEX_MAP_VERSION:
        raise ContractError(
            f"checkpoint index map version {data.get('index_map_version')!r} "
            f"does not match this build ({INDEX_MAP_VERSION})"
        )
    return data


def params_from_checkpoint(data: dict) -> NetworkParams:
    g = data["gru"]
    d = data["dense"]
    gru = GruParams(
        Wz=np.asarray(g["Wz"], dtype=float), Wr=np.asarray(g["Wr"], dtype=float),
        Wa=np.asarray(g["Wa"], dtype=float), bias_z=np.asarray(g["bias_z"], dtype=float),
        bias_r=np.asarray(g["bias_r"], dtype=float), bias_c=np.asarray(g["bias_c"], dtype=float),
    )
    dense = DenseParams(
        weights=[np.asarray(W, dtype=float) for W in d["weights"]],
        biases=[np.asarray(b, dtype=float) for b in d["biases"]],
    )
    return NetworkParams(gru=gru, dense=dense)
