"""Batching, the optimization loop, and recovery scoring.

The trajectory is cut into non-overlapping windows; each window is one
training sample (the network maps the measured window to coefficient
estimates, the solver reconstructs the window from its first sample, the MSE
between the two is the loss).  Gradients are averaged per batch and applied
with Adam.  The hard top-p support is refreshed once per epoch from a fixed
reference batch and acts as a frozen gradient mask within the epoch.

Everything is driven by explicit seeds; the same (config, data, seed) run
reproduces the same history and coefficients bit for bit.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, fields

import numpy as np

from . import library as lb
from . import network as nn
from .dynamics import DynamicalSystem, Trajectory, format_float
from .errors import ContractError, DivergedError, InsufficientDataError, TrainingDivergedError
from .library import SparseModel, build_library
from .network import apply_shifts
from .solver import solve


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one recovery run.

    ``order``/``support_size``/``hidden`` are the library order M, the target
    support size p and the GRU width H.  ``solve_steps`` defaults to window-1
    (reconstruct the whole window).

    The support schedule: ``sparsify_warmup`` initial epochs train all
    coefficients, then backward elimination prunes the weakest terms one
    refresh at a time until only ``support_size`` remain after
    ``sparsify_anneal`` epochs; the remainder of the run fine-tunes the
    surviving support.  Only the final-size epochs compete for the
    best-loss snapshot.

    While the support is still shrinking, an L1 penalty of ``l1_weight`` on
    the head's normalized coefficient outputs (lasso on standardized
    features) concentrates shared contributions onto few terms; it is
    switched off for the final phase so the surviving coefficients are fit
    without shrinkage bias.  Reported losses are always the pure
    reconstruction MSE.
    """

    batch_size: int = 5
    window: int = 20
    epochs: int = 500
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    order: int = 3
    support_size: int = 4
    hidden: int = 16
    seed: int = 0
    dt: float = 0.01
    solve_steps: int = 0  # 0 means window - 1
    dense_hidden: tuple = (32,)
    standardize: bool = False
    head_input: str = "last"
    sparsify_warmup: int = 40
    sparsify_anneal: int = 160
    l1_weight: float = 1e-3
    early_stop_loss: float = 1e-12

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.window < 2:
            raise ContractError(f"window must be >= 2, got {self.window}")
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate < 0:
            raise ContractError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.dt <= 0:
            raise ContractError(f"dt must be positive, got {self.dt}")
        if self.head_input != "last":
            raise ContractError(
                f"head_input={self.head_input!r} is not supported (only 'last')"
            )
        if self.sparsify_warmup + self.sparsify_anneal >= self.epochs:
            raise ContractError(
                f"sparsify_warmup + sparsify_anneal "
                f"({self.sparsify_warmup} + {self.sparsify_anneal}) must be < epochs "
                f"({self.epochs}) so at least one epoch trains the target support"
            )
        object.__setattr__(self, "dense_hidden", tuple(self.dense_hidden))

    def echo(self) -> str:
        out = io.StringIO()
        for f in fields(self):
            out.write(f"{f.name} = {getattr(self, f.name)}\n")
        return out.getvalue()


@dataclass
class RecoveredModel:
    """Best-loss snapshot of a training run."""

    model: SparseModel
    shifts: np.ndarray
    history: list
    config: TrainConfig
    best_epoch: int
    params: nn.NetworkParams
    input_mean: np.ndarray = None
    input_std: np.ndarray = None
    coef_scale: np.ndarray = None


@dataclass
class EvalReport:
    reconstruction_mse: float
    coeff_max_abs_err: float = None
    support_precision: float = None
    support_recall: float = None
    diverged: bool = False

    def to_json_dict(self) -> dict:
        mse = self.reconstruction_mse
        return {
            # infinity (diverged re-simulation) is not representable in JSON
            "reconstruction_mse": mse if np.isfinite(mse) else None,
            "coeff_max_abs_err": self.coeff_max_abs_err,
            "support_precision": self.support_precision,
            "support_recall": self.support_recall,
            "diverged": self.diverged,
        }


@dataclass
class Batch:
    """One batch as the 3-D tensor (batch, channels y then u, window)."""

    tensor: np.ndarray
    starts: np.ndarray


def make_batches(traj: Trajectory, batch_size: int, window: int, seed: int):
    """Slice into non-overlapping windows, shuffle, group into full batches.

    Windows have stride = window; a trailing partial window and any final
    short group of windows are dropped.  Each window keeps its absolute
    start index so the solve can align its initial state and inputs.
    """
    N, n, m = traj.N, traj.n, traj.m
    if N < window:
        raise InsufficientDataError(
            f"trajectory has {N} samples, need at least window = {window}"
        )
    starts = np.arange(0, N - window + 1, window)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(starts))
    starts = starts[perm]
    batches = []
    for b in range(len(starts) // batch_size):
        chunk = starts[b * batch_size : (b + 1) * batch_size]
        tensor = np.zeros((batch_size, n + m, window))
        for i, s in enumerate(chunk):
            tensor[i, :n] = traj.states[s : s + window].T
            if m:
                tensor[i, n:] = traj.inputs[s : s + window].T
        batches.append(Batch(tensor=tensor, starts=chunk.copy()))
    return batches


def _windows(traj: Trajectory, window: int):
    """All non-overlapping windows in natural order: (W, k, n), (W, k, m)."""
    N = traj.N
    starts = np.arange(0, N - window + 1, window)
    Yw = np.stack([traj.states[s : s + window] for s in starts])
    Uw = np.stack([traj.inputs[s : s + window] for s in starts])
    return Yw, Uw, starts


class Adam:
    """Adaptive moment estimation over a fixed, ordered parameter list."""

    def __init__(self, items, lr, beta1, beta2, eps):
        self.items = items
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(arr) for name, arr in items}
        self.v = {name: np.zeros_like(arr) for name, arr in items}

    def step(self, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, arr in self.items:
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            arr -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train(config: TrainConfig, traj: Trajectory) -> RecoveredModel:
    """Run the full recovery loop and return the best-loss model.

    Per epoch and batch: windows -> GRU -> dense head -> frozen top-p mask ->
    input shifts -> fixed-step solve from each window's first sample -> MSE ->
    backward -> Adam.  Diverged windows contribute a clipped loss of 1e6 and
    no gradient.  Raises TrainingDivergedError with a diagnostics dump if the
    parameters themselves go non-finite.
    """
    if abs(config.dt - traj.dt) > 1e-12 * max(1.0, traj.dt):
        raise ContractError(
            f"config.dt = {config.dt} does not match trajectory dt = {traj.dt}"
        )
    n, m = traj.n, traj.m
    lib = build_library(n, m, config.order)
    total = n * lib.size
    if not 1 <= config.support_size <= total:
        raise ContractError(
            f"support_size must be in 1..{total} for n={n}, library size={lib.size}"
        )
    k = config.window
    steps = config.solve_steps if config.solve_steps else k - 1
    if not 1 <= steps <= k - 1:
        raise ContractError(f"solve_steps must be in 1..window-1, got {steps}")

    Yw_all, Uw_all, _ = _windows(traj, k)
    W = Yw_all.shape[0]
    S_B = config.batch_size
    if W < S_B:
        raise InsufficientDataError(
            f"only {W} windows of length {k} available, need at least one batch of {S_B}"
        )
    Uw_or_none = Uw_all if m else None

    input_mean = input_std = None
    if config.standardize:
        chan = np.concatenate([traj.states, traj.inputs], axis=1)
        input_mean = chan.mean(axis=0)
        input_std = chan.std(axis=0)
        input_std = np.where(input_std < 1e-12, 1.0, input_std)

    params = nn.init_params(lib, config.hidden, config.dense_hidden, config.seed)
    items = nn.param_items(params)
    opt = Adam(items, config.learning_rate, config.beta1, config.beta2, config.eps)
    shuffle_rng = np.random.default_rng(config.seed)

    # the head emits coefficients in per-term normalized units: theta_j is
    # its output times 1/rms(feature_j).  This conditions the optimization
    # (all coefficients live on comparable scales) and makes head-output
    # magnitude a contribution ranking for the support selection.
    Z_all = np.concatenate([traj.states, traj.inputs], axis=1)
    feature_rms = np.sqrt(np.mean(lb.evaluate_batch(lib, Z_all) ** 2, axis=0))
    feature_rms = np.maximum(feature_rms, 1e-12)
    coef_scale = 1.0 / feature_rms

    def reference_theta():
        # mean head output over every window (in natural order) is the
        # selection signal for the support refresh
        theta_raw, shifts = nn.head_outputs_batch(
            params, lib, Yw_all, Uw_or_none, input_mean, input_std, coef_scale
        )
        return theta_raw.mean(axis=0), shifts.mean(axis=0)

    def support_size_at(epoch: int) -> int:
        t = epoch - config.sparsify_warmup
        if t < 0:
            return total
        if t >= config.sparsify_anneal:
            return config.support_size
        frac = (t + 1) / config.sparsify_anneal
        return max(config.support_size, int(round(total - (total - config.support_size) * frac)))

    history = []
    best_loss = np.inf
    best_epoch = -1
    best_state = None
    mask = np.ones((n, lib.size), dtype=bool)
    for epoch in range(config.epochs):
        p_epoch = support_size_at(epoch)
        # backward elimination: prune the weakest active coefficients down to
        # this epoch's target size; pruned entries stay out (the survivors
        # re-fit between cuts, redistributing shared contributions)
        if int(mask.sum()) > p_epoch:
            theta_ref, _ = reference_theta()
            score = np.abs(theta_ref) * feature_rms[None, :]
            score[~mask] = np.inf
            order = np.argsort(score, axis=None)
            for flat in order[: int(mask.sum()) - p_epoch]:
                mask[np.unravel_index(flat, mask.shape)] = False
        l1 = config.l1_weight if epoch < config.sparsify_warmup + config.sparsify_anneal else 0.0
        perm = shuffle_rng.permutation(W)
        epoch_losses = []
        for b in range(W // S_B):
            sel = perm[b * S_B : (b + 1) * S_B]
            losses, (theta_raw, _), tape = nn.network_forward_batch(
                params, lib, Yw_all[sel], Uw_all[sel] if m else None,
                mask, config.dt, steps, input_mean, input_std, coef_scale,
            )
            extra_dout = None
            if l1 > 0.0:
                # lasso on the head's normalized coefficient outputs
                pen = (l1 / S_B) * np.sign(theta_raw)
                extra_dout = np.concatenate(
                    [pen.reshape(S_B, -1), np.zeros((S_B, m))], axis=1
                )
            grads = nn.network_backward_batch(params, tape, extra_dout=extra_dout)
            opt.step(grads)
            epoch_losses.append(float(np.mean(losses)))
            for name, arr in items:
                if not np.all(np.isfinite(arr)):
                    raise TrainingDivergedError(
                        f"parameter {name} became non-finite",
                        diagnostics={
                            "epoch": epoch, "batch": b,
                            "loss_history": history + [epoch_losses[-1]],
                        },
                    )
        epoch_loss = float(np.mean(epoch_losses))
        history.append(epoch_loss)
        # only epochs already at the target support compete for the snapshot;
        # wider-support losses are not comparable
        if p_epoch == config.support_size and epoch_loss < best_loss:
            best_loss = epoch_loss
            best_epoch = epoch
            best_state = (
                [arr.copy() for _, arr in items],
                mask.copy(),
            )
        if p_epoch == config.support_size and epoch_loss <= config.early_stop_loss:
            break

    # restore the best parameters and distill one model from all windows
    arrays, best_mask = best_state
    for (name, arr), saved in zip(items, arrays):
        arr[...] = saved
    theta_raw, shifts = nn.head_outputs_batch(
        params, lib, Yw_all, Uw_or_none, input_mean, input_std, coef_scale
    )
    theta_mean = theta_raw.mean(axis=0)
    shifts_mean = shifts.mean(axis=0)
    rows, cols = np.nonzero(best_mask)
    support = set(zip(rows.tolist(), cols.tolist()))
    model = SparseModel(lib, theta_mean * best_mask, support=support,
                        degenerate=bool(np.min(np.abs(theta_mean[best_mask])) == 0.0))
    return RecoveredModel(
        model=model,
        shifts=shifts_mean,
        history=history,
        config=config,
        best_epoch=best_epoch,
        params=params,
        input_mean=input_mean,
        input_std=input_std,
        coef_scale=coef_scale,
    )


def evaluate(recovered: RecoveredModel, traj: Trajectory, truth: DynamicalSystem = None) -> EvalReport:
    """Re-simulate the recovered model over the full horizon and score it.

    With ground truth, also reports the largest coefficient error on the
    union support and the support precision/recall (matched by exponent
    vectors, so libraries of different order compare correctly).
    """
    model = recovered.model
    if model.library.n != traj.n or model.library.m != traj.m:
        raise ContractError(
            f"model dims (n={model.library.n}, m={model.library.m}) do not match "
            f"trajectory (n={traj.n}, m={traj.m})"
        )
    U = apply_shifts(traj.inputs, recovered.shifts) if traj.m else None
    try:
        Y_est, _ = solve(model, traj.states[0], U, traj.dt, traj.N - 1)
        mse = float(np.mean((Y_est - traj.states) ** 2))
        diverged = False
    except DivergedError:
        mse = float("inf")
        diverged = True
    report = EvalReport(reconstruction_mse=mse, diverged=diverged)
    if truth is not None:
        report.coeff_max_abs_err = _coeff_error(model, truth)
        prec, rec = _support_metrics(model, truth)
        report.support_precision = prec
        report.support_recall = rec
    return report


def _coeff_error(model: SparseModel, truth: DynamicalSystem) -> float:
    est = {(r, model.library.terms[c].exponents): model.theta[r, c]
           for r, c in model.support}
    tru = {(r, truth.library.terms[c].exponents): truth.theta_true[r, c]
           for r, c in truth.model().support}
    # exponent vectors may differ in length when input counts differ; they
    # are compared as-is because n and m already matched in evaluate()
    err = 0.0
    for key in set(est) | set(tru):
        err = max(err, abs(est.get(key, 0.0) - tru.get(key, 0.0)))
    return float(err)


def _support_metrics(model: SparseModel, truth: DynamicalSystem):
    est = model.support_exponents()
    tru = truth.model().support_exponents()
    hit = len(est & tru)
    precision = hit / len(est) if est else 1.0
    recall = hit / len(tru) if tru else 1.0
    return float(precision), float(recall)


# ---------------------------------------------------------------------------
# run artifacts
# ---------------------------------------------------------------------------

def write_loss_csv(path, history) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(history):
            fh.write(f"{i},{format_float(v)}\n")


def recovered_checkpoint(recovered: RecoveredModel) -> dict:
    cfg = recovered.config
    lib = recovered.model.library
    extra = {
        "standardize": bool(cfg.standardize),
        "input_mean": None if recovered.input_mean is None else recovered.input_mean.tolist(),
        "input_std": None if recovered.input_std is None else recovered.input_std.tolist(),
        "coef_scale": None if recovered.coef_scale is None else recovered.coef_scale.tolist(),
        "best_epoch": recovered.best_epoch,
    }
    data = nn.checkpoint_dict(
        recovered.params, lib, cfg.hidden, cfg.dense_hidden, cfg.support_size,
        recovered={
            "theta": recovered.model.theta.tolist(),
            "support": sorted([list(rc) for rc in recovered.model.support]),
            "shifts": recovered.shifts.tolist(),
            "degenerate": recovered.model.degenerate,
        },
        extra=extra,
    )
    return data


def model_from_checkpoint(data: dict):
    """Rebuild the recovered SparseModel and shifts from a checkpoint dict."""
    dims = data["dims"]
    lib = build_library(dims["n"], dims["m"], dims["M"])
    rec = data["recovered"]
    support = {tuple(rc) for rc in rec["support"]}
    model = SparseModel(lib, np.asarray(rec["theta"], dtype=float),
                        support=support, degenerate=rec.get("degenerate", False))
    shifts = np.asarray(rec["shifts"], dtype=float)
    return model, shifts


def write_eval_report(path, report: EvalReport) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report.to_json_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
