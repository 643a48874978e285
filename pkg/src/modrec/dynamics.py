"""Benchmark dynamical systems, trajectory generation and diagnostics.

Systems are defined by a coefficient matrix over a polynomial term library
(`library.build_library`); ground truth trajectories come from the same
fixed-step integrator the recovery loss uses (`solver.solve`), so simulated
data and reconstructed estimates are bit-comparable.

The built-in registry ships predator-prey and Lorenz configurations as data
files; input-driven aircraft or epidemic systems are supplied by the user in
the same config format and join the registry when their files are passed in.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from decimal import Decimal
from importlib import resources

import numpy as np

from . import solver
from .errors import ContractError, DataFormatError, DivergedError, UnknownSystemError
from .library import SparseModel, TermLibrary, build_library

# Relative finite-difference step for the per-coefficient sensitivity probe.
SENSITIVITY_REL_STEP = 1e-4


@dataclass(frozen=True)
class DynamicalSystem:
    """A named sparse polynomial ODE  ydot = theta_true @ features(y, u)."""

    name: str
    library: TermLibrary
    theta_true: np.ndarray
    description: str = ""

    def __post_init__(self):
        theta = np.asarray(self.theta_true, dtype=float)
        if theta.shape != (self.library.n, self.library.size):
            raise ContractError(
                f"theta_true shape {theta.shape} does not match "
                f"(n={self.library.n}, library size={self.library.size})"
            )
        theta = theta.copy()
        theta.setflags(write=False)
        object.__setattr__(self, "theta_true", theta)

    @property
    def n(self) -> int:
        return self.library.n

    @property
    def m(self) -> int:
        return self.library.m

    def model(self) -> SparseModel:
        return SparseModel(self.library, self.theta_true)


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled states Y (N, n) and inputs U (N, m) at spacing dt."""

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    dt: float

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        states = np.asarray(self.states, dtype=float)
        inputs = np.asarray(self.inputs, dtype=float)
        if states.ndim != 2 or inputs.ndim != 2:
            raise ContractError("states and inputs must be 2-D arrays")
        N = times.shape[0]
        if states.shape[0] != N or inputs.shape[0] != N:
            raise ContractError(
                f"row counts differ: times {N}, states {states.shape[0]}, "
                f"inputs {inputs.shape[0]}"
            )
        if self.dt <= 0:
            raise ContractError(f"dt must be positive, got {self.dt}")
        if N > 1:
            gaps = np.diff(times)
            if np.any(np.abs(gaps - self.dt) > 1e-12 * max(1.0, abs(self.dt))):
                raise ContractError("times are not uniformly spaced by dt")
        for arr in (times, states, inputs):
            arr.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "inputs", inputs)

    @property
    def N(self) -> int:
        return self.times.shape[0]

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def m(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class IdentifiabilityReport:
    """Per-coefficient trajectory sensitivities over a probe horizon.

    ``support`` orders the active coefficients (row, column) row-major;
    ``sensitivities[i]`` is the finite-difference sensitivity norm of
    coefficient i.  ``flagged`` holds indices with sensitivity below the
    tolerance; ``indeterminate`` holds indices whose perturbed integration
    diverged (no verdict either way).
    """

    support: tuple
    sensitivities: np.ndarray
    horizon: float
    flagged: frozenset
    indeterminate: frozenset


def simulate(system: DynamicalSystem, y0, input_signal=None, dt=0.01, steps=1000) -> Trajectory:
    """Integrate the true dynamics with fixed-step RK4.

    ``input_signal`` maps time -> m-vector and is sampled once per step
    (held constant within the step, matching the recovery-side solver).
    Raises DivergedError with the failing step index if the state blows up.
    """
    y0 = np.asarray(y0, dtype=float).reshape(-1)
    if not np.all(np.isfinite(y0)):
        raise ContractError("y0 must be finite")
    if y0.shape[0] != system.n:
        raise ContractError(f"y0 has {y0.shape[0]} entries, system has n={system.n}")
    times = np.arange(steps + 1) * dt
    if system.m > 0:
        if input_signal is None:
            raise ContractError(f"system {system.name!r} needs an input signal (m={system.m})")
        U = np.array([np.asarray(input_signal(t), dtype=float).reshape(-1) for t in times])
        if U.shape[1] != system.m:
            raise ContractError(f"input signal returned {U.shape[1]} values, expected m={system.m}")
    else:
        U = np.zeros((steps + 1, 0))
    Y, _ = solver.solve(system.model(), y0, U if system.m > 0 else None, dt, steps)
    return Trajectory(times=times, states=Y, inputs=U, dt=float(dt))


def add_noise(traj: Trajectory, sigma: float, seed: int) -> Trajectory:
    """Perturb states with i.i.d. zero-mean Gaussian noise, sd sigma per channel."""
    if sigma < 0:
        raise ContractError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return traj
    rng = np.random.default_rng(seed)
    noisy = traj.states + rng.normal(0.0, sigma, size=traj.states.shape)
    return Trajectory(times=traj.times, states=noisy, inputs=traj.inputs, dt=traj.dt)


def identifiability_check(
    system: DynamicalSystem, y0, input_signal=None, horizon=5.0, tol=1e-8, dt=0.01
) -> IdentifiabilityReport:
    """Probe whether each active coefficient leaves a trace in the data.

    Central finite differences of the whole trajectory with respect to each
    theta entry in the support; coefficients whose sensitivity norm falls
    below ``tol`` are flagged as (numerically) unidentifiable.
    """
    if horizon <= 0:
        raise ContractError(f"horizon must be positive, got {horizon}")
    if tol < 0:
        raise ContractError(f"tol must be >= 0, got {tol}")
    steps = max(1, int(round(horizon / dt)))
    support = tuple(sorted(system.model().support))
    sens = np.zeros(len(support))
    flagged = set()
    indeterminate = set()
    for i, (r, c) in enumerate(support):
        h = SENSITIVITY_REL_STEP * max(1.0, abs(system.theta_true[r, c]))
        try:
            yp = _simulate_perturbed(system, y0, input_signal, dt, steps, r, c, +h)
            ym = _simulate_perturbed(system, y0, input_signal, dt, steps, r, c, -h)
        except DivergedError:
            sens[i] = np.nan
            indeterminate.add(i)
            continue
        sens[i] = np.linalg.norm((yp - ym) / (2.0 * h))
        if sens[i] < tol:
            flagged.add(i)
    return IdentifiabilityReport(
        support=support,
        sensitivities=sens,
        horizon=float(horizon),
        flagged=frozenset(flagged),
        indeterminate=frozenset(indeterminate),
    )


def _simulate_perturbed(system, y0, input_signal, dt, steps, r, c, delta):
    theta = system.theta_true.copy()
    theta[r, c] += delta
    perturbed = DynamicalSystem(
        name=system.name, library=system.library, theta_true=theta
    )
    return simulate(perturbed, y0, input_signal, dt=dt, steps=steps).states


# ---------------------------------------------------------------------------
# system config files
#
# Plain text: `name`, `n`, `m`, `M` as key = value lines, then one line per
# nonzero term: row index, n+m exponents, coefficient.  `#` starts a comment.
# ---------------------------------------------------------------------------

def parse_system_config(text: str, path="<config>") -> DynamicalSystem:
    header = {}
    terms = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key in header:
                raise DataFormatError(f"duplicate key {key!r}", path=path, line=lineno)
            header[key] = (value, lineno)
        else:
            terms.append((line.split(), lineno))

    def _header_int(key):
        if key not in header:
            raise DataFormatError(f"missing required key {key!r}", path=path)
        value, lineno = header[key]
        try:
            parsed = int(value)
        except ValueError:
            raise DataFormatError(
                f"field {key!r} must be an integer, got {value!r}", path=path, line=lineno
            ) from None
        return parsed

    if "name" not in header:
        raise DataFormatError("missing required key 'name'", path=path)
    name = header["name"][0]
    n = _header_int("n")
    m = _header_int("m")
    order = _header_int("M")
    description = header.get("description", ("", 0))[0]
    known = {"name", "n", "m", "M", "description"}
    for key, (_, lineno) in header.items():
        if key not in known:
            raise DataFormatError(f"unknown key {key!r}", path=path, line=lineno)

    lib = build_library(n, m, order)
    theta = np.zeros((n, lib.size))
    for tokens, lineno in terms:
        if len(tokens) != 2 + n + m:
            raise DataFormatError(
                f"term line needs row index, {n + m} exponents and a coefficient "
                f"({2 + n + m} fields), got {len(tokens)}",
                path=path,
                line=lineno,
            )
        try:
            row = int(tokens[0])
            exps = tuple(int(t) for t in tokens[1 : 1 + n + m])
            coeff = float(tokens[-1])
        except ValueError as exc:
            raise DataFormatError(f"bad term line: {exc}", path=path, line=lineno) from None
        if not 0 <= row < n:
            raise DataFormatError(
                f"row index {row} out of range 0..{n - 1}", path=path, line=lineno
            )
        j = lib.index_of(exps)
        if j is None:
            raise DataFormatError(
                f"exponents {exps} exceed library order M={order}", path=path, line=lineno
            )
        theta[row, j] = coeff
    return DynamicalSystem(name=name, library=lib, theta_true=theta, description=description)


def load_system_config(path) -> DynamicalSystem:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_system_config(fh.read(), path=str(path))


def format_system_config(system: DynamicalSystem) -> str:
    out = io.StringIO()
    out.write(f"name = {system.name}\n")
    if system.description:
        out.write(f"description = {system.description}\n")
    out.write(f"n = {system.n}\nm = {system.m}\nM = {system.library.order}\n")
    for r, c in sorted(system.model().support):
        exps = " ".join(str(e) for e in system.library.terms[c].exponents)
        out.write(f"{r}  {exps}  {format_float(system.theta_true[r, c])}\n")
    return out.getvalue()


def builtin_systems(extra_paths=()) -> dict:
    """Registry of named systems: the two shipped benchmarks plus any
    user-supplied config files (e.g. input-driven aircraft dynamics)."""
    registry = {}
    data = resources.files("modrec") / "data"
    for fname in ("lotka_volterra.sys", "lorenz.sys"):
        system = parse_system_config((data / fname).read_text(encoding="utf-8"), path=fname)
        registry[system.name] = system
    for path in extra_paths:
        system = load_system_config(path)
        registry[system.name] = system
    return registry


def get_system(name: str, extra_paths=()) -> DynamicalSystem:
    registry = builtin_systems(extra_paths)
    if name not in registry:
        raise UnknownSystemError(
            f"unknown system {name!r}; available: {', '.join(sorted(registry))}"
        )
    return registry[name]


# ---------------------------------------------------------------------------
# trajectory CSV: header t,y1..yn[,u1..um], decimal notation, LF endings
# ---------------------------------------------------------------------------

def format_float(x: float) -> str:
    """Shortest decimal string that round-trips the float (no exponent)."""
    s = repr(float(x))
    if "e" in s or "E" in s:
        s = format(Decimal(float(x)), "f")
    return s


def write_trajectory_csv(traj: Trajectory, path) -> None:
    cols = ["t"] + [f"y{i + 1}" for i in range(traj.n)] + [f"u{j + 1}" for j in range(traj.m)]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(traj.N):
            row = [format_float(traj.times[i])]
            row += [format_float(v) for v in traj.states[i]]
            row += [format_float(v) for v in traj.inputs[i]]
            fh.write(",".join(row) + "\n")


def read_trajectory_csv(path) -> Trajectory:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError("empty trajectory file", path=str(path))
    header = [c.strip() for c in lines[0].split(",")]
    if not header or header[0] != "t":
        raise DataFormatError(
            f"first column must be 't', got {header[:1]!r}", path=str(path), line=1
        )
    n = sum(1 for c in header if c.startswith("y"))
    m = sum(1 for c in header if c.startswith("u"))
    expected = [f"y{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)]
    if header[1:] != expected:
        raise DataFormatError(
            f"header columns {header[1:]} do not match t,y1..y{n},u1..u{m}",
            path=str(path),
            line=1,
        )
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise DataFormatError(
                f"expected {len(header)} fields, got {len(parts)}", path=str(path), line=lineno
            )
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise DataFormatError(f"bad value: {exc}", path=str(path), line=lineno) from None
    if len(rows) < 2:
        raise DataFormatError("trajectory needs at least 2 samples", path=str(path))
    arr = np.asarray(rows)
    times = arr[:, 0]
    dt = float(times[1] - times[0])
    return Trajectory(times=times, states=arr[:, 1 : 1 + n], inputs=arr[:, 1 + n :], dt=dt)
