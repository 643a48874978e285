"""Analytical latency/resource model of the pipelined recovery kernel.

The recurrent kernel (gate loops, reset-apply, candidate, their backward
mirrors and a loss loop) is described as a graph of loop nests.  Textbook
scheduling formulas turn a nest plus an optimization strategy into cycle
counts:

  none            every iteration pays the full body latency, sequentially
  unroll          the innermost loop is collapsed by the unroll factor
  pipeline_unroll the innermost loop is fully unrolled (complete array
                  partition) and the remaining iterations are pipelined:
                  latency = depth + (trips - 1) * II, where the effective II
                  is raised to the carried-dependency distance (hazard rule)

Absolute numbers come from calibration against vendor-tool measurements of
the synthesized kernel (shipped as package data): a quadratic cycle model in
the model dimension for the fully optimized build, per-strategy factors from
a reference dimension, an affine on-chip-memory law, and a single
seconds-per-reported-cycle constant kappa.  The structural formulas then
modulate those baselines when knobs (II, unroll factor) move away from the
calibrated defaults.

The unoptimized build grows much faster with dimension than the optimized
one; its curve is anchored separately at a high-dimension endpoint and
follows a power law through the reference point, floored at the constant
per-strategy factor so optimization never appears to hurt.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import CalibrationError, ContractError, InfeasibleIIError

# per-operation latencies in cycles; these double as pipeline depths
MAC_LATENCY = 4
ACT_LATENCY = 8
MEM_LATENCY = 1

# target device capacity and the standing caveat about synthesis estimates
LUT_CAPACITY = 252_000
FF_CAPACITY = 504_000
OVER_REPORT_CAVEAT = (
    "synthesis-tool utilization estimates may exceed physical capacity; "
    "post-implementation usage is typically lower, confirm on hardware"
)

STRATEGIES = ("none", "unroll", "pipeline_unroll")


@dataclass(frozen=True)
class LoopNest:
    """One (possibly nested) loop: trip counts outer->inner, per-iteration
    body operation counts, optional per-outer-iteration epilogue ops, and the
    carried dependency distance (0 = none)."""

    name: str
    trips: tuple
    mac: int = 0
    act: int = 0
    reads: int = 0
    writes: int = 0
    outer_act: int = 0
    outer_writes: int = 0
    dep_distance: int = 0

    def __post_init__(self):
        if any(t < 1 for t in self.trips):
            raise ContractError(f"nest {self.name}: trip counts must be >= 1")
        if self.dep_distance < 0:
            raise ContractError(f"nest {self.name}: dependency distance must be >= 0")

    @property
    def body_latency(self) -> int:
        return (MAC_LATENCY * self.mac + ACT_LATENCY * self.act
                + MEM_LATENCY * (self.reads + self.writes))

    @property
    def outer_latency(self) -> int:
        return ACT_LATENCY * self.outer_act + MEM_LATENCY * self.outer_writes

    @property
    def depth(self) -> int:
        """Pipeline depth of one full iteration."""
        return self.body_latency + self.outer_latency

    @property
    def inner_trips(self) -> int:
        return self.trips[-1]

    @property
    def outer_trips(self) -> int:
        t = 1
        for x in self.trips[:-1]:
            t *= x
        return t

    @property
    def total_trips(self) -> int:
        return self.outer_trips * self.inner_trips


@dataclass(frozen=True)
class OptimizationConfig:
    strategy: str = "pipeline_unroll"
    ii: int = 1
    unroll_factor: int = 4
    partition: bool = True
    hazard_check: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ContractError(
                f"strategy must be one of {STRATEGIES}, got {self.strategy!r}"
            )
        if self.ii not in (1, 2, 3):
            raise ContractError(f"II must be 1, 2 or 3, got {self.ii}")
        if self.unroll_factor < 1:
            raise ContractError(f"unroll factor must be >= 1, got {self.unroll_factor}")
        if self.strategy == "pipeline_unroll" and not self.partition:
            raise ContractError("pipeline_unroll requires complete array partition")


def default_config(strategy: str) -> OptimizationConfig:
    """The calibrated baseline knobs for each strategy."""
    if strategy == "none":
        return OptimizationConfig(strategy="none", partition=False)
    if strategy == "unroll":
        return OptimizationConfig(strategy="unroll", partition=False)
    return OptimizationConfig(strategy="pipeline_unroll", ii=1, partition=True)


@dataclass(frozen=True)
class KernelGraph:
    """Loop nests of the full kernel for model dimension d and hidden size H."""

    d: int
    hidden: int
    steps: int
    nests: tuple


def build_kernel_graph(d: int, hidden: int = 16, steps: int = 20,
                       chain_distance: int = 1) -> KernelGraph:
    """Forward gates/reset/candidate, doubled-MAC backward mirrors, and the
    loss loop.  ``chain_distance`` is the carried dependency induced by the
    gate -> reset-apply -> candidate chaining."""
    if d < 1 or hidden < 1:
        raise ContractError(f"d and hidden must be >= 1, got d={d}, hidden={hidden}")
    H, cd = hidden, chain_distance
    nests = (
        LoopNest("update_gate", (H, H + d), mac=1, reads=2, outer_act=1, outer_writes=1),
        LoopNest("reset_gate", (H, H + d), mac=1, reads=2, outer_act=1, outer_writes=1),
        LoopNest("reset_apply", (H,), mac=1, reads=2, writes=1, dep_distance=cd),
        LoopNest("candidate", (H, H + d), mac=1, reads=2, outer_act=1, outer_writes=1,
                 dep_distance=cd),
        LoopNest("bwd_candidate", (H, H + d), mac=2, reads=2, outer_writes=1,
                 dep_distance=cd),
        LoopNest("bwd_update_gate", (H, H + d), mac=2, reads=2, outer_writes=1),
        LoopNest("bwd_reset_gate", (H, H + d), mac=2, reads=2, outer_writes=1),
        LoopNest("bwd_reset_apply", (H,), mac=2, reads=2, writes=1, dep_distance=cd),
        LoopNest("loss", (steps, d), mac=1, reads=2),
    )
    return KernelGraph(d=d, hidden=H, steps=steps, nests=nests)


def forward_mac_count(graph: KernelGraph) -> int:
    """MACs of the three forward gate loops plus the elementwise reset."""
    H, d = graph.hidden, graph.d
    return 3 * H * (H + d) + H


def nest_latency(nest: LoopNest, opt: OptimizationConfig) -> int:
    """Cycles for one nest under one strategy (structural, uncalibrated)."""
    if opt.strategy == "none":
        return nest.outer_trips * (nest.inner_trips * nest.body_latency
                                   + nest.outer_latency)
    if opt.strategy == "unroll":
        collapsed = math.ceil(nest.inner_trips / opt.unroll_factor)
        return nest.outer_trips * (collapsed * nest.body_latency + nest.outer_latency)
    # pipeline_unroll: innermost loop fully unrolled, remaining trips pipelined
    ii = effective_ii(nest, opt)
    trips = nest.outer_trips if len(nest.trips) > 1 else nest.inner_trips
    return nest.depth + (trips - 1) * ii


def effective_ii(nest: LoopNest, opt: OptimizationConfig) -> int:
    """Hazard rule: the initiation interval cannot beat the carried
    dependency distance.  With hazard checking on, a too-small request is an
    error instead of being raised silently."""
    if opt.hazard_check and nest.dep_distance > opt.ii:
        raise InfeasibleIIError(
            f"nest {nest.name}: II={opt.ii} cannot satisfy carried dependency "
            f"distance {nest.dep_distance}; raise II to remove the hazard"
        )
    return max(opt.ii, nest.dep_distance)


def structural_cycles(graph: KernelGraph, opt: OptimizationConfig) -> int:
    return int(sum(nest_latency(nest, opt) for nest in graph.nests))


def peak_parallel_macs(graph: KernelGraph, opt: OptimizationConfig) -> int:
    """Widest simultaneous multiplier demand across nests."""
    peak = 1
    for nest in graph.nests:
        if nest.mac == 0:
            continue
        if opt.strategy == "none":
            width = 1
        elif opt.strategy == "unroll":
            width = min(opt.unroll_factor, nest.inner_trips)
        else:
            width = nest.inner_trips if len(nest.trips) > 1 else 1
        peak = max(peak, nest.mac * width)
    return peak


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationRow:
    d: int
    cycles: int
    lut: int
    dsp: int
    bram_kb: int
    time_s: float


@dataclass
class CalibrationParams:
    """Fitted constants converting structural estimates to reported numbers."""

    kappa: float                     # seconds per reported cycle
    cycle_quad: tuple                # (a, b, c): cycles(d) = a d^2 + b d + c
    bram_affine: tuple               # (slope, intercept), exact integers when possible
    lut_affine: tuple                # lut = a*dsp + b*d + c
    dsp_affine: tuple                # dsp = a*peak_macs + b
    strategy_cycle_factors: dict     # strategy -> cycles / pipeline cycles at d_ref
    strategy_resource_factors: dict  # strategy -> (lut, dsp, bram) factors
    d_ref: int                       # dimension of the strategy reference rows
    unopt_anchor: tuple              # (d, time_s) endpoint of the unoptimized build
    graph_hidden: int                # hidden size assumed by the resource fits
    residuals: dict = field(default_factory=dict)

    def quad_cycles(self, d: float) -> float:
        a, b, c = self.cycle_quad
        return a * d * d + b * d + c

    def unopt_cycles(self, d: float) -> float:
        """Unoptimized cycle model: power law through the reference point and
        the high-dimension anchor, floored at the constant-factor model."""
        base = self.strategy_cycle_factors["none"] * self.quad_cycles(d)
        d_a, time_a = self.unopt_anchor
        c_ref = self.strategy_cycle_factors["none"] * self.quad_cycles(self.d_ref)
        c_anchor = time_a / self.kappa
        gamma = math.log(c_anchor / c_ref) / math.log(d_a / self.d_ref)
        power = c_ref * (d / self.d_ref) ** gamma
        return max(base, power)


def read_calibration_csv(path_or_file) -> list:
    """Rows of `d,cycles,lut,dsp,bram_kb,fpga_s` -> CalibrationRow list."""
    if hasattr(path_or_file, "read"):
        text = path_or_file.read()
    else:
        with open(path_or_file, "r", encoding="utf-8") as fh:
            text = fh.read()
    rows = []
    reader = csv.DictReader(io.StringIO(text))
    required = {"d", "cycles", "lut", "dsp", "bram_kb", "fpga_s"}
    if reader.fieldnames is None or not required.issubset(set(reader.fieldnames)):
        raise CalibrationError(
            f"calibration CSV must have columns {sorted(required)}, "
            f"got {reader.fieldnames}"
        )
    for rec in reader:
        rows.append(CalibrationRow(
            d=int(rec["d"]), cycles=int(rec["cycles"].replace(",", "")),
            lut=int(rec["lut"].replace(",", "")), dsp=int(rec["dsp"].replace(",", "")),
            bram_kb=int(rec["bram_kb"]), time_s=float(rec["fpga_s"]),
        ))
    return rows


def _shipped(name: str) -> str:
    return (resources.files("modrec") / "data" / name).read_text(encoding="utf-8")


def shipped_calibration_rows() -> list:
    return read_calibration_csv(io.StringIO(_shipped("pipeline_reference.csv")))


def shipped_strategy_rows() -> dict:
    """Reference measurements per strategy at one dimension, plus the
    unoptimized high-dimension time anchor."""
    reader = csv.DictReader(io.StringIO(_shipped("strategy_reference.csv")))
    ref = {}
    anchor = None
    for rec in reader:
        if rec["cycles"]:
            ref[rec["strategy"]] = CalibrationRow(
                d=int(rec["d"]), cycles=int(rec["cycles"]), lut=int(rec["lut"]),
                dsp=int(rec["dsp"]), bram_kb=int(rec["bram_kb"]),
                time_s=float(rec["time_s"]),
            )
        else:
            anchor = (int(rec["d"]), float(rec["time_s"]))
    return {"rows": ref, "anchor": anchor}


def calibrate(rows, strategy_rows=None, graph_hidden: int = 16) -> CalibrationParams:
    """Fit every calibrated constant from measurement rows.

    kappa is the mean time/cycles ratio; the optimized cycle model is a
    least-squares quadratic in d; the on-chip-memory law is an affine fit on
    rows with d >= 40 (it is exact there); logic and multiplier counts are
    affine in the graph's peak parallel MAC width.  Per-strategy factors come
    from the reference strategy table.
    """
    if len(rows) < 3:
        raise CalibrationError(f"need at least 3 calibration rows, got {len(rows)}")
    d = np.array([r.d for r in rows], dtype=float)
    cyc = np.array([r.cycles for r in rows], dtype=float)
    lut = np.array([r.lut for r in rows], dtype=float)
    dsp = np.array([r.dsp for r in rows], dtype=float)
    bram = np.array([r.bram_kb for r in rows], dtype=float)
    t = np.array([r.time_s for r in rows], dtype=float)

    kappa_rows = t / cyc
    kappa = float(kappa_rows.mean())

    A = np.column_stack([d * d, d, np.ones_like(d)])
    quad, _, rank, _ = np.linalg.lstsq(A, cyc, rcond=None)
    if rank < min(A.shape) or not np.all(np.isfinite(quad)):
        raise CalibrationError("degenerate cycle fit: calibration dimensions are collinear")

    hi = d >= 40
    if hi.sum() >= 2:
        Ab = np.column_stack([d[hi], np.ones(int(hi.sum()))])
        bfit, _, rankb, _ = np.linalg.lstsq(Ab, bram[hi], rcond=None)
        bram_pred_rows = bram[hi]
        bram_d = d[hi]
    else:
        Ab = np.column_stack([d, np.ones_like(d)])
        bfit, _, rankb, _ = np.linalg.lstsq(Ab, bram, rcond=None)
        bram_pred_rows = bram
        bram_d = d
    if rankb < 2 or not np.all(np.isfinite(bfit)):
        raise CalibrationError("degenerate memory fit")
    # the measured law is integral; snap so predictions reproduce rows exactly
    snapped = tuple(round(v) for v in bfit)
    if np.allclose([snapped[0] * dd + snapped[1] for dd in bram_d], bram_pred_rows):
        bfit = snapped
    else:
        bfit = tuple(float(v) for v in bfit)

    peak = np.array([
        peak_parallel_macs(build_kernel_graph(int(dd), graph_hidden),
                           default_config("pipeline_unroll"))
        for dd in d
    ], dtype=float)
    Adsp = np.column_stack([peak, np.ones_like(peak)])
    dfit, _, _, _ = np.linalg.lstsq(Adsp, dsp, rcond=None)
    Alut = np.column_stack([dsp, d, np.ones_like(d)])
    lfit, _, _, _ = np.linalg.lstsq(Alut, lut, rcond=None)

    if strategy_rows is None:
        strategy_rows = shipped_strategy_rows()
    ref = strategy_rows["rows"]
    anchor = strategy_rows["anchor"]
    if "pipeline_unroll" not in ref:
        raise CalibrationError("strategy reference must include a pipeline_unroll row")
    base = ref["pipeline_unroll"]
    cycle_factors = {}
    resource_factors = {}
    for strat in STRATEGIES:
        row = ref.get(strat, base)
        cycle_factors[strat] = row.cycles / base.cycles
        resource_factors[strat] = (
            row.lut / base.lut, row.dsp / base.dsp, row.bram_kb / base.bram_kb,
        )

    params = CalibrationParams(
        kappa=kappa,
        cycle_quad=tuple(float(v) for v in quad),
        bram_affine=bfit,
        lut_affine=tuple(float(v) for v in lfit),
        dsp_affine=tuple(float(v) for v in dfit),
        strategy_cycle_factors=cycle_factors,
        strategy_resource_factors=resource_factors,
        d_ref=base.d,
        unopt_anchor=anchor if anchor is not None else (base.d, base.time_s),
        graph_hidden=graph_hidden,
    )
    quad_pred = params.quad_cycles(d)
    params.residuals = {
        "kappa_per_row": kappa_rows.tolist(),
        "kappa_rel_spread": float((kappa_rows.max() - kappa_rows.min()) / kappa),
        "cycle_rel_err": ((quad_pred - cyc) / cyc).tolist(),
        "bram_abs_err": (bfit[0] * bram_d + bfit[1] - bram_pred_rows).tolist(),
        "lut_rel_err": ((Alut @ np.asarray(lfit) - lut) / lut).tolist(),
        "dsp_rel_err": ((Adsp @ np.asarray(dfit) - dsp) / dsp).tolist(),
    }
    return params


# ---------------------------------------------------------------------------
# estimation
# ---------------------------------------------------------------------------

def estimate_cycles(graph: KernelGraph, opt: OptimizationConfig,
                    params: CalibrationParams = None) -> int:
    """Cycle estimate for one graph under one strategy configuration.

    Without calibration this is the raw structural sum.  With calibration the
    quadratic baseline and strategy factor set the level, and the structural
    model scales it for knobs moved off the calibrated defaults (higher II,
    different unroll factor).
    """
    raw = structural_cycles(graph, opt)
    if params is None:
        return raw
    base = structural_cycles(graph, default_config(opt.strategy))
    knob_scale = raw / base
    if opt.strategy == "none":
        cycles = params.unopt_cycles(graph.d)
    else:
        cycles = params.strategy_cycle_factors[opt.strategy] * params.quad_cycles(graph.d)
    return max(1, int(round(cycles * knob_scale)))


def estimate_resources(graph: KernelGraph, opt: OptimizationConfig,
                       params: CalibrationParams) -> tuple:
    """(LUT, DSP, BRAM kB) under the calibrated resource models."""
    if params is None:
        raise ContractError("estimate_resources needs calibration params")
    base_graph = (graph if graph.hidden == params.graph_hidden
                  else build_kernel_graph(graph.d, params.graph_hidden, graph.steps))
    peak = peak_parallel_macs(base_graph, default_config("pipeline_unroll"))
    a, b = params.dsp_affine
    dsp_pipe = a * peak + b
    al, bl, cl = params.lut_affine
    lut_pipe = al * dsp_pipe + bl * graph.d + cl
    sb, ib = params.bram_affine
    bram_pipe = sb * graph.d + ib
    fl, fd, fb = params.strategy_resource_factors[opt.strategy]
    lut = max(0, int(round(lut_pipe * fl)))
    dsp = max(0, int(round(dsp_pipe * fd)))
    bram = max(0, int(round(bram_pipe * fb)))
    return lut, dsp, bram


@dataclass(frozen=True)
class CostReport:
    d: int
    strategy: str
    ii: int
    cycles: int
    lut: int
    dsp: int
    bram_kb: int
    time_s: float
    feasible: bool
    caveat: str = ""

    def to_json_dict(self) -> dict:
        return {
            "d": self.d, "strategy": self.strategy, "ii": self.ii,
            "cycles": self.cycles, "lut": self.lut, "dsp": self.dsp,
            "bram_kb": self.bram_kb, "time_s": self.time_s,
            "feasible": self.feasible,
        }


def estimate(graph: KernelGraph, opt: OptimizationConfig,
             params: CalibrationParams) -> CostReport:
    cycles = estimate_cycles(graph, opt, params)
    lut, dsp, bram = estimate_resources(graph, opt, params)
    feasible = lut <= LUT_CAPACITY
    return CostReport(
        d=graph.d, strategy=opt.strategy,
        ii=effective_graph_ii(graph, opt), cycles=cycles, lut=lut, dsp=dsp,
        bram_kb=bram, time_s=cycles * params.kappa, feasible=feasible,
        caveat="" if feasible else OVER_REPORT_CAVEAT,
    )


def effective_graph_ii(graph: KernelGraph, opt: OptimizationConfig) -> int:
    if opt.strategy != "pipeline_unroll":
        return 0
    return max(effective_ii(nest, opt) for nest in graph.nests)


def speedup_report(d_range, params: CalibrationParams, hidden: int = 16,
                   steps: int = 20) -> list:
    """Per-dimension times for the unoptimized vs fully optimized build.

    Returns dicts with keys d, time_none_s, time_optimized_s, speedup.
    """
    if params is None:
        raise ContractError("speedup_report needs calibration params")
    out = []
    for d in d_range:
        graph = build_kernel_graph(int(d), hidden, steps)
        c_none = estimate_cycles(graph, default_config("none"), params)
        c_pipe = estimate_cycles(graph, default_config("pipeline_unroll"), params)
        t_none = c_none * params.kappa
        t_pipe = c_pipe * params.kappa
        out.append({
            "d": int(d),
            "time_none_s": t_none,
            "time_optimized_s": t_pipe,
            "speedup": t_none / t_pipe,
        })
    return out


# ---------------------------------------------------------------------------
# report formatting
# ---------------------------------------------------------------------------

def reports_to_text(reports) -> str:
    headers = ["d", "strategy", "II", "cycles", "LUT", "DSP", "BRAM(KB)", "time(s)", "feasible"]
    rows = [[str(r.d), r.strategy, str(r.ii or "-"), f"{r.cycles:,}", f"{r.lut:,}",
             f"{r.dsp:,}", str(r.bram_kb), f"{r.time_s:.4f}", "yes" if r.feasible else "no*"]
            for r in reports]
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    if any(not r.feasible for r in reports):
        lines.append(f"* {OVER_REPORT_CAVEAT}")
    return "\n".join(lines) + "\n"


def reports_to_json_dict(reports) -> dict:
    return {"schema_version": 1, "rows": [r.to_json_dict() for r in reports]}


def write_reports_json(path, reports) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(reports_to_json_dict(reports), fh, indent=1, sort_keys=True)
        fh.write("\n")
