"""Timed experiments over the token mixers and the backbone cost model.

Three entry points:

* `breakdown_run`  -- per-phase wall time of the hidden-state-mixer layer,
  labeled by pipeline line, with analytic MACs attached to each phase so the
  matrix-multiplication phases can be separated from the memory-bound ones.
* `sweep_run`      -- one mixer axis (L, N, D or resolution) swept across a
  set of mixers, including a deliberately naive quadratic attention reference.
* `report_model`   -- per-section parameter/MAC/peak-activation summary of a
  backbone config.

Protocol: monotonic nanosecond clock, >= 2 discarded warmup reps, median of
>= 5 reps with IQR, single-threaded kernels (the harness refuses to run if
the tensor backend cannot be clamped to one thread). Absolute numbers are
machine-specific; what the suite asserts is the *shape* of the cost model.
Peak bytes are live-tensor estimates for the activation arrays of each step,
not allocator ground truth.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import mixer as mx
from . import ops
from .ops import ContractError, F32

PHASES = (
    "proj_bcd",
    "dwconv",
    "discretize",
    "state_reduce",
    "hsm_linear1",
    "hsm_gate_linear2",
    "out_project",
)

MIXERS = ("hsm_ssd", "ncssd", "causal_ssd", "attention_ref")

DEFAULT_MEM_CAP = 2 << 30  # bytes of estimated live activations


class ParallelismError(RuntimeError):
    """The tensor backend is multi-threaded and could not be clamped."""


def _assert_single_thread() -> None:
    n = ops.blas_thread_count()
    if n > 1:
        raise ParallelismError(
            f"tensor backend reports {n} threads; benchmarks require exactly one"
        )


def timer_resolution_ns() -> int:
    """Smallest observable tick of the monotonic clock."""
    best = None
    for _ in range(100):
        a = time.perf_counter_ns()
        b = time.perf_counter_ns()
        while b == a:
            b = time.perf_counter_ns()
        best = (b - a) if best is None else min(best, b - a)
    return max(best, 1)


def _median_iqr(samples: list[int]) -> tuple[int, int]:
    med = statistics.median(samples)
    q = statistics.quantiles(samples, n=4) if len(samples) >= 2 else [med, med, med]
    return int(med), int(q[2] - q[0])


def grid_for(tokens: int) -> tuple[int, int]:
    """Most-square H x W factorization of a token count."""
    h = int(tokens**0.5)
    while tokens % h:
        h -= 1
    return h, tokens // h


# ---------------------------------------------------------------------------
# activation-liveness estimates (elements, not bytes)


def hsm_phase_elems(cfg: mx.MixerConfig) -> dict[str, int]:
    L, n, d, dw = cfg.tokens, cfg.states, cfg.channels, cfg.delta_width
    return {
        "proj_bcd": L * d + L * (2 * n + dw),
        "dwconv": 4 * L * n,
        "discretize": 2 * (L * dw + L * n),
        "state_reduce": 2 * L * n + L * d + n * d,
        "hsm_linear1": 3 * n * d,
        "hsm_gate_linear2": 4 * n * d,
        "out_project": L * n + n * d + L * d,
    }


def mixer_peak_elems(name: str, cfg: mx.MixerConfig) -> int:
    L, n, d = cfg.tokens, cfg.states, cfg.channels
    if name == "hsm_ssd":
        return max(hsm_phase_elems(cfg).values())
    if name == "ncssd":
        return 3 * L * d + 2 * L * n + n * d
    if name == "causal_ssd":
        return L * L + L * d + 2 * L * n
    if name == "attention_ref":
        return 2 * L * L + 4 * L * d
    raise ContractError(f"unknown mixer {name!r}")


def mixer_macs(name: str, cfg: mx.MixerConfig) -> int:
    L, n, d = cfg.tokens, cfg.states, cfg.channels
    if name == "hsm_ssd":
        return mx.flops_of_mixer(cfg)
    if name == "ncssd":
        # input projection, discretize, three depthwise convs, state sum,
        # readout, gate+output projections on the L x D token array
        phases = mx.mixer_phase_macs(cfg)
        return (
            phases["proj_bcd"]
            + phases["discretize"]
            + 2 * 9 * L * n
            + 9 * L * d
            + 2 * L * n * d
            + 3 * L * d * d
        )
    if name == "causal_ssd":
        return L * L * (n + d)
    if name == "attention_ref":
        return 4 * L * d * d + 2 * L * L * d
    raise ContractError(f"unknown mixer {name!r}")


# ---------------------------------------------------------------------------
# mixer runners


def _build_hsm(cfg: mx.MixerConfig, rng, dtype):
    params = mx.init_mixer_params(cfg, rng, dtype=dtype)
    x = rng.standard_normal((cfg.tokens, cfg.channels)).astype(dtype)
    grid = grid_for(cfg.tokens)
    return lambda: mx.hsm_ssd_layer(x, params, grid)


def _build_ncssd(cfg: mx.MixerConfig, rng, dtype):
    params = mx.init_mixer_params(cfg, rng, dtype=dtype, x_kernel=True)
    x = rng.standard_normal((cfg.tokens, cfg.channels)).astype(dtype)
    grid = grid_for(cfg.tokens)
    return lambda: mx.ncssd_layer(x, params, grid)


def _build_causal(cfg: mx.MixerConfig, rng, dtype):
    L, n, d = cfg.tokens, cfg.states, cfg.channels
    x = rng.standard_normal((L, d)).astype(dtype)
    a = rng.uniform(0.5, 1.0, L).astype(dtype)
    b = rng.standard_normal((L, n)).astype(dtype)
    c = rng.standard_normal((L, n)).astype(dtype)
    return lambda: mx.ssd_causal(x, a, b, c)


def _build_attention(cfg: mx.MixerConfig, rng, dtype):
    """Naive softmax attention; materializes the L x L score matrix."""
    L, d = cfg.tokens, cfg.channels
    x = rng.standard_normal((L, d)).astype(dtype)
    wq, wk, wv, wo = (rng.standard_normal((d, d)).astype(dtype) for _ in range(4))
    scale = 1.0 / d**0.5

    def run():
        q, k, v = x @ wq, x @ wk, x @ wv
        probs = ops.softmax((q @ k.T) * scale, axis=-1)
        return (probs @ v) @ wo

    return run


_BUILDERS = {
    "hsm_ssd": _build_hsm,
    "ncssd": _build_ncssd,
    "causal_ssd": _build_causal,
    "attention_ref": _build_attention,
}


# ---------------------------------------------------------------------------
# phase-level breakdown


@dataclass
class PhaseStat:
    median_ns: int
    iqr_ns: int
    macs: int


@dataclass
class BenchRecord:
    """One timed breakdown of the hidden-state-mixer layer."""

    config: dict
    reps: int
    phases: dict[str, PhaseStat]
    total_median_ns: int
    macs: int
    peak_bytes: int
    timer_tick_ns: int
    unreliable_phases: list[str] = field(default_factory=list)

    @property
    def reliable(self) -> bool:
        return not self.unreliable_phases

    def matmul_phase_ns(self) -> int:
        """Time in phases whose work is matrix multiplication (MAC-bearing
        projections), as opposed to the memory-bound shaping phases."""
        keys = ("proj_bcd", "state_reduce", "hsm_linear1", "hsm_gate_linear2", "out_project")
        return sum(self.phases[k].median_ns for k in keys)


def breakdown_run(
    cfg: mx.MixerConfig,
    reps: int = 9,
    warmup: int = 2,
    dtype=F32,
    seed: int = 0,
) -> BenchRecord:
    """Median per-phase wall time of the mixer pipeline.

    Phases are timed around the exact helpers the layer itself calls (the
    entry LN is bypassed: it is not one of the pipeline lines). reps >= 5 and
    warmup >= 2 are contract minimums.
    """
    if reps < 5 or warmup < 2:
        raise ContractError(f"need reps >= 5 and warmup >= 2, got {reps}/{warmup}")
    _assert_single_thread()
    rng = np.random.default_rng(seed)
    params = mx.init_mixer_params(cfg, rng, dtype=dtype, ln=False)
    x = rng.standard_normal((cfg.tokens, cfg.channels)).astype(dtype)
    grid = grid_for(cfg.tokens)
    per_head = cfg.head_mode == "multi_head"

    samples: dict[str, list[int]] = {name: [] for name in PHASES}
    totals: list[int] = []

    with ops.single_thread_limit():
        _assert_single_thread()
        for rep in range(warmup + reps):
            marks = [time.perf_counter_ns()]
            b_hat, c, delta_raw = mx.project_bcd(x, params)
            marks.append(time.perf_counter_ns())
            b_hat = mx.dwconv_tokens(b_hat, params.k_b, params.kb_bias, grid)
            c = mx.dwconv_tokens(c, params.k_c, params.kc_bias, grid)
            marks.append(time.perf_counter_ns())
            decay, drive = mx.discretize(delta_raw, params.log_a, b_hat, per_head=per_head)
            marks.append(time.perf_counter_ns())
            h_in = mx.state_reduce(x, decay, drive, params)
            marks.append(time.perf_counter_ns())
            h = h_in @ params.w_in
            z = h_in @ params.w_z
            marks.append(time.perf_counter_ns())
            h = (h * ops.silu(z)) @ params.w_out
            marks.append(time.perf_counter_ns())
            _ = c @ h
            marks.append(time.perf_counter_ns())
            if rep < warmup:
                continue
            for name, t0, t1 in zip(PHASES, marks, marks[1:]):
                samples[name].append(t1 - t0)
            t0 = time.perf_counter_ns()
            mx.hsm_ssd_layer(x, params, grid)
            totals.append(time.perf_counter_ns() - t0)

    tick = timer_resolution_ns()
    macs = mx.mixer_phase_macs(cfg)
    phases = {}
    unreliable = []
    for name in PHASES:
        med, iqr = _median_iqr(samples[name])
        phases[name] = PhaseStat(med, iqr, macs[name])
        if med < 10 * tick:
            unreliable.append(name)

    itemsize = np.dtype(dtype).itemsize
    return BenchRecord(
        config={
            "L": cfg.tokens, "N": cfg.states, "D": cfg.channels,
            "variant": cfg.head_mode, "dtype": np.dtype(dtype).name,
        },
        reps=reps,
        phases=phases,
        total_median_ns=_median_iqr(totals)[0],
        macs=mx.flops_of_mixer(cfg),
        peak_bytes=mixer_peak_elems("hsm_ssd", cfg) * itemsize,
        timer_tick_ns=tick,
        unreliable_phases=unreliable,
    )


# ---------------------------------------------------------------------------
# axis sweeps


def _cfg_for(axis: str, value: int, base: mx.MixerConfig) -> mx.MixerConfig:
    if axis == "L":
        return mx.MixerConfig(value, base.states, base.channels, base.head_mode, base.n_heads)
    if axis == "N":
        return mx.MixerConfig(base.tokens, value, base.channels, base.head_mode, base.n_heads)
    if axis == "D":
        return mx.MixerConfig(base.tokens, base.states, value, base.head_mode, base.n_heads)
    if axis == "resolution":
        tokens = (value // bb.STEM_REDUCTION) ** 2
        return mx.MixerConfig(tokens, base.states, base.channels, base.head_mode, base.n_heads)
    raise ContractError(f"unknown sweep axis {axis!r}")


def sweep_run(
    axis: str,
    values: list[int],
    base: mx.MixerConfig,
    mixers: tuple[str, ...] = MIXERS,
    reps: int = 5,
    warmup: int = 2,
    dtype=F32,
    seed: int = 0,
    mem_cap_bytes: int = DEFAULT_MEM_CAP,
) -> list[dict]:
    """One row per (mixer, value): median layer time, MACs, peak bytes.

    Values must be strictly increasing. A value whose activation estimate
    exceeds the memory cap is emitted with status=skipped instead of timed.
    """
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ContractError(f"sweep values must be strictly increasing: {values}")
    unknown = [m for m in mixers if m not in _BUILDERS]
    if unknown:
        raise ContractError(f"unknown mixers {unknown}")
    _assert_single_thread()
    itemsize = np.dtype(dtype).itemsize
    rows = []
    with ops.single_thread_limit():
        _assert_single_thread()
        for name in mixers:
            for value in values:
                cfg = _cfg_for(axis, value, base)
                peak = mixer_peak_elems(name, cfg) * itemsize
                row = {
                    "mixer": name,
                    "axis": axis,
                    "value": value,
                    "median_ns": 0,
                    "macs": mixer_macs(name, cfg),
                    "peak_bytes": peak,
                    "status": "ok",
                }
                if peak > mem_cap_bytes:
                    row["status"] = "skipped"
                    rows.append(row)
                    continue
                run = _BUILDERS[name](cfg, np.random.default_rng(seed), dtype)
                ts = []
                for rep in range(warmup + reps):
                    t0 = time.perf_counter_ns()
                    run()
                    t1 = time.perf_counter_ns()
                    if rep >= warmup:
                        ts.append(t1 - t0)
                row["median_ns"] = _median_iqr(ts)[0]
                rows.append(row)
    return rows


def loglog_fit(values: list[float], times: list[float]) -> tuple[float, float]:
    """Least-squares slope and R^2 of log(time) against log(value)."""
    x = np.log(np.asarray(values, dtype=np.float64))
    y = np.log(np.asarray(times, dtype=np.float64))
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(slope), r2


# ---------------------------------------------------------------------------
# model report


def report_model(cfg: bb.ModelConfig, resolution: int | None = None, bytes_per: int = 4) -> list[dict]:
    """Per-section analytic params/MACs plus the forward peak-activation estimate."""
    res = None if resolution is None else (resolution, resolution)
    rows = bb.architecture_report(cfg, res, bytes_per)
    sections: dict[str, dict] = {}
    for r in rows:
        agg = sections.setdefault(
            r.section, {"section": r.section, "name": r.section, "params": 0, "macs": 0, "peak_bytes": 0}
        )
        agg["params"] += r.params
        agg["macs"] += r.macs
        agg["peak_bytes"] = max(agg["peak_bytes"], r.act_bytes)
    out = list(sections.values())
    out.append(
        {
            "section": "total",
            "name": cfg.variant_name,
            "params": sum(r.params for r in rows),
            "macs": sum(r.macs for r in rows),
            "peak_bytes": max(r.act_bytes for r in rows),
        }
    )
    return out


# ---------------------------------------------------------------------------
# CSV emission (schemas are part of the external interface)


def write_breakdown_csv(path: str, record: BenchRecord) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["phase", "median_ns", "iqr_ns", "macs"])
        for name in PHASES:
            st = record.phases[name]
            w.writerow([name, st.median_ns, st.iqr_ns, st.macs])


def write_sweep_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["mixer", "axis", "value", "median_ns", "macs", "peak_bytes", "status"])
        for r in rows:
            w.writerow([r["mixer"], r["axis"], r["value"], r["median_ns"], r["macs"], r["peak_bytes"], r["status"]])


def write_report_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["section", "name", "params", "macs", "peak_bytes"])
        for r in rows:
            w.writerow([r["section"], r["name"], r["params"], r["macs"], r["peak_bytes"]])
