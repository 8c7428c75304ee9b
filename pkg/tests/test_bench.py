"""Benchmark harness: phase accounting, sweeps, CSV schemas, cost estimates."""

import csv

import numpy as np
import pytest

from evim import backbone as bb
from evim import bench
from evim import mixer as mx
from evim import ops
from evim.ops import ContractError

TINY = mx.MixerConfig(tokens=4, states=2, channels=4)


def test_breakdown_smoke_all_phases_present():
    record = bench.breakdown_run(TINY, reps=5)
    assert set(record.phases) == set(bench.PHASES)
    for name, st in record.phases.items():
        assert st.median_ns >= 0 and st.iqr_ns >= 0, name
    assert record.reps == 5
    # a 4-token layer is far below timer resolution honesty thresholds
    assert isinstance(record.reliable, bool)


def test_breakdown_rejects_thin_protocol():
    with pytest.raises(ContractError):
        bench.breakdown_run(TINY, reps=3)
    with pytest.raises(ContractError):
        bench.breakdown_run(TINY, reps=5, warmup=1)


def test_phase_macs_sum_exactly_to_mixer_flops():
    for cfg in [TINY, mx.MixerConfig(196, 49, 128), mx.MixerConfig(1024, 16, 128)]:
        record = bench.breakdown_run(cfg, reps=5) if cfg is TINY else None
        phase_macs = (
            {k: v.macs for k, v in record.phases.items()}
            if record
            else mx.mixer_phase_macs(cfg)
        )
        assert sum(phase_macs.values()) == mx.flops_of_mixer(cfg)


def test_phase_sequence_reproduces_layer_output():
    """The timed phase chain must compute exactly what the layer computes."""
    cfg = mx.MixerConfig(tokens=16, states=4, channels=8)
    rng = np.random.default_rng(0)
    p = mx.init_mixer_params(cfg, rng, dtype=np.float64, ln=False)
    x = rng.standard_normal((16, 8))
    grid = bench.grid_for(16)

    b_hat, c, delta_raw = mx.project_bcd(x, p)
    b_hat = mx.dwconv_tokens(b_hat, p.k_b, p.kb_bias, grid)
    c = mx.dwconv_tokens(c, p.k_c, p.kc_bias, grid)
    decay, drive = mx.discretize(delta_raw, p.log_a, b_hat)
    h_in = mx.state_reduce(x, decay, drive, p)
    h = h_in @ p.w_in
    z = h_in @ p.w_z
    h = (h * ops.silu(z)) @ p.w_out
    phased = c @ h

    layered, _ = mx.hsm_ssd_layer(x, p, grid)
    assert np.array_equal(phased, layered)


def test_phase_sum_close_to_total_time():
    cfg = mx.MixerConfig(tokens=256, states=16, channels=64)
    record = bench.breakdown_run(cfg, reps=7)
    phase_sum = sum(st.median_ns for st in record.phases.values())
    overhead = 8 * record.timer_tick_ns
    # medians of independent reps: allow generous scheduling noise either way
    assert phase_sum <= 2.0 * record.total_median_ns + overhead
    assert record.total_median_ns <= 2.0 * phase_sum + overhead


def test_grid_factorization():
    assert bench.grid_for(256) == (16, 16)
    assert bench.grid_for(512) == (16, 32)
    assert bench.grid_for(49) == (7, 7)
    assert bench.grid_for(13) == (1, 13)


# ---------------------------------------------------------------------------
# sweeps


def test_sweep_single_value_single_row():
    rows = bench.sweep_run("L", [64], TINY, mixers=("hsm_ssd",), reps=5)
    assert len(rows) == 1
    row = rows[0]
    assert row["status"] == "ok" and row["median_ns"] > 0
    assert row["macs"] == mx.flops_of_mixer(mx.MixerConfig(64, 2, 4))


def test_sweep_rejects_non_increasing_values():
    with pytest.raises(ContractError, match="increasing"):
        bench.sweep_run("L", [64, 64], TINY, mixers=("hsm_ssd",))
    with pytest.raises(ContractError, match="increasing"):
        bench.sweep_run("L", [128, 64], TINY, mixers=("hsm_ssd",))


def test_sweep_unknown_mixer_rejected():
    with pytest.raises(ContractError, match="unknown mixers"):
        bench.sweep_run("L", [64], TINY, mixers=("transformer_xl",))


def test_sweep_memory_cap_skips_rows():
    rows = bench.sweep_run(
        "L", [64, 4096], TINY, mixers=("attention_ref",), reps=5, mem_cap_bytes=1 << 20
    )
    assert [r["status"] for r in rows] == ["ok", "skipped"]
    assert rows[1]["median_ns"] == 0
    assert rows[1]["peak_bytes"] > 1 << 20


def test_sweep_covers_all_mixers():
    rows = bench.sweep_run("N", [2, 4], TINY, reps=5)
    assert {r["mixer"] for r in rows} == set(bench.MIXERS)
    assert all(r["status"] == "ok" for r in rows)


def test_resolution_axis_maps_to_tokens():
    cfg = bench._cfg_for("resolution", 256, mx.MixerConfig(1, 16, 32))
    assert cfg.tokens == 256  # (256/16)^2


# ---------------------------------------------------------------------------
# analytic estimates


def test_hsm_channel_mixing_peak_is_token_independent():
    sizes = []
    for L in (256, 1024, 4096):
        elems = bench.hsm_phase_elems(mx.MixerConfig(L, 16, 128))
        sizes.append((elems["hsm_linear1"], elems["hsm_gate_linear2"]))
    assert sizes[0] == sizes[1] == sizes[2]


def test_attention_peak_grows_quadratically():
    small = bench.mixer_peak_elems("attention_ref", mx.MixerConfig(256, 16, 128))
    large = bench.mixer_peak_elems("attention_ref", mx.MixerConfig(1024, 16, 128))
    assert large > 8 * small


def test_attention_macs_formula():
    cfg = mx.MixerConfig(64, 16, 32)
    assert bench.mixer_macs("attention_ref", cfg) == 4 * 64 * 32 * 32 + 2 * 64 * 64 * 32


def test_loglog_fit_recovers_power_law():
    xs = [2.0, 4.0, 8.0, 16.0]
    slope, r2 = bench.loglog_fit(xs, [3 * x**2 for x in xs])
    assert abs(slope - 2.0) <= 1e-9 and r2 >= 0.999999


def test_report_model_totals_match_counters():
    cfg = bb.preset("M1")
    rows = bench.report_model(cfg)
    total = rows[-1]
    assert total["section"] == "total"
    assert total["params"] == bb.count_params(cfg)
    assert total["macs"] == bb.count_flops(cfg)
    assert {r["section"] for r in rows[:-1]} >= {"stem", "stage1", "head"}


def test_single_thread_guard_active():
    bench._assert_single_thread()  # must not raise in the test environment
    with ops.single_thread_limit():
        assert ops.blas_thread_count() == 1


# ---------------------------------------------------------------------------
# CSV schemas


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_breakdown_csv_schema(tmp_path):
    record = bench.breakdown_run(TINY, reps=5)
    path = tmp_path / "b.csv"
    bench.write_breakdown_csv(str(path), record)
    rows = _read_csv(path)
    assert rows[0] == ["phase", "median_ns", "iqr_ns", "macs"]
    assert [r[0] for r in rows[1:]] == list(bench.PHASES)
    raw = path.read_bytes()
    assert b"\r" not in raw and raw.decode().count("\n") == len(rows)
    for r in rows[1:]:
        for cell in r[1:]:
            assert cell.isdigit(), cell  # plain decimal, no exponents


def test_sweep_csv_schema(tmp_path):
    rows = bench.sweep_run("L", [16, 64], TINY, mixers=("hsm_ssd", "ncssd"), reps=5)
    path = tmp_path / "s.csv"
    bench.write_sweep_csv(str(path), rows)
    parsed = _read_csv(path)
    assert parsed[0] == ["mixer", "axis", "value", "median_ns", "macs", "peak_bytes", "status"]
    assert len(parsed) == 5
    assert {r[6] for r in parsed[1:]} == {"ok"}


def test_report_csv_schema(tmp_path):
    path = tmp_path / "r.csv"
    bench.write_report_csv(str(path), bench.report_model(bb.preset("M1")))
    parsed = _read_csv(path)
    assert parsed[0] == ["section", "name", "params", "macs", "peak_bytes"]
    assert parsed[-1][0] == "total"
