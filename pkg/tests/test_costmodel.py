import dataclasses

import pytest

import oracles
from livemig.costmodel import (
    GB,
    ConfigError,
    CostTable,
    default_table,
    efficiency,
    live_freeze_ns,
    load_preset,
    load_table,
    restart_downtime_ns,
    table_from_mapping,
)

SETUP_KEYS = {"bootstrap_s", "topo_discovery_s", "intra_establish_s", "inter_establish_s",
              "cuda_visible_devices_flag"}


def test_setup_columns_exact():
    assert default_table(True).full_setup_ns() == 77_030_000_000
    assert default_table(False).full_setup_ns() == 36_170_000_000
    assert default_table(True).stage2_ns == oracles.inter_ns(True)
    assert default_table(False).stage1_ns == oracles.stage1_ns(False)


def test_flag_changes_only_setup_entries():
    off, on = default_table(False).to_dict(), default_table(True).to_dict()
    changed = {k for k in off if off[k] != on[k]}
    assert changed <= SETUP_KEYS
    # The freeze-phase term (inter establish) moves by 50 ms only.
    assert abs(off["inter_establish_s"] - on["inter_establish_s"]) < 0.1


def test_defaults():
    t = CostTable()
    assert t.iteration_ns == 6_800_000_000
    assert t.lazy_ns == 37_200_000_000
    assert t.sandbox_ns == 44_000_000_000
    assert t.control_plane_latency_ns == 1_000_000
    assert t.transfer_ns() == 16 * 10**9  # 40 GiB over 2.5 GiB/s


def test_load_and_save_bandwidths():
    t = load_preset("gpt20b").replace(per_gpu_storage_bandwidth_Bps=250_000_000)
    assert t.load_ns() == 320 * 10**9
    # Aggregate bandwidth scales with the device count, so the per-device time is unchanged.
    assert t.load_ns(gpu_count=32) == t.load_ns()
    t39 = load_preset("gpt39b").replace(per_gpu_storage_bandwidth_Bps=250_000_000)
    assert t39.load_ns() == 750 * 10**9
    assert t.replace(save_bandwidth_per_gpu_Bps=0).save_ns() == t.load_ns()


def test_live_freeze_matches_oracle():
    for flag in (False, True):
        t = default_table(flag).replace(teardown_s=0.25)
        want = oracles.live_freeze_expected_ns(t.state_bytes_per_device, t.data_plane_bandwidth_Bps, flag,
                                               teardown_ns=250_000_000)
        assert live_freeze_ns(t) == want
        assert live_freeze_ns(t, stage2=False) == want - oracles.inter_ns(flag)


def test_restart_matches_oracle():
    t = load_preset("gpt39b")
    want = oracles.restart_expected_ns(t.state_bytes_per_device, t.per_gpu_storage_bandwidth_Bps, False, t.lazy_ns,
                                       restart_ns=t.ns("job_restart_s"), save_bw=t.save_bandwidth_per_gpu_Bps)
    assert restart_downtime_ns(t, 8, save=True) == want


def test_negative_and_bad_values_rejected():
    with pytest.raises(ConfigError) as e:
        CostTable(teardown_s=-1)
    assert e.value.path == "teardown_s"
    with pytest.raises(ConfigError):
        CostTable(straggler_slowdown_factor=0.5)
    with pytest.raises(ConfigError) as e:
        table_from_mapping({"memory": {"params_bytes": -5}})
    assert e.value.path == "costs.memory.params_bytes"
    with pytest.raises(ConfigError) as e:
        table_from_mapping({"iteration_compute_s": "fast"})
    assert e.value.path == "costs.iteration_compute_s"
    with pytest.raises(ConfigError) as e:
        table_from_mapping({"nope": 1})
    assert e.value.path == "costs.nope"
    with pytest.raises(ConfigError):
        load_preset("gpt1t")


def test_mapping_overlay_and_flag():
    t = table_from_mapping({"cuda_visible_devices_flag": True, "memory": {"activation_bytes": 3e9}})
    assert t.full_setup_ns() == 77_030_000_000
    assert t.memory.activation_bytes == 3 * GB
    assert table_from_mapping({"data_plane_bandwidth_Bps": 1e9}).data_plane_bandwidth_Bps == 10**9


def test_load_table_file(tmp_path):
    p = tmp_path / "costs.yaml"
    p.write_text("preset: gpt39b\nteardown_s: 0.5\n")
    t = load_table(p)
    assert t.state_bytes_per_device == 187_500_000_000 and t.ns("teardown_s") == 500_000_000


def test_monotone_in_freeze_terms():
    base = default_table()
    for name in ("teardown_s", "inter_establish_s", "control_plane_latency_s"):
        bigger = dataclasses.replace(base, **{name: getattr(base, name) + 1.0})
        assert live_freeze_ns(bigger) > live_freeze_ns(base)
    faster = base.replace(data_plane_bandwidth_Bps=base.data_plane_bandwidth_Bps * 2)
    assert faster.transfer_ns() < base.transfer_ns()


def rec(t, kind, **detail):
    return {"time": t, "seq": 0, "node": "n", "kind": kind, "detail": detail}


def test_efficiency_from_records():
    s = 10**9
    records = [
        rec(0, "PHASE", name="launch_done", iteration_ns=5 * s),
        rec(5 * s, "ITER_DONE", iteration=1),
        rec(6 * s, "DOWNTIME_BEGIN"),
        rec(8 * s, "DOWNTIME_END"),
        rec(13 * s, "ITER_DONE", iteration=2, lazy_ns=0),
        rec(14 * s, "FAILURE", lost_iterations=3),
        rec(20 * s, "ITER_DONE", iteration=2, lazy_ns=2 * s),
        rec(20 * s, "PHASE", name="job_done"),
    ]
    m = efficiency(records)
    assert m.useful_iterations == 2
    assert m.total_ns == 20 * s
    assert m.extra_jct_s == 10.0
    assert m.training_efficiency == 0.5
    assert m.freeze_ns == 2 * s and m.lazy_ns == 2 * s and m.downtime_ns == 4 * s
    assert m.lost_iterations == 3
    assert m.max_iteration_ns == 8 * s


def test_efficiency_nested_downtime_keeps_first_begin():
    s = 10**9
    records = [
        rec(0, "PHASE", name="launch_done", iteration_ns=s),
        rec(1 * s, "DOWNTIME_BEGIN"),
        rec(2 * s, "DOWNTIME_BEGIN"),
        rec(5 * s, "DOWNTIME_END"),
        rec(6 * s, "PHASE", name="job_done"),
    ]
    assert efficiency(records).freeze_ns == 4 * s


def test_efficiency_without_window_is_zero():
    assert efficiency([]).training_efficiency == 0.0


def test_restart_breakdown_shape():
    """A 20B save-and-restart spends about 130 s reloading, warming up and rebuilding groups.

    Reported shares: load 13%, warmup 51%, group setup 36%. Checked at
    five points per share and 25% on the total.
    """
    t = load_preset("gpt20b")
    parts = {"load": t.load_ns(), "warmup": t.lazy_ns, "setup": t.full_setup_ns()}
    total = sum(parts.values())
    shares = {k: v / total for k, v in parts.items()}
    want = {"load": 0.13, "warmup": 0.51, "setup": 0.36}
    off = {k: round(shares[k] - want[k], 3) for k in want if abs(shares[k] - want[k]) > 0.05}
    assert not off, f"shares {shares} miss {want} by {off}"
    assert abs(total / 1e9 - 130) <= 0.25 * 130
