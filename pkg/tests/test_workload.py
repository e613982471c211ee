"""
Workload generation, discrete-event simulation, menu harness and the
standalone buffer-pool run
"""

import math
from pathlib import Path

import numpy as np
import pytest

from src.config import BufPoolConfig, apply_override, config_from_dict, load_config
from src.errors import SaturationError
from src.lockmgr import LockMode, SchedulerPolicy
from src.metrics import relative_change
from src.reporting import row_from_latencies, with_changes
from src.workload import (PHASES, LogDevice, Menu, MenuEntry, RemainingTimeModel, ZipfSampler,
                          arrival_times, evaluate_menus, generate_menu, generate_transactions,
                          menu_latencies, pick_device, run_menu, run_sim, simulate_pool, spawn_streams)

CONFIGS = Path(__file__).parent.parent / "configs"


def make_config(**values):
    base = {"seed": 7, "duration_s": 0.2, "rate_tps": 500.0}
    base.update(values)
    return config_from_dict(base)


def shipped(name, **overrides):
    """A config from configs/ with dotted-key overrides, e.g. shipped("contended", **{"vats.theta": 0.5})."""
    config = load_config(CONFIGS / f"{name}.toml")
    for key, value in overrides.items():
        config = apply_override(config, key, value)
    return config


def contended(**overrides):
    return shipped("contended", **{"duration_s": 0.5, **overrides})


class TestSampling:
    def test_zipf_uniform_when_s_is_zero(self, rng):
        sampler = ZipfSampler(10, 0.0)
        np.testing.assert_allclose(sampler.probabilities, np.full(10, 0.1))
        draws = sampler.sample(rng, size=20_000)
        assert draws.min() == 0 and draws.max() == 9

    def test_zipf_skew(self, rng):
        draws = ZipfSampler(100, 1.0).sample(rng, size=50_000)
        counts = np.bincount(draws, minlength=100)
        assert counts.argmax() == 0
        assert counts[0] / counts[1] == pytest.approx(2.0, rel=0.1)

    def test_zipf_validation(self):
        with pytest.raises(ValueError):
            ZipfSampler(0, 1.0)
        with pytest.raises(ValueError):
            ZipfSampler(10, -1.0)

    def test_fixed_arrivals(self):
        config = make_config(duration_s=1.0, rate_tps=1000.0, jitter=0.0)
        times = arrival_times(config, spawn_streams(1).arrivals)
        assert len(times) == 999
        assert np.all(np.diff(times) == 1_000_000)

    def test_poisson_arrivals(self):
        config = make_config(duration_s=2.0, rate_tps=1000.0, arrival="poisson")
        times = arrival_times(config, spawn_streams(1).arrivals)
        assert abs(len(times) - 2000) < 200
        assert np.all(np.diff(times) >= 0)
        assert times[-1] < 2 * 10 ** 9


class TestTransactions:
    def test_accesses_sorted_and_unique(self):
        config = make_config(n_records=50, zipf_s=1.2)
        for spec in generate_transactions(config):
            records = [r for r, _ in spec.accesses]
            assert records == sorted(set(records))
            assert config.txn.min_accesses <= len(records) <= config.txn.max_accesses
            assert len(spec.service_ns) == len(records)
            assert spec.log_write_ns > 0 and spec.log_flush_ns > 0

    def test_read_only_mix(self):
        config = make_config(txn={"write_ratio": 0.0})
        assert all(spec.n_writes == 0 for spec in generate_transactions(config))
        assert all(mode is LockMode.SHARED for spec in generate_transactions(config)
                   for _, mode in spec.accesses)

    def test_scheduler_does_not_change_transactions(self):
        fcfs = generate_transactions(make_config(scheduler="fcfs"))
        vats = generate_transactions(make_config(scheduler="vats"))
        assert fcfs == vats

    def test_seed_changes_transactions(self):
        assert generate_transactions(make_config(seed=1)) != generate_transactions(make_config(seed=2))


class TestLogDevices:
    def test_fifo_service(self):
        device = LogDevice(0)
        assert device.submit(0, 10) == 10
        assert device.submit(5, 10) == 20
        assert device.waiters(5) == 2
        assert device.waiters(15) == 1
        assert device.submit(30, 10) == 40

    def test_idle_device_preferred(self):
        devices = [LogDevice(0), LogDevice(1)]
        devices[0].submit(0, 100)
        assert pick_device(devices, 10).index == 1
        devices[1].submit(10, 100)
        devices[1].submit(10, 100)
        assert pick_device(devices, 20).index == 0


class TestSimulation:
    def test_deterministic(self):
        config = contended()
        first, second = run_sim(config), run_sim(config)
        np.testing.assert_array_equal(first.latencies_ns, second.latencies_ns)
        assert first.phases.equals(second.phases)
        assert first.event_counts == second.event_counts

    def test_phases_sum_to_latency(self):
        result = run_sim(contended(**{"bufpool.enabled": True, "bufpool.n_pages": 64,
                                          "bufpool.capacity": 32}))
        phases = result.phases
        np.testing.assert_array_equal(phases[list(PHASES)].sum(axis=1), phases["latency_ns"])
        assert (phases["bufpool_wait_ns"] > 0).any()
        assert result.event_counts["bufpool_accesses"] == result.event_counts["lock_requests"]

    def test_every_transaction_commits(self):
        config = make_config()
        result = run_sim(config)
        assert result.committed == len(generate_transactions(config))
        assert result.event_counts["commits"] == result.committed
        assert result.summary.n == result.committed
        assert result.throughput_tps == pytest.approx(result.committed / config.duration_s)

    def test_result_document(self):
        document = run_sim(make_config()).to_dict()
        assert {"config", "summary", "committed", "event_counts", "phase_breakdown",
                "latencies_ns"} <= set(document)
        assert [row["phase"] for row in document["phase_breakdown"]] == list(PHASES)

    def test_log_policies_order_mean_latency(self):
        means = {policy: run_sim(make_config(log={"policy": policy})).summary.mean_ns
                 for policy in ("eager", "lazy_flush", "lazy_write")}
        assert means["eager"] > means["lazy_flush"] > means["lazy_write"]

    def test_log_policies_order_latency_variance(self):
        variance = {}
        for policy in ("eager", "lazy_flush", "lazy_write"):
            runs = [run_sim(shipped("flush_contended", seed=seed, **{"log.policy": policy,
                                                                      "log.write_ns": 20_000})).latencies_ns
                    for seed in range(3)]
            variance[policy] = row_from_latencies(policy, runs).variance_ns2
        assert variance["lazy_write"] < variance["lazy_flush"] < variance["eager"]

    def test_lazy_write_skips_the_log(self):
        result = run_sim(make_config(log={"policy": "lazy_write"}))
        assert result.event_counts["log_writes"] == 0
        assert (result.phases["log_wait_ns"] == 0).all()

    def test_second_log_device_cuts_flush_waits(self):
        values = dict(duration_s=0.2, rate_tps=15_000.0, log={"flush_ns": 50_000})
        one = run_sim(make_config(**values))
        two = run_sim(make_config(**{**values, "log": {"flush_ns": 50_000, "devices": 2}}))
        assert two.phases["log_wait_ns"].mean() < one.phases["log_wait_ns"].mean()
        assert two.summary.variance_ns2 < one.summary.variance_ns2

    def test_vats_reduces_variance_under_contention(self):
        fcfs = vats = 0.0
        for seed in range(4):
            fcfs += run_sim(contended(seed=seed, scheduler="fcfs")).summary.variance_ns2
            vats += run_sim(contended(seed=seed, scheduler="vats")).summary.variance_ns2
        assert vats < fcfs

    @pytest.mark.slow
    def test_vats_cuts_variance_over_twenty_seeds(self):
        rows = with_changes([
            row_from_latencies(name, [run_sim(shipped("contended", seed=seed, scheduler=name)).latencies_ns
                                      for seed in range(20)])
            for name in ("fcfs", "vats")])
        vats = rows[1]
        assert vats.variance_change_pct >= 20.0
        assert vats.l2_change_pct > 0.0

    @pytest.mark.slow
    def test_vats_is_neutral_without_contention(self):
        rows = with_changes([
            row_from_latencies(name, [run_sim(shipped("uncontended", seed=seed, scheduler=name)).latencies_ns
                                      for seed in range(20)])
            for name in ("fcfs", "vats")])
        assert abs(rows[1].variance_change_pct) <= 5.0

    def test_vats_counts_activations(self):
        result = run_sim(contended(scheduler="vats"))
        assert result.event_counts["vats_activations"] > 0
        assert run_sim(contended(scheduler="fcfs")).event_counts["vats_activations"] == 0

    def test_saturation_reports_queue(self):
        with pytest.raises(SaturationError) as info:
            run_sim(contended(rate_tps=5000.0, max_waiters=1))
        assert "max_waiters" in str(info.value)
        assert info.value.diagnostic["queue_length"] > 1
        assert "record_id" in info.value.diagnostic


class TestMenus:
    def test_two_transaction_example(self):
        menu = Menu([MenuEntry(0, 0.0, 0.0), MenuEntry(1, 5.0, 1.0)])
        latencies = menu_latencies(menu, [10.0, 10.0], SchedulerPolicy.fcfs())
        np.testing.assert_allclose(latencies, [10.0, 24.0])
        assert math.hypot(*latencies) == pytest.approx(26.0)

    def test_eldest_first_lowers_l2(self):
        menu = Menu([MenuEntry(0, 0.0, 0.0), MenuEntry(1, 0.0, 1.0), MenuEntry(2, 10.0, 2.0)])
        fcfs = menu_latencies(menu, [10.0] * 3, SchedulerPolicy.fcfs())
        etf = menu_latencies(menu, [10.0] * 3, SchedulerPolicy.vats(0.0))
        np.testing.assert_allclose(fcfs, [10.0, 19.0, 38.0])
        np.testing.assert_allclose(etf, [10.0, 29.0, 28.0])
        assert fcfs.sum() == etf.sum()
        assert np.linalg.norm(etf) < np.linalg.norm(fcfs)

    def test_menu_validation(self):
        with pytest.raises(ValueError):
            Menu([MenuEntry(0, 0.0, 2.0), MenuEntry(1, 0.0, 1.0)])
        with pytest.raises(ValueError):
            Menu([MenuEntry(0, -1.0, 0.0)])
        with pytest.raises(ValueError):
            generate_menu(np.random.default_rng(0), 0)

    def test_remaining_time_models(self, rng):
        assert RemainingTimeModel("constant", 3.0).sample(rng, 4).tolist() == [3.0] * 4
        draws = RemainingTimeModel("lognormal", 2.0, 0.5).sample(rng, 50_000)
        assert draws.mean() == pytest.approx(2.0, rel=0.03)
        with pytest.raises(ValueError):
            RemainingTimeModel("pareto")
        with pytest.raises(ValueError):
            RemainingTimeModel(mean=0.0)

    def test_run_menu_is_seeded(self):
        menu = generate_menu(np.random.default_rng(1), 6)
        model = RemainingTimeModel()
        first = run_menu(menu, model, SchedulerPolicy.random(), trials=50, seed=3)
        second = run_menu(menu, model, SchedulerPolicy.random(), trials=50, seed=3)
        assert first == second
        assert first.stderr > 0

    def test_eldest_first_never_worse_in_expectation(self):
        rng = np.random.default_rng(8)
        menus = [generate_menu(rng, int(rng.integers(2, 9))) for _ in range(10)]
        policies = [SchedulerPolicy.fcfs(), SchedulerPolicy.vats(0.0), SchedulerPolicy.random()]
        table = evaluate_menus(menus, RemainingTimeModel(), policies, trials=400, seed=5)
        assert len(table) == 30
        for _, group in table.groupby("menu"):
            rows = group.set_index("policy")
            vats = rows.loc["vats"]
            for other in ("fcfs", "random"):
                margin = 2 * math.hypot(vats["stderr"], rows.loc[other, "stderr"])
                assert vats["mean"] <= rows.loc[other, "mean"] + margin

    @pytest.mark.slow
    def test_eldest_first_never_worse_at_full_scale(self):
        rng = np.random.default_rng(2024)
        menus = [generate_menu(rng, int(rng.integers(2, 11))) for _ in range(50)]
        policies = [SchedulerPolicy.fcfs(), SchedulerPolicy.vats(0.0), SchedulerPolicy.random()]
        table = evaluate_menus(menus, RemainingTimeModel("exponential"), policies, trials=10_000, p=2.0, seed=11)
        assert len(table) == 150
        assert table["n_txns"].between(2, 10).all()
        for _, group in table.groupby("menu"):
            rows = group.set_index("policy")
            vats = rows.loc["vats"]
            for other in ("fcfs", "random"):
                margin = 2 * math.hypot(vats["stderr"], rows.loc[other, "stderr"])
                assert vats["mean"] <= rows.loc[other, "mean"] + margin


class TestPoolSimulation:
    CONFIG = BufPoolConfig(capacity=64, n_pages=80, zipf_s=0.0, threads=32, accesses_per_thread=300,
                           think_ns=2_000, critical_section_ns=5_000, spin_timeout_ns=10_000)

    def test_llu_bounds_list_lock_waits(self):
        baseline = simulate_pool(self.CONFIG, seed=3, mode="baseline")
        llu = simulate_pool(self.CONFIG, seed=3, mode="llu")
        assert max(baseline.stats.wait_ns) > self.CONFIG.spin_timeout_ns
        assert max(llu.stats.wait_ns) <= self.CONFIG.spin_timeout_ns
        assert llu.stats.deferred > 0 and baseline.stats.deferred == 0
        assert llu.stats.accesses == baseline.stats.accesses == 32 * 300
        assert llu.wait_summary.variance_ns2 < baseline.wait_summary.variance_ns2

    def test_llu_keeps_hit_rate_and_cuts_wait_variance(self):
        baseline = simulate_pool(self.CONFIG, seed=3, mode="baseline")
        llu = simulate_pool(self.CONFIG, seed=3, mode="llu")
        assert abs(llu.stats.hit_rate - baseline.stats.hit_rate) <= 0.02
        cut = relative_change(baseline.wait_summary.variance_ns2, llu.wait_summary.variance_ns2)
        assert cut >= 0.20

    def test_deterministic(self):
        first = simulate_pool(self.CONFIG, seed=9)
        second = simulate_pool(self.CONFIG, seed=9)
        assert first.to_dict() == second.to_dict()
        assert first.mode == "baseline"
