"""Strategy interface: locality by construction, determinism, built-ins."""

import math
import struct

import numpy as np
import pytest
from scipy import stats

from bellbet.core import OPTIMAL_ANGLES, Setting, TrialRecord
from bellbet.strategies import (
    LEFT,
    LOCAL_STRATEGY_NAMES,
    OUTCOME_RANGE_HALF_WIDTH,
    RIGHT,
    ConstantStrategy,
    SourceMessage,
    StationMemory,
    StrategyError,
    TrialView,
    best_deterministic_assignment,
    build_strategy,
    _assignment_bits,
)


def prepared(name, seed=11, n=64, mode="sequential", params=None):
    strategy = build_strategy(name, params)
    strategy.prepare(seed=seed, n=n, angles=OPTIMAL_ANGLES, mode=mode)
    return strategy


class TestRegistry:
    def test_unknown_name(self):
        with pytest.raises(StrategyError):
            build_strategy("telepathy")

    def test_cheater_refused_by_default(self):
        with pytest.raises(StrategyError):
            build_strategy("nonlocal-cheater")

    def test_cheater_constructible_when_enforcement_disabled(self):
        cheater = build_strategy("nonlocal-cheater", allow_nonlocal=True)
        assert cheater.respond_nonlocal(LEFT, 1, 2) == cheater.respond_nonlocal(RIGHT, 1, 2)
        assert cheater.respond_nonlocal(LEFT, 1, 1) != cheater.respond_nonlocal(RIGHT, 1, 1)
        with pytest.raises(StrategyError):
            cheater.station_respond(LEFT, 1, SourceMessage(b""), StationMemory())

    def test_local_roster(self):
        assert set(LOCAL_STRATEGY_NAMES) == {
            "constant",
            "independent-coin",
            "classical-polarizer",
            "deterministic-optimal",
            "adaptive-frequency-tracker",
        }

    def test_descriptor(self):
        strategy = prepared("range-violator", seed=31)
        descriptor = strategy.descriptor()
        assert descriptor.name == "range-violator"
        assert descriptor.locality_class == "range-violating"
        assert descriptor.seed == 31
        with pytest.raises(StrategyError):
            build_strategy("constant").descriptor()


class TestLocalityByConstruction:
    def test_signature_admits_no_other_wing(self):
        import inspect

        params = inspect.signature(ConstantStrategy.station_respond).parameters
        assert set(params) == {"self", "side", "setting_index", "message", "memory"}

    @pytest.mark.parametrize("name", LOCAL_STRATEGY_NAMES)
    def test_cloning_determinism(self, name):
        # Evaluate both settings on identical (message, memory), twice: the
        # outputs are functions of own setting only.
        strategy = prepared(name)
        message = strategy.source_emit(1, ())
        for side in (LEFT, RIGHT):
            memory = strategy.initial_memory(side)
            first = [strategy.station_respond(side, k, message, memory) for k in (1, 2)]
            second = [strategy.station_respond(side, k, message, memory) for k in (1, 2)]
            assert first == second

    @pytest.mark.parametrize("name", LOCAL_STRATEGY_NAMES)
    def test_runs_reproducible_across_instances(self, name):
        outputs = []
        for _ in range(2):
            strategy = prepared(name, seed=5, n=32)
            memory = {s: strategy.initial_memory(s) for s in (LEFT, RIGHT)}
            history = []
            bits = []
            for m in range(1, 33):
                message = strategy.source_emit(m, history)
                x = strategy.station_respond(LEFT, 1 + (m % 2), message, memory[LEFT])
                y = strategy.station_respond(RIGHT, 1 + ((m // 2) % 2), message, memory[RIGHT])
                bits.append((x, y))
                record = TrialRecord(
                    m=m, setting=Setting(1 + (m % 2), 1 + ((m // 2) % 2)), x=int(x) & 1, y=int(y) & 1
                )
                history.append(record)
                for side in (LEFT, RIGHT):
                    own = record.setting.i if side == LEFT else record.setting.j
                    other = record.setting.j if side == LEFT else record.setting.i
                    view = TrialView(
                        m=m,
                        own_setting=own,
                        own_outcome=record.x if side == LEFT else record.y,
                        other_setting=other,
                        other_outcome=record.y if side == LEFT else record.x,
                    )
                    memory[side] = strategy.update_memory(side, memory[side], view)
            outputs.append(bits)
        assert outputs[0] == outputs[1]


class TestConstant:
    def test_fixed_payload_and_bit(self):
        strategy = prepared("constant")
        assert strategy.source_emit(1, ()).payload == b""
        assert strategy.source_emit(9, ()).payload == b""
        assert strategy.station_respond(LEFT, 1, SourceMessage(b""), StationMemory()) == 1
        assert prepared("constant", params={"bit": 0}).station_respond(
            RIGHT, 2, SourceMessage(b""), StationMemory()
        ) == 0

    def test_memory_unchanged_but_counter_advances(self):
        strategy = prepared("constant")
        memory = strategy.initial_memory(LEFT)
        view = TrialView(m=1, own_setting=1, own_outcome=1)
        updated = strategy.update_memory(LEFT, memory, view)
        assert updated == StationMemory(next_trial=2)

    def test_rejects_non_bit_param(self):
        with pytest.raises(StrategyError):
            ConstantStrategy(bit=2)


class TestClassicalPolarizer:
    def test_polarization_angles_uniform(self):
        # Chi-square uniformity of the hidden angle over 10^5 draws.
        strategy = prepared("classical-polarizer", seed=2026, n=100_000)
        thetas = np.array(
            [
                struct.unpack("<d", strategy.source_emit(m, ()).payload)[0]
                for m in range(1, 100_001)
            ]
        )
        assert thetas.min() >= 0.0 and thetas.max() < math.pi
        counts, _ = np.histogram(thetas, bins=32, range=(0.0, math.pi))
        assert stats.chisquare(counts).pvalue > 1e-4

    def test_zero_distance_passes(self):
        # Analyzer at 0 with polarization 0: zero angular distance -> pass.
        from bellbet.core import AngleConfig

        strategy = build_strategy("classical-polarizer")
        strategy.prepare(seed=1, n=4, angles=AngleConfig(0.0, 1.0, 0.5, -0.5), mode="sequential")
        message = SourceMessage(struct.pack("<d", 0.0))
        assert strategy.station_respond(LEFT, 1, message, StationMemory()) == 1

    def test_threshold(self):
        from bellbet.core import AngleConfig

        strategy = build_strategy("classical-polarizer")
        strategy.prepare(seed=1, n=4, angles=AngleConfig(0.0, 0.0, 0.0, 0.0), mode="sequential")
        just_inside = SourceMessage(struct.pack("<d", math.pi / 4.0 - 1e-9))
        just_outside = SourceMessage(struct.pack("<d", math.pi / 4.0 + 1e-9))
        assert strategy.station_respond(LEFT, 1, just_inside, StationMemory()) == 1
        assert strategy.station_respond(LEFT, 1, just_outside, StationMemory()) == 0

    def test_triangle_coincidence_law(self):
        # With theta uniform on [0, pi), two pi/4-threshold polarizers at
        # angular distance d coincide with probability 1 - 2d/pi.
        from bellbet.core import AngleConfig
        from bellbet.config import SideSpec
        from bellbet.montecarlo import simulate_run
        from bellbet.strategies import angular_distance

        angles = AngleConfig(0.3, 1.2, -0.5, 0.9)
        n = 400_000
        run = simulate_run(
            SideSpec(kind="strategy", strategy="classical-polarizer"), angles, n, seed=606
        )
        coincide = run.x == run.y
        for cell in range(4):
            i, j = (cell >> 1) + 1, (cell & 1) + 1
            d = float(angular_distance(angles.left(i), angles.right(j)))
            expected = 1.0 - 2.0 * d / math.pi
            mask = run.cells == cell
            freq = float(coincide[mask].mean())
            se = math.sqrt(expected * (1.0 - expected) / int(mask.sum()))
            assert abs(freq - expected) <= 4.0 * se, (cell, freq, expected)


class TestDeterministicOptimal:
    def test_assignment_attains_zero_slack(self):
        k = best_deterministic_assignment()
        x1, x2, y1, y2 = _assignment_bits(k)
        from bellbet.core import JointBitDistribution, bell_inequality_slack

        assert bell_inequality_slack(JointBitDistribution.point_mass(x1, x2, y1, y2)) == 0.0

    def test_responses_follow_assignment(self):
        strategy = prepared("deterministic-optimal")
        message = strategy.source_emit(1, ())
        x1, x2, y1, y2 = _assignment_bits(message.payload[0])
        memory = StationMemory()
        assert strategy.station_respond(LEFT, 1, message, memory) == x1
        assert strategy.station_respond(LEFT, 2, message, memory) == x2
        assert strategy.station_respond(RIGHT, 1, message, memory) == y1
        assert strategy.station_respond(RIGHT, 2, message, memory) == y2


class TestAdaptiveTracker:
    def _history(self, cells):
        records = []
        for m, cell in enumerate(cells, start=1):
            records.append(TrialRecord(m=m, setting=Setting.from_cell(cell), x=0, y=0))
        return records

    def test_payload_adapts_after_ten_trials(self):
        strategy = prepared("adaptive-frequency-tracker")
        first = strategy.source_emit(1, ()).payload
        history = self._history([0, 0, 3, 3, 0, 2, 3, 0, 0, 3])
        later = strategy.source_emit(11, history).payload
        assert later != first

    def test_memory_tracks_setting_frequencies(self):
        # Replay a fixed 20-trial log and check the stored joint counts.
        strategy = prepared("adaptive-frequency-tracker")
        cells = [0, 1, 1, 2, 3, 0, 0, 1, 2, 2, 3, 3, 3, 0, 1, 2, 1, 0, 2, 3]
        memory = strategy.initial_memory(LEFT)
        for m, cell in enumerate(cells, start=1):
            setting = Setting.from_cell(cell)
            view = TrialView(
                m=m,
                own_setting=setting.i,
                own_outcome=0,
                other_setting=setting.j,
                other_outcome=0,
            )
            memory = strategy.update_memory(LEFT, memory, view)
        expected = tuple(int(np.bincount(cells, minlength=4)[c]) for c in range(4))
        assert memory.cell_counts == expected
        assert memory.own_counts == (
            sum(1 for c in cells if c < 2),
            sum(1 for c in cells if c >= 2),
        )
        assert memory.next_trial == 21

    def test_source_counts_incremental_vs_recount(self):
        strategy = prepared("adaptive-frequency-tracker")
        cells = [1, 1, 0, 2, 3, 1, 0]
        history = self._history(cells)
        # Incremental path (grow one at a time).
        for upto in range(len(history) + 1):
            strategy.source_emit(upto + 1, history[:upto])
        incremental = strategy._cached_counts.copy()
        fresh = prepared("adaptive-frequency-tracker")
        fresh.source_emit(len(history) + 1, history)
        assert np.array_equal(incremental, fresh._cached_counts)

    def test_conditional_mean_nonpositive(self):
        # Whatever assignment it picks, E[delta | counts] <= 0 under uniform
        # settings: the chosen assignment is still a deterministic local law.
        from bellbet.strategies import ASSIGNMENT_VALUES

        strategy = prepared("adaptive-frequency-tracker")
        rng = np.random.default_rng(12)
        for _ in range(200):
            counts = rng.integers(0, 50, size=4)
            k = strategy.choose_assignment(counts.astype(np.int64))
            assert ASSIGNMENT_VALUES[k].sum() <= 0


class TestRangeViolator:
    def test_emits_reals_in_documented_range(self):
        strategy = prepared("range-violator", seed=8, n=100)
        values = [
            strategy.station_respond(LEFT, 1, SourceMessage(b""), StationMemory(next_trial=m))
            for m in range(1, 101)
        ]
        arr = np.array(values)
        assert np.all(np.abs(arr) <= OUTCOME_RANGE_HALF_WIDTH)
        assert not np.isin(arr, (0.0, 1.0)).any()
        assert all(isinstance(v, float) for v in values)


class TestIndependentCoin:
    def test_sides_use_distinct_streams(self):
        strategy = prepared("independent-coin", seed=3, n=2000)
        left = [
            strategy.station_respond(LEFT, 1, SourceMessage(b""), StationMemory(next_trial=m))
            for m in range(1, 2001)
        ]
        right = [
            strategy.station_respond(RIGHT, 1, SourceMessage(b""), StationMemory(next_trial=m))
            for m in range(1, 2001)
        ]
        assert left != right
        assert 0.4 < np.mean(left) < 0.6
        assert 0.4 < np.mean(right) < 0.6
