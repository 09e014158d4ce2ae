import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewspike.errors import DecayOutOfRange, Overflow
from fewspike.neuron import (
    DECAY_SCALE,
    NeuronParams,
    NeuronState,
    OverflowMode,
    ResetMode,
    STATE_MAX,
    decay_factor,
    decay_state,
    step_neuron,
    step_neuron_full,
)


def iterate_default_neuron(weighted_input, n_steps, params):
    """Independent straight-line oracle for the discrete dynamics.

    Plain Python ints, no shared code with the engine.
    """
    i_state = 0
    u_state = 0
    spikes = []
    u_trace = []
    for _ in range(n_steps):
        i_state = (abs(i_state) * (4096 - params.current_decay) // 4096) * (1 if i_state >= 0 else -1) + weighted_input
        u_decayed = (abs(u_state) * (4096 - params.voltage_decay) // 4096) * (1 if u_state >= 0 else -1)
        u_state = u_decayed + i_state + params.bias
        u_trace.append(u_state)
        if u_state >= params.u_threshold:
            spikes.append(1)
            u_state = 0
        else:
            spikes.append(0)
    return spikes, u_trace


class TestDecay:
    def test_boundaries(self):
        assert decay_factor(0) == 1.0
        assert decay_factor(4096) == 0.0

    def test_quarter_decay(self):
        assert decay_factor(1024) == 0.75
        assert decay_state(np.array([1000]), 1024)[0] == 750

    def test_out_of_range(self):
        with pytest.raises(DecayOutOfRange):
            decay_factor(4097)
        with pytest.raises(DecayOutOfRange):
            decay_state(np.array([1]), -1)

    def test_rounding_toward_zero_is_sign_symmetric(self):
        for v in (1001, 5, 12345):
            pos = decay_state(np.array([v]), 1000)[0]
            neg = decay_state(np.array([-v]), 1000)[0]
            assert neg == -pos

    @settings(max_examples=50, deadline=None)
    @given(v=st.integers(-STATE_MAX, STATE_MAX), d=st.integers(0, 4096))
    def test_decay_matches_truncated_product(self, v, d):
        got = int(decay_state(np.array([v]), d)[0])
        expected = int(abs(v) * (4096 - d) // 4096) * (1 if v >= 0 else -1)
        assert got == expected


class TestStepNeuron:
    def test_zero_fixed_point(self):
        params = NeuronParams()
        state = NeuronState.zeros((3,))
        new, spikes = step_neuron(state, params, np.zeros(3, dtype=np.int64))
        assert not spikes.any()
        assert not new.current.any() and not new.voltage.any()

    def test_first_spike_time_matches_iteration_oracle(self):
        params = NeuronParams()
        expected_spikes, expected_u = iterate_default_neuron(2048, 40, params)
        state = NeuronState.zeros((1,))
        got_spikes = []
        got_u = []
        for _ in range(40):
            state, s, u_pre = step_neuron_full(state, params, np.array([2048]))
            got_spikes.append(int(s[0]))
            got_u.append(int(u_pre[0]))
        assert got_spikes == expected_spikes
        assert got_u == expected_u
        assert 1 in got_spikes

    def test_single_pulse_matches_convolution_oracle(self):
        # u response to one input pulse equals the discrete double-exponential
        # kernel built by brute-force convolution of the two decay chains
        params = NeuronParams(u_threshold=10**7)  # never spikes
        pulse = 4096
        n = 30
        gi = (4096 - params.current_decay) / 4096
        gu = (4096 - params.voltage_decay) / 4096
        state = NeuronState.zeros((1,))
        u_trace = []
        for t in range(n):
            z = np.array([pulse if t == 0 else 0])
            state, _, u_pre = step_neuron_full(state, params, z)
            u_trace.append(float(u_pre[0]))
        # float-kernel oracle: u[t] = sum_{k<=t} gu^(t-k) * gi^k * pulse.
        # Truncation loses <= 1 unit per decay step; those losses compound
        # through the current chain (gain 1/(1-gi)) and the voltage chain.
        e_i = 1 / (1 - gi)
        for t in range(n):
            expected = sum(gu ** (t - k) * gi**k * pulse for k in range(t + 1))
            tol = (e_i + 1) * (1 - gu ** (t + 1)) / (1 - gu)
            assert abs(u_trace[t] - expected) <= tol

    def test_hard_reset_zeroes_voltage(self):
        params = NeuronParams()
        state = NeuronState.zeros((1,))
        for _ in range(50):
            state, spikes, u_pre = step_neuron_full(state, params, np.array([4000]))
            if spikes[0]:
                assert state.voltage[0] == 0
                assert u_pre[0] >= params.u_threshold
        assert state.current[0] > 0

    def test_soft_subtract_reset(self):
        params = NeuronParams(refractory_mode=ResetMode.SOFT_SUBTRACT)
        state = NeuronState.zeros((1,))
        spiked = False
        for _ in range(50):
            prev_r = int(state.refractory[0])
            state, spikes, u_pre = step_neuron_full(state, params, np.array([4000]))
            if spikes[0]:
                spiked = True
                r_new = (abs(prev_r) * (4096 - params.refractory_decay) // 4096) + 1
                assert state.refractory[0] == r_new
                assert state.voltage[0] == u_pre[0] - params.u_threshold * r_new
        assert spiked

    def test_strict_overflow_raises(self):
        params = NeuronParams(u_threshold=10**7, current_decay=0)
        state = NeuronState.zeros((1,))
        with pytest.raises(Overflow):
            for _ in range(10_000):
                state, _ = step_neuron(state, params, np.array([10**6]))

    def test_saturate_mode_clamps(self):
        params = NeuronParams(u_threshold=10**7, current_decay=0)
        state = NeuronState.zeros((1,))
        for _ in range(100):
            state, _ = step_neuron(state, params, np.array([10**6]),
                                   OverflowMode.SATURATE)
        assert state.current[0] == STATE_MAX

    def test_no_decay_no_spike_state_constant(self):
        params = NeuronParams(u_threshold=10**7, current_decay=0, voltage_decay=0)
        state = NeuronState(np.array([500]), np.array([900]), np.array([0]))
        new, _ = step_neuron(state, params, np.array([0]))
        assert new.current[0] == 500          # no leak
        assert new.voltage[0] == 900 + 500    # voltage integrates current

    def test_full_decay_state_equals_input(self):
        params = NeuronParams(u_threshold=10**7, current_decay=4096,
                              voltage_decay=4096)
        state = NeuronState(np.array([12345]), np.array([777]), np.array([0]))
        new, _ = step_neuron(state, params, np.array([42]))
        assert new.current[0] == 42
        assert new.voltage[0] == 42

    def test_subthreshold_linearity(self):
        # response to a sum of trains equals sum of responses, within
        # 1 rounding unit per step per term
        params = NeuronParams(u_threshold=10**7)
        rng = np.random.default_rng(0)
        n_steps = 50
        trains = [rng.integers(0, 200, size=n_steps) for _ in range(2)]

        def run(z_seq):
            state = NeuronState.zeros((1,))
            trace = []
            for z in z_seq:
                state, _, u = step_neuron_full(state, params, np.array([int(z)]))
                trace.append(int(u[0]))
            return np.array(trace)

        separate = run(trains[0]) + run(trains[1])
        combined = run(trains[0] + trains[1])
        tol = 2 * np.arange(1, n_steps + 1)  # terms * steps
        assert np.all(np.abs(separate - combined) <= tol)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_hard_reset_invariant_property(self, seed):
        rng = np.random.default_rng(seed)
        params = NeuronParams()
        state = NeuronState.zeros((4,))
        for _ in range(30):
            z = rng.integers(0, 3000, size=4)
            state, spikes = step_neuron(state, params, z)
            assert np.all(state.voltage[spikes == 1] == 0)
