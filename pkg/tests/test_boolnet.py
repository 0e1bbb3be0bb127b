import itertools

import numpy as np
import pytest

from tissuemix import boolnet
from tissuemix.boolnet import BooleanNetwork, FaultMap, NetlistError, NetworkError, Stimulus
from tissuemix.oracles import brute_force_evaluate


def and_net():
    return BooleanNetwork(
        inputs=("a", "b"),
        gates={"y": ("AND", ("a", "b"))},
        outputs=("y",),
    )


def random_toy_net(rng: np.random.Generator, n_inputs: int = 4, n_gates: int = 6) -> BooleanNetwork:
    """Random acyclic netlist over AND/OR/NOT/BUF."""
    inputs = tuple(f"i{k}" for k in range(n_inputs))
    names = list(inputs)
    gates = {}
    for g in range(n_gates):
        op = rng.choice(["AND", "OR", "NOT", "BUF"])
        if op in ("NOT", "BUF"):
            fanins = (str(rng.choice(names)),)
        else:
            k = int(rng.integers(2, min(4, len(names)) + 1))
            fanins = tuple(str(x) for x in rng.choice(names, size=k, replace=False))
        name = f"g{g}"
        gates[name] = (op, fanins)
        names.append(name)
    outputs = tuple(str(x) for x in rng.choice([n for n in names if n not in inputs], size=2, replace=False))
    return BooleanNetwork(inputs=inputs, gates=gates, outputs=outputs)


def all_stimuli(net: BooleanNetwork):
    for bits in itertools.product((0, 1), repeat=len(net.inputs)):
        yield Stimulus(assignment=dict(zip(net.inputs, bits)))


class TestEvaluate:
    def test_stuck_at_one_overrides_inputs(self):
        out = boolnet.evaluate(and_net(), FaultMap({"y": 1}), Stimulus({"a": 0, "b": 0}))
        assert out["y"] == 1

    def test_not_gate(self):
        net = BooleanNetwork(inputs=("a",), gates={"y": ("NOT", ("a",))}, outputs=("y",))
        assert boolnet.evaluate(net, FaultMap(), Stimulus({"a": 1}))["y"] == 0
        assert boolnet.evaluate(net, FaultMap(), Stimulus({"a": 0}))["y"] == 1

    def test_three_network_chain_profile(self):
        # chain: the output follows 'mid'; only the first network's fault
        # can push it to 1 under the all-zero stimulus
        net = BooleanNetwork(
            inputs=("x",),
            gates={"mid": ("BUF", ("x",)), "out": ("BUF", ("mid",))},
            outputs=("out",),
        )
        faults = [FaultMap({"mid": 1}), FaultMap(), FaultMap({"x": 0})]
        stim = Stimulus({"x": 0})
        bits = [boolnet.evaluate(net, f, stim)["out"] for f in faults]
        assert bits == [1, 0, 0]

    def test_drug_forces_target_to_zero(self):
        out = boolnet.evaluate(and_net(), FaultMap(), Stimulus({"a": 1, "b": 1}, frozenset({"y"})))
        assert out["y"] == 0

    def test_stuck_at_one_beats_drug(self):
        out = boolnet.evaluate(and_net(), FaultMap({"y": 1}), Stimulus({"a": 0, "b": 0}, frozenset({"y"})))
        assert out["y"] == 1

    def test_drug_on_input_node(self):
        out = boolnet.evaluate(and_net(), FaultMap(), Stimulus({"a": 1, "b": 1}, frozenset({"a"})))
        assert out["y"] == 0

    def test_unknown_fault_node(self):
        with pytest.raises(NetworkError, match="unknown node"):
            boolnet.evaluate(and_net(), FaultMap({"zz": 1}), Stimulus({"a": 0, "b": 0}))

    def test_missing_input_assignment(self):
        with pytest.raises(NetworkError, match="misses inputs"):
            boolnet.evaluate(and_net(), FaultMap(), Stimulus({"a": 0}))

    def test_cycle_detected(self):
        with pytest.raises(NetworkError, match="cycle"):
            BooleanNetwork(
                inputs=("a",),
                gates={"u": ("AND", ("a", "v")), "v": ("BUF", ("u",))},
                outputs=("u",),
            )

    def test_unresolved_fanin(self):
        with pytest.raises(NetworkError, match="unknown node"):
            BooleanNetwork(inputs=("a",), gates={"y": ("AND", ("a", "ghost"))}, outputs=("y",))

    def test_not_arity_enforced(self):
        with pytest.raises(NetworkError, match="exactly one"):
            BooleanNetwork(inputs=("a", "b"), gates={"y": ("NOT", ("a", "b"))}, outputs=("y",))


class TestInvariants:
    def test_override_is_stimulus_invariant(self):
        rng = np.random.default_rng(0)
        for trial in range(10):
            net = random_toy_net(rng)
            node = str(rng.choice(list(net.gates)))
            for stuck in (0, 1):
                fault = FaultMap({node: stuck})
                seen = {boolnet.evaluate(net, fault, s).get(node) for s in all_stimuli(net) if node in net.outputs}
                values = {
                    v
                    for s in all_stimuli(net)
                    for n, v in boolnet.evaluate(net, fault, s).items()
                    if n == node
                }
                if node in net.outputs:
                    assert values == {stuck}

    def test_faultless_matches_truth_table_oracle(self):
        rng = np.random.default_rng(1)
        for trial in range(25):
            net = random_toy_net(rng)
            for stim in all_stimuli(net):
                assert boolnet.evaluate(net, FaultMap(), stim) == brute_force_evaluate(net, FaultMap(), stim)

    def test_faulted_matches_oracle(self):
        rng = np.random.default_rng(2)
        for trial in range(25):
            net = random_toy_net(rng)
            node = str(rng.choice(list(net.gates)))
            fault = FaultMap({node: int(rng.integers(0, 2))})
            drug = frozenset({str(rng.choice(net.inputs))})
            for bits in itertools.islice(all_stimuli(net), 8):
                stim = Stimulus(bits.assignment, drug)
                assert boolnet.evaluate(net, fault, stim) == brute_force_evaluate(net, fault, stim)


class TestProfiles:
    def test_single_everything(self):
        net = and_net()
        profiles = boolnet.profiles_for_ensemble(net, [FaultMap()], [Stimulus({"a": 1, "b": 1})])
        assert len(profiles) == 1
        assert profiles[0].n_networks == 1

    def test_identical_faults_give_constant_profiles(self):
        net = and_net()
        faults = [FaultMap({"y": 1})] * 4
        profiles = boolnet.profiles_for_ensemble(net, faults, [Stimulus({"a": 0, "b": 1})])
        for p in profiles:
            assert len(set(p.d.tolist())) == 1

    def test_ensemble_against_truth_table(self):
        rng = np.random.default_rng(3)
        net = random_toy_net(rng)
        faults = [FaultMap({str(rng.choice(list(net.gates))): 1}), FaultMap(), FaultMap({net.inputs[0]: 0})]
        stimuli = list(itertools.islice(all_stimuli(net), 2))
        profiles = boolnet.profiles_for_ensemble(net, faults, stimuli)
        assert len(profiles) == 2 * len(net.outputs)
        idx = 0
        for stim in stimuli:
            per_fault = [brute_force_evaluate(net, f, stim) for f in faults]
            for out in net.outputs:
                want = [pf[out] for pf in per_fault]
                np.testing.assert_array_equal(profiles[idx].d, want)
                idx += 1

    def test_empty_faults_rejected(self):
        with pytest.raises(ValueError, match="fault"):
            boolnet.profiles_for_ensemble(and_net(), [], [Stimulus({"a": 0, "b": 0})])

    def test_gene_map_renames(self):
        profiles = boolnet.profiles_for_ensemble(
            and_net(), [FaultMap()], [Stimulus({"a": 1, "b": 1})], gene_map={"y": "cmyc"}
        )
        assert profiles[0].gene == "cmyc"


class TestParsers:
    NET = """
    # toy
    input a
    input b
    gate y = AND(a, b)
    gate z = NOT(y)
    output z
    """

    def test_netlist_roundtrip(self):
        net = boolnet.parse_netlist(self.NET)
        assert net.inputs == ("a", "b")
        assert net.gates["y"] == ("AND", ("a", "b"))
        assert net.outputs == ("z",)

    def test_netlist_error_carries_line(self):
        with pytest.raises(NetlistError) as exc:
            boolnet.parse_netlist("input a\ngate y = XO(a)\noutput y")
        assert "line" in str(exc.value)

    def test_malformed_gate_line(self):
        with pytest.raises(NetlistError) as exc:
            boolnet.parse_netlist("gate y AND(a)")
        assert exc.value.line_no == 1

    def test_fault_file(self):
        fm = boolnet.parse_fault("# c\nstuck egfr 1\nstuck pten 0\n")
        assert fm.overrides == {"egfr": 1, "pten": 0}

    def test_fault_file_rejects_garbage(self):
        with pytest.raises(NetlistError):
            boolnet.parse_fault("stuck egfr 2")

    def test_stimulus_file(self):
        st = boolnet.parse_stimulus("set egf 1\nset serum 0\ndrug mek\n")
        assert st.assignment == {"egf": 1, "serum": 0}
        assert st.drug_targets == frozenset({"mek"})

    def test_stimulus_rejects_garbage(self):
        with pytest.raises(NetlistError):
            boolnet.parse_stimulus("poke egf 1")
