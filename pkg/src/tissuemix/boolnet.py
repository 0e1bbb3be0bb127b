"""Gate-level Boolean networks with stuck-at fault injection.

A network is a combinational circuit over AND/OR/NOT/BUF gates. A fault
map freezes chosen nodes at 0 or 1 regardless of their inputs; a stimulus
assigns every input node and may force drug-target nodes to 0 (kinase
inhibition). Precedence during evaluation: fault override, then drug
forcing, then normal gate logic. Evaluating one output across an ensemble
of faulty copies of the network yields that gene's expression profile.

Netlist text format (one directive per line, '#' comments):
    input <name>
    gate <name> = AND|OR|NOT|BUF(<fanin>[, <fanin>...])
    output <name>
Fault files:    stuck <name> <0|1>
Stimulus files: set <name> <0|1>  /  drug <name>
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .model import ExpressionProfile

__all__ = [
    "BooleanNetwork",
    "FaultMap",
    "NetlistError",
    "NetworkError",
    "Stimulus",
    "evaluate",
    "parse_fault",
    "parse_netlist",
    "parse_stimulus",
    "profiles_for_ensemble",
]

GATE_OPS = {
    "AND": lambda vals: int(all(vals)),
    "OR": lambda vals: int(any(vals)),
    "NOT": lambda vals: 1 - vals[0],
    "BUF": lambda vals: vals[0],
}


class NetworkError(ValueError):
    """Structural problem: cycle, unresolved name, or arity violation."""


class NetlistError(ValueError):
    """Parse failure; carries the offending line number."""

    def __init__(self, msg, line_no):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


@dataclass(frozen=True)
class BooleanNetwork:
    inputs: tuple[str, ...]
    gates: dict[str, tuple[str, tuple[str, ...]]]  # name -> (op, fanins)
    outputs: tuple[str, ...]
    _order: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        names = set(self.inputs) | set(self.gates)
        for out in self.outputs:
            if out not in names:
                raise NetworkError(f"output {out!r} is not a node")
        for name, (op, fanins) in self.gates.items():
            if op not in GATE_OPS:
                raise NetworkError(f"unknown gate op {op!r} at {name!r}")
            if op in ("NOT", "BUF") and len(fanins) != 1:
                raise NetworkError(f"{op} gate {name!r} must have exactly one fan-in")
            if not fanins:
                raise NetworkError(f"gate {name!r} has no fan-ins")
            for f in fanins:
                if f not in names:
                    raise NetworkError(f"gate {name!r} references unknown node {f!r}")
        object.__setattr__(self, "_order", self._toposort())

    def _toposort(self) -> tuple[str, ...]:
        state: dict[str, int] = {}  # 0 visiting, 1 done
        order: list[str] = []

        def visit(node: str, trail: tuple[str, ...]):
            mark = state.get(node)
            if mark == 1:
                return
            if mark == 0:
                cycle = " -> ".join(trail + (node,))
                raise NetworkError(f"cycle detected: {cycle}")
            state[node] = 0
            if node in self.gates:
                for f in self.gates[node][1]:
                    visit(f, trail + (node,))
            state[node] = 1
            order.append(node)

        for name in self.gates:
            visit(name, ())
        return tuple(order)

    @property
    def nodes(self) -> tuple[str, ...]:
        return tuple(self.inputs) + tuple(self.gates)


@dataclass(frozen=True)
class FaultMap:
    """Stuck-at overrides: node -> frozen value."""

    overrides: dict[str, int] = field(default_factory=dict)

    def validated(self, net: BooleanNetwork) -> "FaultMap":
        for name, v in self.overrides.items():
            if name not in set(net.nodes):
                raise NetworkError(f"fault on unknown node {name!r}")
            if v not in (0, 1):
                raise NetworkError(f"stuck value must be 0 or 1, got {v!r}")
        return self


@dataclass(frozen=True)
class Stimulus:
    """Input assignment plus the set of drug-inhibited nodes."""

    assignment: dict[str, int]
    drug_targets: frozenset[str] = frozenset()

    def validated(self, net: BooleanNetwork) -> "Stimulus":
        missing = set(net.inputs) - set(self.assignment)
        if missing:
            raise NetworkError(f"stimulus misses inputs: {sorted(missing)}")
        for name in self.drug_targets:
            if name not in set(net.nodes):
                raise NetworkError(f"drug target {name!r} is not a node")
        return self


def evaluate(net: BooleanNetwork, fault: FaultMap, stim: Stimulus) -> dict[str, int]:
    """Topological evaluation returning each output's bit.

    A faulted node takes its stuck value no matter what feeds it; a drug
    target is forced to 0 unless a stuck-at-1 fault overrides the drug.
    """
    fault.validated(net)
    stim.validated(net)
    values: dict[str, int] = {}

    def settle(name: str, raw: int) -> int:
        if name in fault.overrides:
            return fault.overrides[name]
        if name in stim.drug_targets:
            return 0
        return raw

    for name in net.inputs:
        values[name] = settle(name, int(stim.assignment[name]) & 1)
    for name in net._order:
        if name in values:
            continue
        op, fanins = net.gates[name]
        values[name] = settle(name, GATE_OPS[op]([values[f] for f in fanins]))
    return {out: values[out] for out in net.outputs}


def profiles_for_ensemble(
    net: BooleanNetwork,
    faults,
    stimuli,
    gene_map: dict[str, str] | None = None,
) -> list[ExpressionProfile]:
    """Expression profiles across the faulty-network ensemble.

    One profile per (stimulus, output) pair; entry q of a profile is that
    output's bit under fault map q. gene_map renames outputs to gene ids
    on the profile labels.
    """
    faults = list(faults)
    stimuli = list(stimuli)
    if not faults:
        raise ValueError("need at least one fault map (one per network)")
    if not stimuli:
        raise ValueError("need at least one stimulus")
    gene_map = gene_map or {}
    profiles = []
    for s_idx, stim in enumerate(stimuli):
        per_fault = [evaluate(net, f, stim) for f in faults]
        for out in net.outputs:
            bits = np.array([pf[out] for pf in per_fault], dtype=np.float64)
            gene = gene_map.get(out, out)
            label = gene if len(stimuli) == 1 else f"{gene}@s{s_idx}"
            profiles.append(ExpressionProfile(bits, gene=label))
    return profiles


_GATE_RE = re.compile(r"^(\w+)\s*=\s*(\w+)\s*\(([^)]*)\)$")


def parse_netlist(text: str) -> BooleanNetwork:
    inputs: list[str] = []
    gates: dict[str, tuple[str, tuple[str, ...]]] = {}
    outputs: list[str] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            kind, rest = line.split(None, 1)
        except ValueError:
            raise NetlistError(f"cannot parse {line!r}", line_no) from None
        if kind == "input":
            inputs.append(rest.strip())
        elif kind == "output":
            outputs.append(rest.strip())
        elif kind == "gate":
            m = _GATE_RE.match(rest.strip())
            if not m:
                raise NetlistError(f"malformed gate {rest!r}", line_no)
            name, op, fanin_s = m.groups()
            if op.upper() not in GATE_OPS:
                raise NetlistError(f"unknown gate op {op!r}", line_no)
            fanins = tuple(f.strip() for f in fanin_s.split(",") if f.strip())
            if name in gates or name in inputs:
                raise NetlistError(f"duplicate node {name!r}", line_no)
            gates[name] = (op.upper(), fanins)
        else:
            raise NetlistError(f"unknown directive {kind!r}", line_no)
    try:
        return BooleanNetwork(inputs=tuple(inputs), gates=gates, outputs=tuple(outputs))
    except NetworkError:
        raise


def parse_fault(text: str) -> FaultMap:
    overrides: dict[str, int] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] != "stuck" or parts[2] not in ("0", "1"):
            raise NetlistError(f"expected 'stuck <name> <0|1>', got {line!r}", line_no)
        overrides[parts[1]] = int(parts[2])
    return FaultMap(overrides)


def parse_stimulus(text: str) -> Stimulus:
    assignment: dict[str, int] = {}
    drugs: set[str] = set()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "set" and len(parts) == 3 and parts[2] in ("0", "1"):
            assignment[parts[1]] = int(parts[2])
        elif parts[0] == "drug" and len(parts) == 2:
            drugs.add(parts[1])
        else:
            raise NetlistError(f"expected 'set <name> <0|1>' or 'drug <name>', got {line!r}", line_no)
    return Stimulus(assignment=assignment, drug_targets=frozenset(drugs))
