"""Per-cluster input/output slot allocation for the network array."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

from .feeder import PHASES, Feeder
from .partition import ClusterTree

LOAD_QUANTITIES = ("P_load", "Q_load")
FED_QUANTITIES = ("P_fed", "Q_fed")
VOLTAGE_QUANTITIES = ("Vmag", "Vang")
HEAD_QUANTITIES = ("P_head", "Q_head")


class Slot(NamedTuple):
    bus: str
    phase: str
    quantity: str

    @property
    def label(self) -> str:
        return f"{self.quantity}@{self.bus}.{self.phase}"

    @classmethod
    def parse(cls, label: str) -> "Slot":
        quantity, rest = label.split("@", 1)
        bus, phase = rest.rsplit(".", 1)
        return cls(bus, phase, quantity)


def _six(bus: str, quantities: tuple[str, str]) -> list[Slot]:
    return [Slot(bus, p, q) for p in PHASES for q in quantities]


@dataclass(frozen=True)
class IoLayout:
    cluster: int
    inputs: tuple[Slot, ...]
    outputs: tuple[Slot, ...]

    @property
    def n_in(self) -> int:
        return len(self.inputs)

    @property
    def n_out(self) -> int:
        return len(self.outputs)

    def fed_slots(self, child_head: str) -> list[int]:
        return [k for k, s in enumerate(self.inputs) if s.bus == child_head and s.quantity in FED_QUANTITIES]

    def head_slots(self) -> list[int]:
        return [k for k, s in enumerate(self.outputs) if s.quantity in HEAD_QUANTITIES]

    def load_slots(self) -> list[int]:
        return [k for k, s in enumerate(self.inputs) if s.quantity in LOAD_QUANTITIES]

    def voltage_slots(self) -> list[int]:
        return [k for k, s in enumerate(self.outputs) if s.quantity in VOLTAGE_QUANTITIES]

    def to_dict(self) -> dict:
        return {
            "cluster": self.cluster,
            "inputs": [s.label for s in self.inputs],
            "outputs": [s.label for s in self.outputs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IoLayout":
        return cls(d["cluster"], tuple(map(Slot.parse, d["inputs"])), tuple(map(Slot.parse, d["outputs"])))


def allocate_io(tree: ClusterTree, f: Feeder) -> dict[int, IoLayout]:
    """Six P/Q inputs per load bus and per child head; |V| and angle per node-phase.

    Non-top clusters also output the six P/Q values flowing into their head
    node. Slots are ordered by feeder bus order, then phase, then P before Q
    (Vmag before Vang).
    """
    order = f.bus_order()
    load_buses = {ld.bus for ld in f.loads}
    out = {}
    for c in tree.clusters:
        keyed: list[tuple[int, list[Slot]]] = []
        for b in c.nodes:
            if b in load_buses:
                keyed.append((order[b], _six(b, LOAD_QUANTITIES)))
        for k in c.children:
            head = tree[k].head
            keyed.append((order[head], _six(head, FED_QUANTITIES)))
        inputs = [s for _, group in sorted(keyed, key=lambda t: t[0]) for s in group]
        outputs = [Slot(b, p, q) for b in c.nodes for p in f.bus(b).phases for q in VOLTAGE_QUANTITIES]
        if c.parent is not None:
            outputs += _six(c.head, HEAD_QUANTITIES)
        out[c.id] = IoLayout(c.id, tuple(inputs), tuple(outputs))
    return out


def check_layouts(tree: ClusterTree, layouts: dict[int, IoLayout]) -> list[str]:
    problems = []
    for c in tree.clusters:
        lay = layouts.get(c.id)
        if lay is None:
            problems.append(f"cluster {c.id} has no layout")
            continue
        fed_buses = {s.bus for s in lay.inputs if s.quantity in FED_QUANTITIES}
        if fed_buses != {tree[k].head for k in c.children}:
            problems.append(f"cluster {c.id}: fed slots do not match child heads")
        heads = lay.head_slots()
        if c.parent is None and heads:
            problems.append("top cluster must not output head powers")
        if c.parent is not None:
            if len(heads) != 6:
                problems.append(f"cluster {c.id}: expected 6 head outputs, found {len(heads)}")
            parent = layouts.get(c.parent)
            if parent is not None:
                mine = [(lay.outputs[k].phase, lay.outputs[k].quantity[0]) for k in heads]
                theirs = [(parent.inputs[k].phase, parent.inputs[k].quantity[0]) for k in parent.fed_slots(c.head)]
                if mine != theirs:
                    problems.append(f"cluster {c.id}: head outputs and parent fed inputs are not slot-aligned")
    return problems
