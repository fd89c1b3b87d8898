"""Deterministic simulator of a parallel external memory (PEM) machine.

P processors, each with a private internal memory of M elements, share an
unbounded external memory organised in blocks of B elements.  The only
charged operation is the parallel I/O step: within one step every
processor may input or output a single block.  Rearranging, combining or
dropping elements that reside in internal memory is free.

Block access follows CREW (concurrent read, exclusive write) by default;
EREW is available as a stricter policy.  Within one step all inputs see
the pre-step image of external memory, outputs are applied afterwards,
which makes every step atomic and the whole simulation deterministic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Sequence

CREW = "crew"
EREW = "erew"

# Inboxes (one message block per processor) live in a reserved address
# range so they can never collide with data regions.
INBOX_BASE = 1 << 40


class SimulationError(Exception):
    """A machine rule was violated by the running program."""


class ConfigurationError(SimulationError):
    pass


class PolicyViolation(SimulationError):
    pass


class CapacityViolation(SimulationError):
    pass


class ProvenanceViolation(SimulationError):
    pass


class MissingBlockError(SimulationError):
    """Input of an address that was never written (likely a program bug)."""


@dataclass(frozen=True)
class MachineConfig:
    """PEM parameters: processor count, internal memory and block size."""

    P: int
    M: int
    B: int
    policy: str = CREW

    def __post_init__(self) -> None:
        if self.P < 1:
            raise ConfigurationError(f"P must be >= 1, got {self.P}")
        if self.B < 1:
            raise ConfigurationError(f"B must be >= 1, got {self.B}")
        if self.M < 3 * self.B:
            raise ConfigurationError(f"M >= 3B required (M={self.M}, B={self.B})")
        if self.policy not in (CREW, EREW):
            raise ConfigurationError(f"unknown policy {self.policy!r}")


class Element:
    """Atomic simulated value; never split across blocks.

    ``key`` orders elements (shuffle workloads use (row, column)),
    ``payload`` is opaque to the machine.  Identity is the provenance
    tag used to check that outputs only move data a processor holds.
    """

    __slots__ = ("uid", "key", "payload")

    def __init__(self, uid: int, key: Any, payload: Any):
        self.uid = uid
        self.key = key
        self.payload = payload

    def __repr__(self) -> str:
        return f"Element({self.uid}, key={self.key!r})"


class Input:
    __slots__ = ("addr",)

    def __init__(self, addr: int):
        self.addr = addr


class Output:
    __slots__ = ("addr", "elements")

    def __init__(self, addr: int, elements: Iterable[Element]):
        self.addr = addr
        self.elements = tuple(elements)


class Idle:
    __slots__ = ()


IDLE = Idle()

Action = Input | Output | Idle | None


class IOTrace:
    """Per-step record of every processor's action.

    ``steps[t]`` is a P-tuple of records: ("I", addr, n), ("O", addr,
    elements) or None for idle.  Free operations (discard / compute)
    are kept in ``free_ops`` buckets keyed by the number of steps
    executed when they happened, so a trace can be replayed exactly.
    """

    __slots__ = ("P", "steps", "free_ops", "inputs", "outputs")

    def __init__(self, P: int):
        self.P = P
        self.steps: list[tuple] = []
        self.free_ops: dict[int, list[tuple]] = {}
        self.inputs = [0] * P
        self.outputs = [0] * P

    @property
    def parallel_io_count(self) -> int:
        return len(self.steps)

    def record_free(self, record: tuple) -> None:
        self.free_ops.setdefault(len(self.steps), []).append(record)

    def per_processor_counts(self) -> list[tuple[int, int]]:
        return list(zip(self.inputs, self.outputs))


@dataclass(frozen=True)
class Region:
    """A contiguous range of block addresses holding ``count`` elements.

    Elements are dense in block order: every block holds B elements
    except possibly the last one.
    """

    start: int
    blocks: int
    count: int

    def addr(self, idx: int) -> int:
        return self.start + idx

    def addrs(self) -> range:
        return range(self.start, self.start + self.blocks)


class Machine:
    """One PEM instance: external memory image, internal memories, trace.

    A machine is confined to a single thread; independent machines may
    run concurrently.
    """

    def __init__(self, config: MachineConfig,
                 initial_contents: Iterable[tuple[int, Iterable]] = ()):
        self.config = config
        self._uid = 0
        self._ext: dict[int, tuple[Element, ...]] = {}
        self._mem: list[set[Element]] = [set() for _ in range(config.P)]
        # Most recent block an element was written to (None once the
        # block got overwritten without it); feeds the togetherness
        # potential diagnostics.
        self._home: dict[Element, int | None] = {}
        self._next_addr = 0
        for addr, elems in initial_contents:
            if addr in self._ext:
                raise ConfigurationError(f"duplicate initial block {addr}")
            if addr < 0 or addr >= INBOX_BASE:
                raise ConfigurationError(f"initial address {addr} out of range")
            block = tuple(self._as_element(e) for e in elems)
            if len(block) > config.B:
                raise ConfigurationError(
                    f"initial block {addr} holds {len(block)} > B={config.B} elements")
            self._ext[addr] = block
            for e in block:
                self._home[e] = addr
            self._next_addr = max(self._next_addr, addr + 1)
        self.inboxes = [INBOX_BASE + p for p in range(config.P)]
        for a in self.inboxes:
            self._ext[a] = ()
        self.initial_image = dict(self._ext)
        self.trace = IOTrace(config.P)

    # -- construction helpers -------------------------------------------

    def _as_element(self, spec) -> Element:
        if isinstance(spec, Element):
            return spec
        key, payload = spec
        return self._new_element(key, payload)

    def _new_element(self, key, payload) -> Element:
        e = Element(self._uid, key, payload)
        self._uid += 1
        return e

    def inbox(self, p: int) -> int:
        return self.inboxes[p]

    def alloc(self, nblocks: int = 1) -> int:
        """Reserve a fresh contiguous address range (free bookkeeping)."""
        start = self._next_addr
        self._next_addr += nblocks
        if self._next_addr >= INBOX_BASE:
            raise ConfigurationError("address space exhausted")
        return start

    def alloc_region(self, count: int) -> Region:
        B = self.config.B
        nblocks = max(1, -(-count // B))
        return Region(self.alloc(nblocks), nblocks, count)

    # -- the one charged operation ---------------------------------------

    def parallel_step(self, actions: Sequence[Action]) -> list:
        """Execute one parallel I/O: at most one action per processor.

        Inputs read the pre-step external memory image; outputs are
        applied afterwards.  Returns the per-processor input contents
        (None for output/idle processors).
        """
        cfg = self.config
        if len(actions) != cfg.P:
            raise ConfigurationError(
                f"need exactly one action per processor ({cfg.P}), got {len(actions)}")
        acts: list[Input | Output | None] = []
        for a in actions:
            acts.append(None if a is None or isinstance(a, Idle) else a)
        if all(a is None for a in acts):
            raise PolicyViolation("all-idle parallel step is not allowed")

        in_addrs: list[int] = []
        out_addrs: list[int] = []
        for p, a in enumerate(acts):
            if isinstance(a, Input):
                if a.addr not in self._ext:
                    raise MissingBlockError(
                        f"processor {p}: input of absent block {a.addr}")
                in_addrs.append(a.addr)
            elif isinstance(a, Output):
                if len(a.elements) > cfg.B:
                    raise CapacityViolation(
                        f"processor {p}: output of {len(a.elements)} > B={cfg.B} elements")
                if len(set(a.elements)) != len(a.elements):
                    raise ProvenanceViolation(f"processor {p}: duplicate element in output")
                mem = self._mem[p]
                for e in a.elements:
                    if e not in mem:
                        raise ProvenanceViolation(
                            f"processor {p}: output of element not in internal memory")
                out_addrs.append(a.addr)
        if len(set(out_addrs)) != len(out_addrs):
            raise PolicyViolation("two outputs to the same block in one step")
        if cfg.policy == EREW:
            touched = in_addrs + out_addrs
            if len(set(touched)) != len(touched):
                raise PolicyViolation("EREW: concurrent access to one block")

        # Capacity must hold after the inputs land, before any free ops.
        for p, a in enumerate(acts):
            if isinstance(a, Input):
                mem = self._mem[p]
                grow = sum(1 for e in self._ext[a.addr] if e not in mem)
                if len(mem) + grow > cfg.M:
                    raise CapacityViolation(
                        f"processor {p}: internal memory would exceed M={cfg.M}")

        results: list = [None] * cfg.P
        records: list = [None] * cfg.P
        for p, a in enumerate(acts):
            if isinstance(a, Input):
                block = self._ext[a.addr]
                self._mem[p].update(block)
                results[p] = block
                records[p] = ("I", a.addr, len(block))
                self.trace.inputs[p] += 1
        for p, a in enumerate(acts):
            if isinstance(a, Output):
                old = self._ext.get(a.addr, ())
                if old:
                    fresh = set(a.elements)
                    for e in old:
                        if e not in fresh and self._home.get(e) == a.addr:
                            self._home[e] = None
                self._ext[a.addr] = a.elements
                for e in a.elements:
                    self._home[e] = a.addr
                records[p] = ("O", a.addr, a.elements)
                self.trace.outputs[p] += 1
        self.trace.steps.append(tuple(records))
        return results

    # -- free operations --------------------------------------------------

    def discard(self, p: int, elements: Iterable[Element]) -> None:
        """Drop elements from a processor's internal memory (no I/O)."""
        elems = tuple(elements)
        mem = self._mem[p]
        for e in elems:
            if e not in mem:
                raise ProvenanceViolation(
                    f"processor {p}: discard of element not in internal memory")
        for e in elems:
            mem.discard(e)
        if elems:
            self.trace.record_free(("D", p, elems))

    def create(self, p: int, key, payload) -> Element:
        """Materialise one computation result in a processor's memory."""
        mem = self._mem[p]
        if len(mem) + 1 > self.config.M:
            raise CapacityViolation(f"processor {p}: internal memory full")
        e = self._new_element(key, payload)
        mem.add(e)
        self.trace.record_free(("C", p, (), (e,)))
        return e

    def compute(self, p: int, transform: Callable[[list[Element]], Iterable]) -> list[Element]:
        """Replace a processor's internal memory by a computed result.

        ``transform`` receives the held elements (ordered by creation)
        and returns a sequence mixing held elements with (key, payload)
        pairs for newly computed ones.  Zero I/Os are charged.
        """
        held = sorted(self._mem[p], key=lambda e: e.uid)
        held_set = self._mem[p]
        out: list[Element] = []
        produced: list[Element] = []
        for item in transform(held):
            if isinstance(item, Element):
                if item not in held_set:
                    raise ProvenanceViolation(
                        f"processor {p}: compute returned foreign element")
                out.append(item)
            else:
                key, payload = item
                e = self._new_element(key, payload)
                out.append(e)
                produced.append(e)
        if len(out) != len(set(out)):
            raise ProvenanceViolation(f"processor {p}: duplicate element in compute result")
        if len(out) > self.config.M:
            raise CapacityViolation(
                f"processor {p}: compute result exceeds M={self.config.M}")
        new_mem = set(out)
        consumed = tuple(e for e in held if e not in new_mem)
        self._mem[p] = new_mem
        self.trace.record_free(("C", p, consumed, tuple(produced)))
        return out

    # -- zero-cost inspection ---------------------------------------------

    @property
    def io_count(self) -> int:
        return len(self.trace.steps)

    def peek(self, addr: int) -> tuple[Element, ...]:
        return self._ext.get(addr, ())

    def holds(self, p: int, e: Element) -> bool:
        return e in self._mem[p]

    def held_count(self, p: int) -> int:
        return len(self._mem[p])

    def held_sorted(self, p: int) -> list[Element]:
        return sorted(self._mem[p], key=lambda e: e.uid)

    def home_of(self, e: Element) -> int | None:
        return self._home.get(e)

    def region_elements(self, region: Region) -> list[Element]:
        out: list[Element] = []
        for a in region.addrs():
            out.extend(self._ext.get(a, ()))
        return out

    def external_image(self) -> dict[int, tuple[Element, ...]]:
        return dict(self._ext)

    def assert_memories_empty(self) -> None:
        for p, mem in enumerate(self._mem):
            if mem:
                raise SimulationError(f"processor {p} still holds {len(mem)} elements")


def create_machine(config: MachineConfig,
                   initial_contents: Iterable[tuple[int, Iterable]] = ()) -> Machine:
    """Build a machine with the given external memory image."""
    return Machine(config, initial_contents)


def run_lockstep(machine: Machine, scripts: Sequence) -> None:
    """Advance per-processor action generators one step at a time.

    Each script is a generator yielding Input/Output/Idle/None; the
    value sent back is that processor's input content (None otherwise).
    Scripts run in lockstep until all are exhausted.  A step in which
    every live script yields idle is a deadlock and raises.
    """
    live = {p: g for p, g in enumerate(scripts) if g is not None}
    inbound: dict[int, Any] = {p: None for p in live}
    primed: set[int] = set()
    P = machine.config.P
    while live:
        actions: list[Action] = [IDLE] * P
        any_work = False
        for p in sorted(live):
            g = live[p]
            try:
                a = g.send(inbound[p]) if p in primed else next(g)
                primed.add(p)
            except StopIteration:
                del live[p]
                continue
            if a is not None and not isinstance(a, Idle):
                actions[p] = a
                any_work = True
        if not live:
            break
        if not any_work:
            raise SimulationError("lockstep deadlock: all live scripts idle")
        results = machine.parallel_step(actions)
        inbound = {p: results[p] for p in live}


# -- BSP* correspondence ---------------------------------------------------


def bsp_star_cost(trace: IOTrace, g: float, L: float) -> float:
    """Cost of the trace read as a 1-relation blockwise BSP program.

    Every parallel I/O becomes one super-step carrying h=1 messages of
    length s=B, priced g*h*ceil(s/B) + L = g + L.
    """
    return trace.parallel_io_count * (g + L)


def bsp_star_replay(machine: Machine,
                    supersteps: Sequence[Sequence[tuple[int, int, Sequence]]]) -> int:
    """Replay a 1-relation BSP exchange: two parallel I/Os per super-step.

    Each super-step is a list of (src, dst, payloads) messages where
    every processor sends at most one message of at most B elements and
    receives at most one.  Per super-step the senders output their
    message blocks, then the receivers input them, so a program of
    ``len(supersteps)`` super-steps costs exactly twice that many
    parallel I/Os.  Returns the number of I/Os consumed.
    """
    before = machine.io_count
    B = machine.config.B
    for step_no, msgs in enumerate(supersteps):
        if not msgs:
            raise SimulationError(f"super-step {step_no} carries no messages")
        srcs = [m[0] for m in msgs]
        dsts = [m[1] for m in msgs]
        if len(set(srcs)) != len(srcs) or len(set(dsts)) != len(dsts):
            raise SimulationError(f"super-step {step_no} violates the 1-relation")
        P = machine.config.P
        out_actions: list[Action] = [IDLE] * P
        in_actions: list[Action] = [IDLE] * P
        sent: dict[int, list[Element]] = {}
        for src, dst, payloads in msgs:
            if len(payloads) > B:
                raise SimulationError(f"message longer than B={B}")
            elems = [machine.create(src, ("msg", step_no, src, dst), v) for v in payloads]
            sent[src] = elems
            out_actions[src] = Output(machine.inbox(dst), elems)
        machine.parallel_step(out_actions)
        for src, dst, _ in msgs:
            in_actions[dst] = Input(machine.inbox(dst))
        results = machine.parallel_step(in_actions)
        for src, dst, _ in msgs:
            machine.discard(src, sent[src])
            machine.discard(dst, results[dst])
    return machine.io_count - before


def write_trace_csv(trace: IOTrace, fileobj) -> None:
    """Dump a trace as CSV: step, processor, action, address, elements_moved."""
    writer = csv.writer(fileobj, lineterminator="\n")
    writer.writerow(["step", "processor", "action", "address", "elements_moved"])
    for t, records in enumerate(trace.steps):
        for p, rec in enumerate(records):
            if rec is None:
                writer.writerow([t, p, "idle", "", 0])
            elif rec[0] == "I":
                writer.writerow([t, p, "input", rec[1], rec[2]])
            else:
                writer.writerow([t, p, "output", rec[1], len(rec[2])])
