"""Reusable communication primitives built from machine action scripts.

Gather, scatter and prefix sums communicate through per-processor inbox
blocks in a binary tree pattern, so they stay within a logarithmic
parallel I/O budget and remain exclusive-write safe.  Load balancing
and contraction are the scan-based helpers the shuffle algorithms lean
on for assigning work and compacting sparse regions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

from .machine import (
    IDLE,
    Action,
    Element,
    Idle,
    Input,
    Machine,
    Output,
    Region,
    SimulationError,
    run_lockstep,
)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


# -- gather / scatter -------------------------------------------------------


def gather(machine: Machine, participants: Sequence[int],
           contributions: dict[int, Sequence[Element]],
           combine: Callable | None = None,
           out_addr: int | None = None) -> int:
    """Collect the participants' held elements into one external block.

    Pairs of contributors merge left-to-right over inboxes, so the I/O
    count is logarithmic in the number of non-empty contributors (at
    most min(P, B) of them when contributions are plain elements).
    With ``combine``, partner batches are replaced by
    ``combine(left, right) -> [(key, payload), ...]`` so intermediate
    results stay small and all P participants may take part.

    Returns the address of the written block.
    """
    B = machine.config.B
    P = machine.config.P
    active = [[p, list(contributions[p])] for p in participants
              if contributions.get(p)]
    if combine is None:
        total = sum(len(c) for _, c in active)
        if total > B:
            raise SimulationError(f"gather of {total} > B={B} elements")
    if out_addr is None:
        out_addr = machine.alloc(1)
    if not active:
        owner = participants[0]
        step: list[Action] = [IDLE] * P
        step[owner] = Output(out_addr, ())
        machine.parallel_step(step)
        return out_addr
    while len(active) > 1:
        pairs = []
        nxt = []
        for idx in range(0, len(active) - 1, 2):
            pairs.append((active[idx], active[idx + 1]))
            nxt.append(active[idx])
        if len(active) % 2:
            nxt.append(active[-1])
        out_step: list[Action] = [IDLE] * P
        for left, right in pairs:
            out_step[right[0]] = Output(machine.inbox(left[0]), right[1])
        machine.parallel_step(out_step)
        in_step: list[Action] = [IDLE] * P
        for left, _ in pairs:
            in_step[left[0]] = Input(machine.inbox(left[0]))
        results = machine.parallel_step(in_step)
        for left, right in pairs:
            lp, lelems = left
            rp, relems = right
            received = list(results[lp])
            machine.discard(rp, relems)
            if combine is None:
                left[1] = lelems + received
            else:
                merged = [machine.create(lp, key, payload)
                          for key, payload in combine(lelems, received)]
                machine.discard(lp, lelems + received)
                left[1] = merged
        active = nxt
    owner, elems = active[0]
    if len(elems) > B:
        raise SimulationError(f"gather result of {len(elems)} > B={B} elements")
    step = [IDLE] * P
    step[owner] = Output(out_addr, elems)
    machine.parallel_step(step)
    machine.discard(owner, elems)
    return out_addr


def scatter(machine: Machine, source: int, targets: Sequence[int],
            tree: bool | None = None) -> dict[int, tuple[Element, ...]]:
    """Spread one block to every target processor.

    Under CREW a single concurrent read suffices; the binary inbox tree
    (one write per target inbox, mirroring the key-range distribution
    pattern) keeps the operation EREW safe in O(log P) I/Os.  Targets
    are left holding their copies; the caller discards as needed.
    """
    if not machine.peek(source):
        raise SimulationError(f"scatter of empty or absent block {source}")
    if tree is None:
        tree = machine.config.policy != "crew"
    P = machine.config.P
    got: dict[int, tuple[Element, ...]] = {}
    if not tree:
        step: list[Action] = [IDLE] * P
        for t in targets:
            step[t] = Input(source)
        results = machine.parallel_step(step)
        for t in targets:
            got[t] = results[t]
        return got

    first = targets[0]
    step = [IDLE] * P
    step[first] = Input(source)
    results = machine.parallel_step(step)
    got[first] = results[first]
    holders = [first]
    remaining = list(targets[1:])
    while remaining:
        batch = remaining[: len(holders)]
        remaining = remaining[len(holders):]
        out_step: list[Action] = [IDLE] * P
        for h, t in zip(holders, batch):
            out_step[h] = Output(machine.inbox(t), got[h])
        machine.parallel_step(out_step)
        in_step: list[Action] = [IDLE] * P
        for t in batch:
            in_step[t] = Input(machine.inbox(t))
        results = machine.parallel_step(in_step)
        for t in batch:
            got[t] = results[t]
        holders.extend(batch)
    return got


# -- prefix sums ------------------------------------------------------------


def prefix_sum(machine: Machine, values: Sequence, op: Callable) -> list:
    """Inclusive parallel scan: processor i ends up with v_0 (+) ... (+) v_i.

    Doubling-stride scan over inboxes, 2*ceil(log2 P) parallel I/Os.
    """
    P = machine.config.P
    if len(values) != P:
        raise SimulationError(f"need one value per processor ({P})")
    acc = [machine.create(p, ("scan", p), values[p]) for p in range(P)]
    shift = 1
    while shift < P:
        out_step: list[Action] = [IDLE] * P
        for p in range(P - shift):
            out_step[p] = Output(machine.inbox(p + shift), (acc[p],))
        machine.parallel_step(out_step)
        in_step: list[Action] = [IDLE] * P
        for q in range(shift, P):
            in_step[q] = Input(machine.inbox(q))
        results = machine.parallel_step(in_step)
        for q in range(shift, P):
            incoming = results[q][0]
            merged = machine.create(q, ("scan", q), op(incoming.payload, acc[q].payload))
            machine.discard(q, (incoming, acc[q]))
            acc[q] = merged
        shift *= 2
    out = [acc[p].payload for p in range(P)]
    for p in range(P):
        machine.discard(p, (acc[p],))
    return out


# -- range-bounded load balancing -------------------------------------------


@dataclass(frozen=True)
class Span:
    """One processor's contiguous piece of a region, in element terms."""

    proc: int
    start: int
    count: int
    key_lo: int
    key_hi: int

    @property
    def end(self) -> int:
        return self.start + self.count

    def block_range(self, region_start: int, B: int) -> tuple[int, int]:
        if self.count == 0:
            return (0, 0)
        first = region_start + self.start // B
        last = region_start + (self.end - 1) // B
        return (first, last - first + 1)


@dataclass(frozen=True)
class Assignment:
    """Per-processor spans partitioning a key-sorted region.

    Every span holds at most ceil(2n/P) tuples and covers at most
    ceil(2m/P) consecutive keys.
    """

    spans: tuple[Span, ...]
    n: int
    m: int

    def span_of(self, p: int) -> Span:
        return self.spans[p]


def range_bounded_load_balance(machine: Machine, region: Region, n: int, m: int,
                               key_of: Callable[[Element], int]) -> Assignment:
    """Split a key-sorted region into per-processor spans.

    ``key_of`` must map elements to integers in 1..m, non-decreasing
    over the region.  Half the processors scan volume pieces of
    ceil(2n/P) tuples recording where key ranges of width ceil(2m/P)
    begin; the recorded start positions are distributed to the range
    processors through their inboxes.  Cutting at both kinds of
    boundary yields at most P spans bounded in volume and key width.
    """
    P = machine.config.P
    B = machine.config.B
    if m > n:
        raise SimulationError(f"more keys ({m}) than tuples ({n})")
    if n < P * B:
        raise SimulationError(f"load balancing needs n/P >= B (n={n}, P={P}, B={B})")
    elems = machine.region_elements(region)
    if len(elems) != n:
        raise SimulationError(f"region holds {len(elems)} elements, expected {n}")
    keys = [key_of(e) for e in elems]
    for a, b in zip(keys, keys[1:]):
        if a > b:
            raise SimulationError("load balancing requires key-sorted input")
    if P == 1:
        return Assignment((Span(0, 0, n, keys[0], keys[-1]),), n, m)

    volume_procs = _ceil_div(P, 2)
    piece = _ceil_div(n, volume_procs)
    width = _ceil_div(2 * m, P)

    scratch = [machine.alloc(_ceil_div(_ceil_div(m, width) + 1, B))
               for _ in range(volume_procs)]
    boundary_lists: list[list[tuple[int, int]]] = [[] for _ in range(volume_procs)]

    def scan_script(vp: int):
        lo = vp * piece
        hi = min(n, lo + piece)
        if lo >= hi:
            return
        first_blk = lo // B
        last_blk = (hi - 1) // B
        pos = first_blk * B
        prev_range = (keys[lo - 1] - 1) // width if lo > 0 else -1
        buffer: list[Element] = []
        out_blk = 0
        for bi in range(first_blk, last_blk + 1):
            block = yield Input(region.addr(bi))
            for e in block:
                if lo <= pos < hi:
                    r = (key_of(e) - 1) // width
                    if r != prev_range:
                        boundary_lists[vp].append((r, pos))
                        buffer.append(machine.create(vp, ("range-start", r), (r, pos)))
                        prev_range = r
                        if len(buffer) == B:
                            yield Output(scratch[vp] + out_blk, buffer)
                            machine.discard(vp, buffer)
                            out_blk += 1
                            buffer = []
                pos += 1
            machine.discard(vp, [e for e in block if machine.holds(vp, e)])
        if buffer:
            yield Output(scratch[vp] + out_blk, buffer)
            machine.discard(vp, buffer)

    run_lockstep(machine, [scan_script(vp) if vp < volume_procs else None
                           for vp in range(P)])

    # Distribution: each range processor fetches the scratch block that
    # carries its key-range start; under CREW this is one parallel read.
    range_starts: dict[int, int] = {}
    entry_home: dict[int, int] = {}
    for vp in range(volume_procs):
        for idx, (r, pos) in enumerate(boundary_lists[vp]):
            range_starts.setdefault(r, pos)
            entry_home.setdefault(r, scratch[vp] + idx // B)
    in_step: list[Action] = [IDLE] * P
    fetched = []
    for idx, rp in enumerate(range(volume_procs, P)):
        r = idx + 1
        if r in entry_home:
            in_step[rp] = Input(entry_home[r])
            fetched.append(rp)
    if fetched:
        results = machine.parallel_step(in_step)
        for rp in fetched:
            machine.discard(rp, results[rp])

    cuts = {0}
    for vp in range(volume_procs):
        if vp * piece < n:
            cuts.add(vp * piece)
    cuts.update(range_starts.values())
    ordered = sorted(cuts)
    spans: list[tuple[int, int]] = []
    for i, start in enumerate(ordered):
        end = ordered[i + 1] if i + 1 < len(ordered) else n
        if end > start:
            spans.append((start, end))
    if len(spans) > P:
        raise SimulationError(f"load balancing produced {len(spans)} > P spans")
    full = []
    for p in range(P):
        if p < len(spans):
            s, e = spans[p]
            full.append(Span(p, s, e - s, keys[s], keys[e - 1]))
        else:
            full.append(Span(p, n, 0, 0, -1))
    return Assignment(tuple(full), n, m)


# -- contraction ------------------------------------------------------------


def contract(machine: Machine, region: Region) -> Region:
    """Remove empty cells: pack the region's elements densely, in order.

    Processors take contiguous pieces of the input blocks in ascending
    order, count their elements, learn their output offsets through a
    prefix sum, and stream their cells to the packed output.  An output
    block fed by several processors is finalised by the lowest-indexed
    contributor; the others hand their cells over through its inbox, so
    each processor joins at most two hand-offs.
    """
    P = machine.config.P
    B = machine.config.B
    mblocks = region.blocks
    piece = _ceil_div(mblocks, P) if mblocks else 1

    counts = [0] * P

    def count_script(p: int):
        lo = p * piece
        hi = min(mblocks, lo + piece)
        for bi in range(lo, hi):
            block = yield Input(region.addr(bi))
            counts[p] += len(block)
            machine.discard(p, [e for e in block if machine.holds(p, e)])

    run_lockstep(machine, [count_script(p) if p * piece < mblocks else None
                           for p in range(P)])

    if P > 1:
        ends = prefix_sum(machine, counts, lambda a, b: a + b)
    else:
        ends = [counts[0]]
    starts = [e - c for e, c in zip(ends, counts)]
    total = ends[-1] if ends else 0
    out = machine.alloc_region(total)
    if total == 0:
        return Region(out.start, 0, 0)

    nblocks_out = _ceil_div(total, B)
    owner_of = {}
    for b in range(nblocks_out):
        pos = b * B
        for p in range(P):
            if counts[p] and starts[p] <= pos < ends[p]:
                owner_of[b] = p
                break

    def block_span(b: int) -> tuple[int, int]:
        return b * B, min((b + 1) * B, total)

    pieces: dict[int, dict[int, list[Element]]] = {}

    def stream_script(p: int):
        lo_blk = p * piece
        hi_blk = min(mblocks, lo_blk + piece)
        pos = starts[p]
        outbuf: list[Element] = []
        for bi in range(lo_blk, hi_blk):
            block = yield Input(region.addr(bi))
            pending = list(block)
            while pending:
                blk = pos // B
                blk_lo, blk_hi = block_span(blk)
                take = min(blk_hi - pos, len(pending))
                outbuf.extend(pending[:take])
                pending = pending[take:]
                pos += take
                if pos == blk_hi:
                    if owner_of[blk] == p and starts[p] <= blk_lo:
                        yield Output(out.addr(blk), outbuf)
                        machine.discard(p, outbuf)
                    else:
                        pieces.setdefault(blk, {})[p] = outbuf
                    outbuf = []
        if outbuf:
            # range ends mid-block: hand the cells over to the block owner
            pieces.setdefault((pos - 1) // B, {})[p] = outbuf

    run_lockstep(machine, [stream_script(p) if counts[p] else None
                           for p in range(P)])

    # Hand-off rounds: rank r senders of every shared block write their
    # cells to the owner's inbox, the owners read and keep them.
    shared = sorted(pieces)
    senders_of = {blk: [q for q in sorted(pieces[blk]) if q != owner_of[blk]]
                  for blk in shared}
    collected = {blk: {owner_of[blk]: pieces[blk].get(owner_of[blk], [])}
                 for blk in shared}
    max_rank = max((len(s) for s in senders_of.values()), default=0)
    for rank in range(max_rank):
        expecting = []
        out_step: list[Action] = [IDLE] * P
        for blk in shared:
            if rank < len(senders_of[blk]):
                q = senders_of[blk][rank]
                out_step[q] = Output(machine.inbox(owner_of[blk]), pieces[blk][q])
                expecting.append((blk, q))
        machine.parallel_step(out_step)
        in_step: list[Action] = [IDLE] * P
        for blk, _ in expecting:
            in_step[owner_of[blk]] = Input(machine.inbox(owner_of[blk]))
        results = machine.parallel_step(in_step)
        for blk, q in expecting:
            owner = owner_of[blk]
            collected[blk][q] = list(results[owner])
            machine.discard(q, pieces[blk][q])

    remaining = list(shared)
    while remaining:
        out_step = [IDLE] * P
        wrote = []
        for blk in remaining:
            owner = owner_of[blk]
            if isinstance(out_step[owner], Idle):
                cells: list[Element] = []
                for q in sorted(collected[blk]):
                    cells.extend(collected[blk][q])
                out_step[owner] = Output(out.addr(blk), cells)
                wrote.append((blk, cells, owner))
        machine.parallel_step(out_step)
        for blk, cells, owner in wrote:
            machine.discard(owner, cells)
            remaining.remove(blk)
    return out
