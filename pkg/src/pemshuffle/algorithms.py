"""Shuffle-step algorithms as action scripts on the PEM machine.

The map-dependent half turns an instance into R meta-runs, each sorted
by (row, column); the reduce-dependent half either rearranges tiles
into a fully row-major region or reduces rows on the fly.  Merging
always combines *adjacent* runs, so every meta-run covers a contiguous
piece of the original column order; that makes tile concatenation in
(row, run) order come out globally (row, column) sorted, which the
sequential oracles require bit-exactly.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Callable, Sequence

from .machine import (
    IDLE,
    Action,
    Element,
    Input,
    Machine,
    MachineConfig,
    Output,
    Region,
    SimulationError,
    create_machine,
    run_lockstep,
)
from .primitives import contract, prefix_sum, range_bounded_load_balance
from .workload import (
    COLUMN_MAJOR,
    MIXED_COLUMN,
    ROW_MAJOR,
    MapTask,
    ShuffleInstance,
    instance_blocks,
)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _key(e: Element):
    return e.key


# -- run bookkeeping ---------------------------------------------------------


@dataclass(frozen=True)
class Run:
    """A sorted slice of a dense region: elements [lo, hi) in block order."""

    region: Region
    lo: int
    hi: int

    @property
    def count(self) -> int:
        return self.hi - self.lo


@dataclass(frozen=True)
class MetaRunSet:
    """R-or-fewer sorted runs jointly holding the instance's triples."""

    R: int
    runs: tuple[Run, ...]
    rounds: int = 0

    @property
    def count(self) -> int:
        return sum(r.count for r in self.runs)


def merge_degree(H: int, P: int, B: int, M: int) -> int:
    """Merge fan-in: ceil(max(2, min(H/(PB), sqrt(H/P), M/B)))."""
    return math.ceil(max(2.0, min(H / (P * B), math.sqrt(H / P), M / B)))


def nonparallel_run_target(H: int, N_R: int, B: int) -> int:
    return max(1, _ceil_div(H, N_R * B))


def parallel_run_target(H: int, N_R: int, w: int, B: int) -> int:
    return max(1, _ceil_div(H, N_R * max(w, B)))


def _effective_fanin(config: MachineConfig, d: int | None = None) -> int:
    # One buffer block per input run plus the output buffer must fit in M.
    cap = max(2, config.M // config.B - 1)
    return cap if d is None else max(2, min(d, cap))


def run_elements(machine: Machine, run: Run) -> list[Element]:
    """God view of a run's elements in order (no I/O charged)."""
    B = machine.config.B
    if run.count == 0:
        return []
    out: list[Element] = []
    first = run.lo // B
    last = (run.hi - 1) // B
    for bi in range(first, last + 1):
        base = bi * B
        for off, e in enumerate(machine.peek(run.region.addr(bi))):
            if run.lo <= base + off < run.hi:
                out.append(e)
    return out


def _check_sorted(machine: Machine, run: Run) -> None:
    elems = run_elements(machine, run)
    for a, b in zip(elems, elems[1:]):
        if a.key > b.key:
            raise SimulationError("input run is not sorted")


def _require_block_parallelism(H: int, config: MachineConfig) -> None:
    if H < config.P * config.B:
        raise SimulationError(
            f"H/P >= B required (H={H}, P={config.P}, B={config.B})")


# -- generic k-way merging ---------------------------------------------------


def _merge_task(machine: Machine, p: int, srcs: Sequence[tuple[Region, int, int]],
                out_addrs: Sequence[int], out_count: int,
                combine: Callable | None = None):
    """Generator merging source intervals into the given output blocks.

    Keeps one buffer block per source plus one output buffer, so peak
    memory stays within (fan-in + 1) blocks.  With ``combine``, equal
    keys are folded left-to-right in source order as they are emitted.
    """
    B = machine.config.B
    k = len(srcs)
    buffers: list[list[Element]] = [[] for _ in range(k)]
    heads = [0] * k
    cursors = [lo for _, lo, _ in srcs]
    owned: set[Element] = set()
    outbuf: list[Element] = []
    out_w = 0
    written = 0

    while True:
        for s in range(k):
            region, _, hi = srcs[s]
            if heads[s] >= len(buffers[s]) and cursors[s] < hi:
                blk_idx = cursors[s] // B
                block = yield Input(region.addr(blk_idx))
                base = blk_idx * B
                keep = [e for off, e in enumerate(block)
                        if cursors[s] <= base + off < hi]
                buffers[s] = keep
                heads[s] = 0
                owned.update(keep)
                cursors[s] = min(hi, base + len(block))
                drop = [e for e in block if e not in owned]
                if drop:
                    machine.discard(p, drop)
        live = [s for s in range(k) if heads[s] < len(buffers[s])]
        if not live:
            break
        s = min(live, key=lambda s: (buffers[s][heads[s]].key, s))
        e = buffers[s][heads[s]]
        heads[s] += 1
        if combine is not None and outbuf and outbuf[-1].key == e.key:
            tail = outbuf[-1]
            value = combine(tail.payload, e.payload)
            owned.discard(tail)
            owned.discard(e)
            machine.discard(p, (tail, e))
            merged = machine.create(p, e.key, value)
            outbuf[-1] = merged
            owned.add(merged)
            continue
        if len(outbuf) == B:
            yield Output(out_addrs[out_w], outbuf)
            machine.discard(p, outbuf)
            owned.difference_update(outbuf)
            out_w += 1
            written += B
            outbuf = []
        outbuf.append(e)
    if outbuf:
        yield Output(out_addrs[out_w], outbuf)
        machine.discard(p, outbuf)
        owned.difference_update(outbuf)
        written += len(outbuf)
    if written != out_count:
        raise SimulationError(f"merge wrote {written} elements, expected {out_count}")


def _merge_profile(machine: Machine, runs: Sequence[Run],
                   combined: bool) -> list[tuple[int, ...]]:
    """Merged consumption order of a run group (free plan knowledge).

    Entry t lists the source run indices folded into output position t;
    without combining every entry is a single source.
    """
    streams = [run_elements(machine, r) for r in runs]

    def tagged(stream, s):
        for e in stream:
            yield (e.key, s)

    merged = heapq.merge(*(tagged(stream, s)
                           for s, stream in enumerate(streams)))
    if not combined:
        return [(s,) for _, s in merged]
    order: list[tuple[int, ...]] = []
    cur_key = None
    cur: list[int] = []
    for key, s in merged:
        if key != cur_key:
            if cur:
                order.append(tuple(cur))
            cur_key = key
            cur = [s]
        else:
            cur.append(s)
    if cur:
        order.append(tuple(cur))
    return order


def _merge_groups_parallel(machine: Machine, groups: Sequence[Sequence[Run]],
                           combine: Callable | None = None) -> list[Run]:
    """Merge every group of runs at once, all processors cooperating.

    Each group's output is split into block-aligned pieces so writes
    never collide; source boundary blocks may be read by two processors
    (a concurrent read).  Split points and the matching source
    intervals are plan knowledge, charged zero I/Os.
    """
    P = machine.config.P
    B = machine.config.B
    profiles = [_merge_profile(machine, g, combine is not None) for g in groups]
    out_counts = [len(pr) for pr in profiles]
    regions = [machine.alloc_region(c) for c in out_counts]

    total_blocks = sum(_ceil_div(c, B) for c in out_counts if c)
    share = _ceil_div(total_blocks, P) if total_blocks else 1
    tasks_by_proc: list[list[tuple[int, int, int]]] = [[] for _ in range(P)]
    flat = 0
    for gi, c in enumerate(out_counts):
        nb = _ceil_div(c, B)
        bi = 0
        while bi < nb:
            proc = flat // share
            take = min((proc + 1) * share - flat, nb - bi)
            tasks_by_proc[proc].append((gi, bi, bi + take))
            bi += take
            flat += take

    # Per-group source-consumption snapshots at every needed cut position.
    cut_positions: dict[int, set[int]] = {gi: set() for gi in range(len(groups))}
    for tasks in tasks_by_proc:
        for gi, blo, bhi in tasks:
            cut_positions[gi].add(min(blo * B, out_counts[gi]))
            cut_positions[gi].add(min(bhi * B, out_counts[gi]))
    snapshots: dict[int, dict[int, list[int]]] = {}
    for gi, prof in enumerate(profiles):
        wanted = sorted(cut_positions[gi])
        counts = [0] * len(groups[gi])
        snap: dict[int, list[int]] = {}
        nxt = 0
        for pos in range(len(prof) + 1):
            while nxt < len(wanted) and wanted[nxt] == pos:
                snap[pos] = list(counts)
                nxt += 1
            if pos < len(prof):
                for s in prof[pos]:
                    counts[s] += 1
        snapshots[gi] = snap

    def script(p: int):
        for gi, blo, bhi in tasks_by_proc[p]:
            grp = groups[gi]
            lo = min(blo * B, out_counts[gi])
            hi = min(bhi * B, out_counts[gi])
            if lo >= hi:
                continue
            at_lo = snapshots[gi][lo]
            at_hi = snapshots[gi][hi]
            srcs = [(r.region, r.lo + at_lo[s], r.lo + at_hi[s])
                    for s, r in enumerate(grp) if at_hi[s] > at_lo[s]]
            addrs = [regions[gi].addr(b) for b in range(blo, bhi)]
            yield from _merge_task(machine, p, srcs, addrs, hi - lo, combine)

    run_lockstep(machine, [script(p) if tasks_by_proc[p] else None
                           for p in range(P)])
    return [Run(regions[gi], 0, out_counts[gi]) for gi in range(len(groups))]


def parallel_merge_to_R(machine: Machine, runs: Sequence[Run], R: int,
                        d: int | None = None, combine: Callable | None = None,
                        validate: bool = True) -> MetaRunSet:
    """Merge sorted runs until at most max(R, 1) remain.

    Rounds merge groups of up to d adjacent runs; with runs_in <= R the
    input passes through untouched (zero I/Os).
    """
    R = max(1, R)
    runs = [r for r in runs if r.count > 0]
    if validate:
        for r in runs:
            _check_sorted(machine, r)
    fanin = _effective_fanin(machine.config, d)
    rounds = 0
    while len(runs) > R:
        n_groups = max(R, _ceil_div(len(runs), fanin))
        bounds = [(i * len(runs)) // n_groups for i in range(n_groups + 1)]
        groups = [runs[bounds[i]:bounds[i + 1]] for i in range(n_groups)
                  if bounds[i + 1] > bounds[i]]
        to_merge = [g for g in groups if len(g) > 1]
        merged = _merge_groups_parallel(machine, to_merge, combine)
        nxt: list[Run] = []
        mi = 0
        for g in groups:
            if len(g) == 1:
                nxt.append(g[0])
            else:
                nxt.append(merged[mi])
                mi += 1
        runs = nxt
        rounds += 1
    return MetaRunSet(R, tuple(runs), rounds)


# -- local (single-processor) sorting ----------------------------------------


def _local_merge_runs(machine: Machine, p: int, runs: list[Run], target: int,
                      fanin: int, sink: list[Run]):
    """Merge adjacent presorted runs down to at most ``target``."""
    while len(runs) > target:
        nxt: list[Run] = []
        for g in range(0, len(runs), fanin):
            batch = runs[g:g + fanin]
            if len(batch) == 1:
                nxt.append(batch[0])
                continue
            count = sum(r.count for r in batch)
            out = machine.alloc_region(count)
            srcs = [(r.region, r.lo, r.hi) for r in batch]
            yield from _merge_task(machine, p, srcs, list(out.addrs()), count)
            nxt.append(Run(out, 0, count))
        runs = nxt
    sink.extend(runs)


def _formation_and_local_merge(machine: Machine, region: Region, blk_lo: int,
                               blk_hi: int, p: int, target: int,
                               fanin: int, sink: list[Run]):
    """Sort batches of up to M elements in memory, write each back as a
    presorted run, then locally merge down to ``target`` runs."""
    B = machine.config.B
    batch_cap = machine.config.M // B
    runs: list[Run] = []
    bi = blk_lo
    while bi < blk_hi:
        hi = min(blk_hi, bi + batch_cap)
        elems: list[Element] = []
        for b in range(bi, hi):
            block = yield Input(region.addr(b))
            elems.extend(block)
        elems.sort(key=_key)
        out = machine.alloc_region(len(elems))
        for wi, ofs in enumerate(range(0, len(elems), B)):
            chunk = elems[ofs:ofs + B]
            yield Output(out.addr(wi), chunk)
            machine.discard(p, chunk)
        runs.append(Run(out, 0, len(elems)))
        bi = hi
    yield from _local_merge_runs(machine, p, runs, target, fanin, sink)


def _sort_to_runs(machine: Machine, region: Region, H: int, R: int,
                  d: int | None) -> MetaRunSet:
    """Form presorted runs locally, then merge in parallel down to R."""
    cfg = machine.config
    _require_block_parallelism(H, cfg)
    R = max(1, R)
    fanin = _effective_fanin(cfg, d)
    target_local = max(1, R // cfg.P)
    share = _ceil_div(region.blocks, cfg.P)
    sinks: list[list[Run]] = [[] for _ in range(cfg.P)]
    scripts = []
    for p in range(cfg.P):
        lo, hi = p * share, min(region.blocks, (p + 1) * share)
        scripts.append(_formation_and_local_merge(
            machine, region, lo, hi, p, target_local, fanin, sinks[p])
            if lo < hi else None)
    run_lockstep(machine, scripts)
    all_runs: list[Run] = [r for sink in sinks for r in sink]
    if len(all_runs) > R:
        meta = parallel_merge_to_R(machine, all_runs, R, d, validate=False)
        return MetaRunSet(R, meta.runs, meta.rounds)
    return MetaRunSet(R, tuple(all_runs), 0)


# -- map-dependent preparation -----------------------------------------------


def prepare_unordered_map(machine: Machine, region: Region,
                          instance: ShuffleInstance,
                          R: int | None = None) -> MetaRunSet:
    """Meta-runs from a mixed column layout via parallel merge sort."""
    if instance.layout_kind() != MIXED_COLUMN:
        raise SimulationError(
            f"unordered-map preparation needs mixed column layout, got {instance.layout}")
    cfg = machine.config
    if R is None:
        R = nonparallel_run_target(instance.H, instance.N_R, cfg.B)
    d = merge_degree(instance.H, cfg.P, cfg.B, cfg.M)
    return _sort_to_runs(machine, region, instance.H, R, d)


def _column_runs(machine: Machine, region: Region) -> list[Run]:
    elems = machine.region_elements(region)
    runs: list[Run] = []
    start = 0
    for idx in range(1, len(elems) + 1):
        if idx == len(elems) or elems[idx].key[1] != elems[start].key[1]:
            runs.append(Run(region, start, idx))
            start = idx
    return runs


def _estimated_passes(start_runs: int, target: int, fanin: int) -> int:
    passes = 0
    n = start_runs
    while n > target:
        n = _ceil_div(n, fanin)
        passes += 1
    return passes


def prepare_sorted_map(machine: Machine, region: Region,
                       instance: ShuffleInstance,
                       R: int | None = None) -> MetaRunSet:
    """Meta-runs from a column major layout: columns are presorted runs.

    Thin rows (H/N_R < B) fall back to the unordered-map algorithm, as
    do instances whose columns are so short that sorting from scratch
    is estimated cheaper than merging them.
    """
    if instance.layout_kind() != COLUMN_MAJOR:
        raise SimulationError(
            f"sorted-map preparation needs column major layout, got {instance.layout}")
    cfg = machine.config
    H = instance.H
    _require_block_parallelism(H, cfg)
    if R is None:
        R = nonparallel_run_target(H, instance.N_R, cfg.B)
    R = max(1, R)
    d = merge_degree(H, cfg.P, cfg.B, cfg.M)
    fanin = _effective_fanin(cfg, d)

    columns = _column_runs(machine, region)
    if len(columns) <= R:
        return MetaRunSet(R, tuple(columns), 0)
    if H < instance.N_R * cfg.B:
        return _sort_to_runs(machine, region, H, R, d)
    formation_runs = cfg.P * _ceil_div(_ceil_div(H, cfg.P), cfg.M)
    if 1 + _estimated_passes(formation_runs, R, fanin) < \
            _estimated_passes(len(columns), R, fanin):
        return _sort_to_runs(machine, region, H, R, d)

    assignment = range_bounded_load_balance(
        machine, region, H, instance.N_M, lambda e: e.key[1])
    target_local = max(1, R // cfg.P)
    sinks: list[list[Run]] = [[] for _ in range(cfg.P)]
    scripts = []
    for p in range(cfg.P):
        span = assignment.span_of(p)
        if span.count == 0:
            scripts.append(None)
            continue
        pieces = []
        for col in columns:
            lo = max(col.lo, span.start)
            hi = min(col.hi, span.end)
            if lo < hi:
                pieces.append(Run(region, lo, hi))
        scripts.append(_local_merge_runs(machine, p, pieces, target_local,
                                         fanin, sinks[p]))
    run_lockstep(machine, scripts)
    all_runs = [r for sink in sinks for r in sink]
    if len(all_runs) > R:
        meta = parallel_merge_to_R(machine, all_runs, R, d, validate=False)
        return MetaRunSet(R, meta.runs, meta.rounds)
    return MetaRunSet(R, tuple(all_runs), 0)


def meta_column_capacity(config: MachineConfig, H: int) -> int:
    """m = min(M - B, ceil(H/P)): input elements a processor can pin."""
    return min(config.M - config.B, _ceil_div(H, config.P))


def prepare_parallel_map(machine: Machine, vec_region: Region, task: MapTask,
                         m: int, R: int | None = None,
                         N_R: int | None = None, w: int = 1,
                         parallel_reduce: bool = False) -> MetaRunSet:
    """Run the map phase itself: emit meta-columns row-wise, then merge.

    Input vectors sit column-major in ``vec_region``; each processor
    pins the input elements of a whole meta-column (m/v columns) while
    emitting that meta-column's pairs in row order.  Pairs outside a
    processor's assigned slice are dropped without any I/O.
    """
    cfg = machine.config
    B = cfg.B
    if m < B:
        raise SimulationError(f"meta-column capacity m={m} below block size {B}")
    if m > cfg.M - B:
        raise SimulationError(f"meta-column capacity m={m} exceeds M-B")
    if task.v > m:
        raise SimulationError(f"v={task.v} input vectors exceed capacity m={m}")
    _require_block_parallelism(task.H, cfg)
    if R is None:
        if N_R is None:
            raise SimulationError("need R or N_R to size the meta-run set")
        R = (parallel_run_target(task.H, N_R, w, B) if parallel_reduce
             else nonparallel_run_target(task.H, N_R, B))
    R = max(1, R)
    cols_per_mc = max(1, m // task.v)
    n_mc = _ceil_div(task.N_M, cols_per_mc)

    # Volume discovery: scan input-vector shares, then a prefix sum over
    # the per-processor pair counts.
    vec_blocks = vec_region.blocks
    share = _ceil_div(vec_blocks, cfg.P)
    counts = [0] * cfg.P

    def discover(p: int):
        lo, hi = p * share, min(vec_blocks, (p + 1) * share)
        for bi in range(lo, hi):
            block = yield Input(vec_region.addr(bi))
            for e in block:
                j, k = e.key
                if k == 1:
                    counts[p] += len(task.emission(j))
            machine.discard(p, block)

    run_lockstep(machine, [discover(p) if p * share < vec_blocks else None
                           for p in range(cfg.P)])
    if cfg.P > 1:
        prefix_sum(machine, counts, lambda a, b: a + b)

    # Meta-column formation: emit row-sorted pairs into block-aligned
    # slices per processor so writes never collide.
    mc_pairs: list[list] = []
    for mc in range(n_mc):
        col_lo = mc * cols_per_mc + 1
        col_hi = min(task.N_M, (mc + 1) * cols_per_mc)
        pairs = []
        for j in range(col_lo, col_hi + 1):
            pairs.extend(task.emission(j))
        pairs.sort(key=lambda t: (t.i, t.j))
        mc_pairs.append(pairs)
    mc_regions = [machine.alloc_region(len(pairs)) if pairs else None
                  for pairs in mc_pairs]

    total_blocks = sum(_ceil_div(len(pairs), B) for pairs in mc_pairs if pairs)
    bshare = _ceil_div(total_blocks, cfg.P) if total_blocks else 1
    tasks_by_proc: list[list[tuple[int, int, int]]] = [[] for _ in range(cfg.P)]
    flat = 0
    for mc, pairs in enumerate(mc_pairs):
        nb = _ceil_div(len(pairs), B)
        bi = 0
        while bi < nb:
            proc = flat // bshare
            take = min((proc + 1) * bshare - flat, nb - bi)
            tasks_by_proc[proc].append((mc, bi, bi + take))
            bi += take
            flat += take

    def emit_script(p: int):
        for mc, blo, bhi in tasks_by_proc[p]:
            col_lo = mc * cols_per_mc + 1
            col_hi = min(task.N_M, (mc + 1) * cols_per_mc)
            ent_lo = (col_lo - 1) * task.v
            ent_hi = col_hi * task.v
            held: set[Element] = set()
            for vb in range(ent_lo // B, _ceil_div(ent_hi, B)):
                block = yield Input(vec_region.addr(vb))
                base = vb * B
                for off, e in enumerate(block):
                    if ent_lo <= base + off < ent_hi:
                        held.add(e)
                drop = [e for e in block if e not in held]
                if drop:
                    machine.discard(p, drop)
            pairs = mc_pairs[mc]
            for bi in range(blo, bhi):
                chunk = pairs[bi * B: min((bi + 1) * B, len(pairs))]
                created = [machine.create(p, (t.i, t.j), t) for t in chunk]
                yield Output(mc_regions[mc].addr(bi), created)
                machine.discard(p, created)
            machine.discard(p, held)

    run_lockstep(machine, [emit_script(p) if tasks_by_proc[p] else None
                           for p in range(cfg.P)])

    runs = [Run(mc_regions[mc], 0, len(pairs))
            for mc, pairs in enumerate(mc_pairs) if pairs]
    if len(runs) > R:
        # The merge here follows the M/B-way budget, not the general degree.
        meta = parallel_merge_to_R(machine, runs, R, None, validate=False)
        return MetaRunSet(R, meta.runs, meta.rounds)
    return MetaRunSet(R, tuple(runs), 0)


# -- reduce-dependent finalisation -------------------------------------------


def _span_blocks(runs: Sequence[Run], offsets: Sequence[int], lo: int, hi: int,
                 B: int):
    """Physical blocks covering global positions [lo, hi) over the runs.

    Yields (run_idx, addr, base, win_lo, win_hi): ``base`` is the global
    position of the block's offset 0, and [win_lo, win_hi) is the part
    of the block that lies both inside the run and inside [lo, hi).
    """
    for ri, run in enumerate(runs):
        r_lo = offsets[ri]
        r_hi = r_lo + run.count
        s, e = max(lo, r_lo), min(hi, r_hi)
        if s >= e:
            continue
        local_s = run.lo + (s - r_lo)
        local_e = run.lo + (e - r_lo)
        for bi in range(local_s // B, _ceil_div(local_e, B)):
            base = r_lo - run.lo + bi * B
            win_lo = max(s, base)
            win_hi = min(e, base + B)
            yield ri, run.region.addr(bi), base, win_lo, win_hi


def _copy_run(machine: Machine, run: Run) -> Region:
    out = machine.alloc_region(run.count)

    def script():
        yield from _merge_task(machine, 0, [(run.region, run.lo, run.hi)],
                               list(out.addrs()), run.count)

    run_lockstep(machine, [script()] + [None] * (machine.config.P - 1))
    return out


@dataclass(frozen=True)
class Tile:
    """Elements of one row inside one meta-run."""

    run: int
    row: int
    start: int   # global position over the concatenated runs
    size: int


def tile_table(machine: Machine, meta: MetaRunSet) -> list[Tile]:
    """Tiles in current (run, row) order with global start positions."""
    tiles: list[Tile] = []
    pos = 0
    for ri, run in enumerate(meta.runs):
        elems = run_elements(machine, run)
        start = 0
        for idx in range(1, len(elems) + 1):
            if idx == len(elems) or elems[idx].key[0] != elems[start].key[0]:
                tiles.append(Tile(ri, elems[start].key[0], pos + start, idx - start))
                start = idx
        pos += len(elems)
    return tiles


def tile_destinations(tiles: Sequence[Tile], B: int) -> dict[int, int]:
    """Ceiled output start block per tile, tiles taken in (row, run) order."""
    dest: dict[int, int] = {}
    blk = 0
    for ti in sorted(range(len(tiles)), key=lambda t: (tiles[t].row, tiles[t].run)):
        dest[ti] = blk
        blk += _ceil_div(tiles[ti].size, B)
    return dest


def finalize_nonparallel_reduce(machine: Machine, meta: MetaRunSet) -> Region:
    """Rearrange tiles into a fully row-major region.

    Scans record every tile start into table S (one block per entry);
    tile sizes derived from S become block-ceiled destinations in table
    D through a row-major prefix sum; tiles are then written to their
    ceiled slots and a final contraction squeezes out the padding.
    """
    cfg = machine.config
    P, B = cfg.P, cfg.B
    runs = [r for r in meta.runs if r.count > 0]
    if not runs:
        return machine.alloc_region(0)
    if len(runs) == 1:
        run = runs[0]
        if run.lo == 0 and run.hi == run.region.count:
            return run.region
        return _copy_run(machine, run)
    H = sum(r.count for r in runs)
    offsets = [0] * len(runs)
    for ri in range(1, len(runs)):
        offsets[ri] = offsets[ri - 1] + runs[ri - 1].count

    tiles = tile_table(machine, MetaRunSet(meta.R, tuple(runs)))
    T = len(tiles)
    start_of_tile = {t.start: ti for ti, t in enumerate(tiles)}

    # Scan phase: write every tile start into S, one block per entry.
    s_table = machine.alloc(T)
    share = _ceil_div(H, P)

    def scan_script(p: int):
        lo, hi = p * share, min(H, (p + 1) * share)
        for ri, addr, base, win_lo, win_hi in _span_blocks(runs, offsets, lo, hi, B):
            block = yield Input(addr)
            for off in range(len(block)):
                pos = base + off
                if win_lo <= pos < win_hi and pos in start_of_tile:
                    ti = start_of_tile[pos]
                    entry = machine.create(p, ("S", ti), pos)
                    yield Output(s_table + ti, (entry,))
                    machine.discard(p, (entry,))
            machine.discard(p, block)

    run_lockstep(machine, [scan_script(p) if p * share < H else None
                           for p in range(P)])

    # Size phase: tile sizes from S (entry plus successor), local block
    # tallies in row-major order, then a prefix sum fixes each
    # processor's first destination; phase three writes table D.
    sigma = sorted(range(T), key=lambda ti: (tiles[ti].row, tiles[ti].run))
    d_table = machine.alloc(T)
    tshare = _ceil_div(T, P)
    local_blocks = [0] * P
    sizes_seen: list[dict[int, int]] = [dict() for _ in range(P)]

    def size_script(p: int):
        lo, hi = p * tshare, min(T, (p + 1) * tshare)
        for rank in range(lo, hi):
            ti = sigma[rank]
            entry = (yield Input(s_table + ti))[0]
            start = entry.payload
            machine.discard(p, (entry,))
            if ti + 1 < T:
                succ = (yield Input(s_table + ti + 1))[0]
                size = succ.payload - start
                machine.discard(p, (succ,))
            else:
                size = H - start
            sizes_seen[p][ti] = size
            local_blocks[p] += _ceil_div(size, B)

    run_lockstep(machine, [size_script(p) if p * tshare < T else None
                           for p in range(P)])
    if P > 1:
        ends = prefix_sum(machine, local_blocks, lambda a, b: a + b)
    else:
        ends = [local_blocks[0]]
    block_starts = [e - c for e, c in zip(ends, local_blocks)]

    def dest_script(p: int):
        lo, hi = p * tshare, min(T, (p + 1) * tshare)
        blk = block_starts[p]
        for rank in range(lo, hi):
            ti = sigma[rank]
            entry = machine.create(p, ("D", ti), blk)
            yield Output(d_table + ti, (entry,))
            machine.discard(p, (entry,))
            blk += _ceil_div(sizes_seen[p][ti], B)

    run_lockstep(machine, [dest_script(p) if p * tshare < T else None
                           for p in range(P)])

    # Write phase: every staging block belongs to exactly one tile, so
    # ownership is conflict-free; a block's elements sit in at most two
    # source blocks of its meta-run.
    dests = tile_destinations(tiles, B)
    total_out_blocks = sum(_ceil_div(t.size, B) for t in tiles)
    staging = Region(machine.alloc(total_out_blocks), total_out_blocks,
                     total_out_blocks * B)
    out_blocks: list[tuple[int, int]] = []
    for ti in sorted(range(T), key=lambda t: dests[t]):
        for q in range(_ceil_div(tiles[ti].size, B)):
            out_blocks.append((ti, q))
    oshare = _ceil_div(len(out_blocks), P)

    def write_script(p: int):
        lo, hi = p * oshare, min(len(out_blocks), (p + 1) * oshare)
        for ob in range(lo, hi):
            ti, q = out_blocks[ob]
            t = tiles[ti]
            g_lo = t.start + q * B
            g_hi = min(t.start + t.size, g_lo + B)
            picked: list[Element] = []
            pick_set: set[Element] = set()
            for ri, addr, base, win_lo, win_hi in _span_blocks(
                    runs, offsets, g_lo, g_hi, B):
                block = yield Input(addr)
                for off, e in enumerate(block):
                    if win_lo <= base + off < win_hi:
                        picked.append(e)
                        pick_set.add(e)
                drop = [e for e in block if e not in pick_set]
                if drop:
                    machine.discard(p, drop)
            yield Output(staging.addr(dests[ti] + q), picked)
            machine.discard(p, picked)

    run_lockstep(machine, [write_script(p) if p * oshare < len(out_blocks) else None
                           for p in range(P)])

    return contract(machine, staging)


def finalize_parallel_reduce(machine: Machine, meta: MetaRunSet,
                             reduce_op: Callable, identity, N_R: int,
                             w: int) -> Region:
    """Reduce meta-runs into the dense (row, destination) result grid.

    Processors stream even shares of the meta-runs, folding each row's
    values per destination on the fly; the per-fragment partial results
    are then merged with combining down to one run and expanded into an
    N_R x w grid (identity-filled where no triple contributed).
    """
    cfg = machine.config
    P, B = cfg.P, cfg.B
    runs = [r for r in meta.runs if r.count > 0]
    H = sum(r.count for r in runs)
    grid = machine.alloc_region(N_R * w)
    if not runs:
        return _fill_grid(machine, grid, None, identity, N_R, w)
    offsets = [0] * len(runs)
    for ri in range(1, len(runs)):
        offsets[ri] = offsets[ri - 1] + runs[ri - 1].count

    share = _ceil_div(H, P)
    elems_cache = {ri: run_elements(machine, run) for ri, run in enumerate(runs)}
    frag_region: dict[tuple[int, int], Region] = {}
    frag_counts: dict[tuple[int, int], int] = {}
    for p in range(P):
        lo, hi = p * share, min(H, (p + 1) * share)
        for ri, run in enumerate(runs):
            s = max(lo, offsets[ri])
            e = min(hi, offsets[ri] + run.count)
            if s < e:
                frag = elems_cache[ri][s - offsets[ri]: e - offsets[ri]]
                distinct = len({(x.key[0], x.payload.l) for x in frag})
                frag_region[(p, ri)] = machine.alloc_region(distinct)
                frag_counts[(p, ri)] = distinct

    def reduce_script(p: int):
        lo, hi = p * share, min(H, (p + 1) * share)
        state = {"frag": None, "row": None, "blk": 0}
        row_acc: dict[int, object] = {}
        outbuf: list[Element] = []

        def emit_row():
            for l in sorted(row_acc):
                e = machine.create(p, (state["row"], l), row_acc[l])
                outbuf.append(e)
                if len(outbuf) == B:
                    yield Output(frag_region[(p, state["frag"])].addr(state["blk"]),
                                 list(outbuf))
                    machine.discard(p, list(outbuf))
                    state["blk"] += 1
                    outbuf.clear()
            row_acc.clear()

        def close_frag():
            yield from emit_row()
            if outbuf:
                yield Output(frag_region[(p, state["frag"])].addr(state["blk"]),
                             list(outbuf))
                machine.discard(p, list(outbuf))
                outbuf.clear()
            state["blk"] = 0

        for ri, addr, base, win_lo, win_hi in _span_blocks(runs, offsets, lo, hi, B):
            block = yield Input(addr)
            kept = []
            kept_set = set()
            for off, e in enumerate(block):
                if win_lo <= base + off < win_hi:
                    kept.append(e)
                    kept_set.add(e)
            drop = [e for e in block if e not in kept_set]
            if drop:
                machine.discard(p, drop)
            for e in kept:
                if state["frag"] != ri:
                    if state["frag"] is not None:
                        yield from close_frag()
                    state["frag"] = ri
                    state["row"] = None
                row = e.key[0]
                dest = e.payload.l
                if state["row"] is not None and row != state["row"]:
                    yield from emit_row()
                state["row"] = row
                row_acc[dest] = (reduce_op(row_acc[dest], e.payload.value)
                                 if dest in row_acc else e.payload.value)
                machine.discard(p, (e,))
        if state["frag"] is not None:
            yield from close_frag()

    run_lockstep(machine, [reduce_script(p) if p * share < H else None
                           for p in range(P)])

    # Partial-result segments ordered by (meta-run, position) keep the
    # fold order equal to the original sequence order per key.
    segments = [Run(frag_region[(p, ri)], 0, frag_counts[(p, ri)])
                for ri in range(len(runs)) for p in range(P)
                if (p, ri) in frag_region]
    merged = parallel_merge_to_R(machine, segments, 1,
                                 combine=reduce_op, validate=False)
    final = merged.runs[0] if merged.runs else None
    return _fill_grid(machine, grid, final, identity, N_R, w)


def _fill_grid(machine: Machine, grid: Region, final: Run | None,
               identity, N_R: int, w: int) -> Region:
    """Expand combined partials into the dense (row, dest) grid."""
    cfg = machine.config
    P, B = cfg.P, cfg.B
    total = N_R * w
    present = run_elements(machine, final) if final is not None else []
    pos_of: dict[int, int] = {}
    for idx, e in enumerate(present):
        i, l = e.key
        pos_of[(i - 1) * w + (l - 1)] = idx
    gshare = _ceil_div(grid.blocks, P)

    def fill_script(p: int):
        blo, bhi = p * gshare, min(grid.blocks, (p + 1) * gshare)
        for bi in range(blo, bhi):
            ranks = range(bi * B, min(total, (bi + 1) * B))
            need = [g for g in ranks if g in pos_of]
            held: dict[int, Element] = {}
            if need and final is not None:
                p_lo, p_hi = pos_of[need[0]], pos_of[need[-1]] + 1
                for fb in range((final.lo + p_lo) // B,
                                _ceil_div(final.lo + p_hi, B)):
                    block = yield Input(final.region.addr(fb))
                    base = fb * B - final.lo
                    keep = set()
                    for off, e in enumerate(block):
                        if p_lo <= base + off < p_hi:
                            i, l = e.key
                            held[(i - 1) * w + (l - 1)] = e
                            keep.add(e)
                    drop = [e for e in block if e not in keep]
                    if drop:
                        machine.discard(p, drop)
            cells: list[Element] = []
            for g in ranks:
                if g in held:
                    cells.append(held[g])
                else:
                    cells.append(machine.create(p, (g // w + 1, g % w + 1), identity))
            yield Output(grid.addr(bi), cells)
            machine.discard(p, cells)

    run_lockstep(machine, [fill_script(p) if p * gshare < grid.blocks else None
                           for p in range(P)])
    return grid


# -- direct shuffling and complete sorting -----------------------------------


def make_direct_plan(instance: ShuffleInstance) -> list[int]:
    """Row-major rank of every source position (non-uniform knowledge)."""
    order = sorted(range(instance.H),
                   key=lambda idx: (instance.triples[idx].i, instance.triples[idx].j))
    plan = [0] * instance.H
    for rank, idx in enumerate(order):
        plan[idx] = rank
    return plan


def direct_shuffle(machine: Machine, region: Region, instance: ShuffleInstance,
                   plan: Sequence[int] | None = None) -> Region:
    """Write every triple straight to its row-major slot.

    The destination of each source position comes from the precomputed
    plan; the output splits into block-aligned consecutive parts per
    processor, so concurrent reads are the only shared access.
    """
    cfg = machine.config
    H = instance.H
    _require_block_parallelism(H, cfg)
    if plan is None:
        plan = make_direct_plan(instance)
    B = cfg.B
    order = [0] * H
    for src, rank in enumerate(plan):
        order[rank] = src
    out = machine.alloc_region(H)
    oshare = _ceil_div(out.blocks, cfg.P)

    def script(p: int):
        blo, bhi = p * oshare, min(out.blocks, (p + 1) * oshare)
        for bi in range(blo, bhi):
            srcs = order[bi * B: min(H, (bi + 1) * B)]
            by_slot: dict[int, Element] = {}
            for sb in sorted({s // B for s in srcs}):
                block = yield Input(region.addr(sb))
                keep = set()
                for slot, s in enumerate(srcs):
                    if s // B == sb:
                        e = block[s % B]
                        by_slot[slot] = e
                        keep.add(e)
                drop = [e for e in block if e not in keep]
                if drop:
                    machine.discard(p, drop)
            cells = [by_slot[r] for r in range(len(srcs))]
            yield Output(out.addr(bi), cells)
            machine.discard(p, cells)

    run_lockstep(machine, [script(p) if p * oshare < out.blocks else None
                           for p in range(cfg.P)])
    return out


def _sorted_scan(machine: Machine, region: Region) -> bool:
    """Scan the region in parallel and verify global key order."""
    cfg = machine.config
    P = cfg.P
    share = _ceil_div(region.blocks, P)
    local_ok = [True] * P
    firsts: list = [None] * P
    lasts: list = [None] * P

    def scan(p: int):
        blo, bhi = p * share, min(region.blocks, (p + 1) * share)
        prev = None
        for bi in range(blo, bhi):
            block = yield Input(region.addr(bi))
            for e in block:
                if prev is not None and prev > e.key:
                    local_ok[p] = False
                if firsts[p] is None:
                    firsts[p] = e.key
                prev = e.key
            machine.discard(p, block)
        lasts[p] = prev

    run_lockstep(machine, [scan(p) if p * share < region.blocks else None
                           for p in range(P)])
    ok = all(local_ok)
    active = [p for p in range(P) if firsts[p] is not None]
    if len(active) > 1:
        out_step: list[Action] = [IDLE] * P
        msgs = {}
        for a, b in zip(active, active[1:]):
            msg = machine.create(a, ("bound", a), lasts[a])
            msgs[a] = msg
            out_step[a] = Output(machine.inbox(b), (msg,))
        machine.parallel_step(out_step)
        in_step: list[Action] = [IDLE] * P
        for a, b in zip(active, active[1:]):
            in_step[b] = Input(machine.inbox(b))
        results = machine.parallel_step(in_step)
        for a, b in zip(active, active[1:]):
            got = results[b][0]
            if got.payload > firsts[b]:
                ok = False
            machine.discard(b, (got,))
            machine.discard(a, (msgs[a],))
    return ok


def complete_sort(machine: Machine, region: Region,
                  instance: ShuffleInstance) -> Region:
    """Sort the whole instance row-wise, whatever its layout.

    Row-major input passes with a scan-and-check; column major merges
    the presorted columns when profitable; everything else goes through
    the full parallel merge sort.
    """
    cfg = machine.config
    H = instance.H
    _require_block_parallelism(H, cfg)
    d = merge_degree(H, cfg.P, cfg.B, cfg.M)
    kind = instance.layout_kind()
    if kind == ROW_MAJOR and _sorted_scan(machine, region):
        return region
    if kind == COLUMN_MAJOR:
        fanin = _effective_fanin(cfg, d)
        columns = _column_runs(machine, region)
        formation_runs = cfg.P * _ceil_div(_ceil_div(H, cfg.P), cfg.M)
        if _estimated_passes(len(columns), 1, fanin) <= \
                1 + _estimated_passes(formation_runs, 1, fanin):
            if len(columns) == 1:
                return region
            meta = parallel_merge_to_R(machine, columns, 1, d, validate=False)
            return finalize_nonparallel_reduce(machine, meta)
    meta = _sort_to_runs(machine, region, H, 1, d)
    return finalize_nonparallel_reduce(machine, meta)


# -- instance loading ---------------------------------------------------------


def machine_with_instance(config: MachineConfig,
                          instance: ShuffleInstance) -> tuple[Machine, Region]:
    """Fresh machine holding the instance triples at addresses 0.."""
    blocks = instance_blocks(instance, config.B)
    machine = create_machine(config, blocks)
    return machine, Region(0, len(blocks), instance.H)


def machine_with_vectors(config: MachineConfig,
                         task: MapTask) -> tuple[Machine, Region]:
    """Fresh machine holding the map input vectors, column-major."""
    blocks = task.vector_blocks(config.B)
    machine = create_machine(config, blocks)
    return machine, Region(0, len(blocks), task.N_M * task.v)
