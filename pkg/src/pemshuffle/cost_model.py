"""Closed-form parallel I/O bounds and the togetherness potential.

Upper bounds follow the complexity table of the shuffle algorithms
(leading terms, with the log P additive term reported separately);
lower bounds cover the combined matrix-vector product for the three
layouts, matrix creation from vectors, the transposition potential
argument and their combinations.  Logarithms are base 2 wherever a
base is unstated; log_d is a ratio of base-2 logs.

Lower bounds default to the clean leading-term form.  ``exact=True``
evaluates the explicit constants of the full derivations instead
(1/7 and 1/14 on the log branch; eps^2/5, eps/10 and 1/20 on the
linear branch) with merge base min(M/B, 2H/(PB)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .machine import Element, IOTrace, Machine

UNORDERED = "unordered"
SORTED = "sorted"
PARALLEL_MAP = "parallel_map"
DIRECT_SHUFFLE = "direct_shuffle"
COMPLETE_MERGE = "complete_merge"

NONPARALLEL = "nonparallel"
PARALLEL = "parallel"

MIXED = "mixed_column"
COLUMN = "column_major"
BEST_CASE = "best_case"

LOG2E = math.log2(math.e)


def lgb(b: float, x: float) -> float:
    """Clamped logarithm max(log_b x, 1)."""
    if b <= 1:
        raise ValueError(f"lgb base must exceed 1, got {b}")
    if x <= 0:
        raise ValueError(f"lgb argument must be positive, got {x}")
    return max(math.log2(x) / math.log2(b), 1.0)


@dataclass(frozen=True)
class Params:
    """Bound parameters; validity flags are derived, never assumed."""

    N_M: int
    N_R: int
    H: int
    v: int = 1
    w: int = 1
    P: int = 1
    M: int = 3
    B: int = 1
    eps: float | None = None

    def failed_preconditions(self) -> list[str]:
        bad = []
        if self.M < 3 * self.B:
            bad.append("M >= 3B")
        if self.P > self.H / self.B:
            bad.append("P <= H/B")
        if self.v > self.H / self.N_M:
            bad.append("v <= H/N_M")
        if self.w > self.H / self.N_R:
            bad.append("w <= H/N_R")
        return bad

    def max_eps(self) -> float:
        """Largest eps with H/N_R <= N_M^(1-eps) and H/N_M <= N_R^(1-eps)."""
        if self.N_M < 2 or self.N_R < 2:
            return -math.inf
        a = math.log2(self.H / self.N_R) / math.log2(self.N_M)
        b = math.log2(self.H / self.N_M) / math.log2(self.N_R)
        return 1.0 - max(a, b)

    def effective_eps(self) -> float:
        return self.eps if self.eps is not None else self.max_eps()

    def eps_valid(self) -> bool:
        e = self.effective_eps()
        return e > 0 and e <= self.max_eps() + 1e-12

    def sixth_root_valid(self) -> bool:
        return (self.H / self.N_R <= self.N_M ** (1 / 6) + 1e-9
                and self.H / self.N_M <= self.N_R ** (1 / 6) + 1e-9)


@dataclass(frozen=True)
class CostEstimate:
    value: float | None
    kind: str                  # "upper" | "lower"
    formula_id: str
    valid: bool = True
    reason: str = ""           # failed precondition name when invalid
    log_p_term: float = 0.0    # additive term kept out of the leading value
    note: str = ""


def _d(params: Params) -> float:
    # Merge degree min(M/B, H/(PB)); clamping to 2 mirrors the
    # algorithmic max(2, .) and keeps the log base meaningful.
    return max(2.0, min(params.M / params.B, params.H / (params.P * params.B)))


def _d_exact(params: Params) -> float:
    return max(2.0, min(params.M / params.B, 2 * params.H / (params.P * params.B)))


def _log_d(params: Params, x: float, exact: bool = False) -> float:
    base = _d_exact(params) if exact else _d(params)
    if x <= 0:
        return 0.0
    return math.log2(x) / math.log2(base)


def table1_upper(params: Params, map_type: str,
                 reduce_type: str | None = None) -> CostEstimate:
    """Leading upper-bound term for one algorithm variant.

    The additive O(log P) term every variant carries is reported
    separately in ``log_p_term``.
    """
    p = params
    scan = p.H / (p.P * p.B)
    d = _d(p)
    logp = math.log2(p.P) if p.P > 1 else 0.0
    if map_type == DIRECT_SHUFFLE:
        return CostEstimate(p.H / p.P, "upper", "table1:direct_shuffle",
                            log_p_term=logp)
    if map_type == COMPLETE_MERGE:
        return CostEstimate(scan * lgb(d, p.H / p.B), "upper",
                            "table1:complete_merge", log_p_term=logp)
    if reduce_type not in (NONPARALLEL, PARALLEL):
        raise ValueError(f"unknown reduce type {reduce_type!r}")
    if map_type == UNORDERED:
        arg = (p.N_R if reduce_type == NONPARALLEL
               else p.N_R * p.w / p.B)
    elif map_type == SORTED:
        arg = (min(p.N_M * p.N_R * p.B / p.H, p.N_R, p.N_M)
               if reduce_type == NONPARALLEL
               else min(p.N_M * p.N_R * p.w / p.H, p.N_R * p.w / p.B))
    elif map_type == PARALLEL_MAP:
        arg = (min(p.N_M * p.N_R * p.v / p.H, p.N_M * p.v / p.B)
               if reduce_type == NONPARALLEL
               else p.N_M * p.N_R * p.v * p.w / (p.B * p.H))
    else:
        raise ValueError(f"unknown map type {map_type!r}")
    value = scan * lgb(d, arg)
    return CostEstimate(value, "upper", f"table1:{map_type}/{reduce_type}",
                        log_p_term=logp)


def _lower(params: Params, formula_id: str, arg: float,
           exact_spec: tuple[float, float, float] | None = None,
           note: str = "") -> CostEstimate:
    """min(H/P, scan * log_d(arg)), floored at the scanning bound.

    ``exact_spec`` = (linear_factor, log_divisor, arg) switches to the
    fully explicit constants of the derivation.
    """
    p = params
    scan = p.H / (p.P * p.B)
    if exact_spec is not None:
        lin, div, earg = exact_spec
        log_branch = (p.H / (div * p.P * p.B)) * _log_d(p, earg, exact=True) \
            if earg > 0 else 0.0
        value = min(lin * p.H / p.P, log_branch)
        return CostEstimate(max(value, 0.0), "lower", formula_id + ":exact",
                            note=note)
    leading = scan * _log_d(p, arg)
    value = min(p.H / p.P, max(leading, scan))
    return CostEstimate(value, "lower", formula_id, note=note)


def thm1_lower(params: Params, layout: str, exact: bool = False) -> CostEstimate:
    """Combined matrix-vector product lower bound per input layout."""
    p = params
    bad = p.failed_preconditions()
    if not p.eps_valid():
        bad.append("H/N_R <= N_M^(1-eps) and H/N_M <= N_R^(1-eps)")
    if layout == BEST_CASE and not p.sixth_root_valid():
        bad.append("H/N_R <= N_M^(1/6) and H/N_M <= N_R^(1/6)")
    if bad:
        return CostEstimate(None, "lower", f"thm1:{layout}", valid=False,
                            reason=bad[0])
    eps = p.effective_eps()
    if layout == MIXED:
        arg = p.N_R * p.w / p.B
        if exact:
            return _lower(p, "thm1:mixed", arg,
                          exact_spec=(eps / 10, 7, p.N_R * p.w / (2 * p.B)))
        return _lower(p, "thm1:mixed", arg)
    if layout == COLUMN:
        arg = min(p.N_M * p.N_R * p.w / p.H, p.N_R * p.w / p.B)
        if exact:
            earg = min(p.N_M * p.N_R * p.w / (3 * p.H),
                       p.N_R * p.w / (math.e * p.B))
            return _lower(p, "thm1:column", arg,
                          exact_spec=(eps * eps / 5, 7, earg),
                          note="exact constants approximate (open combinatorial factor)")
        return _lower(p, "thm1:column", arg)
    if layout == BEST_CASE:
        arg = p.N_M * p.N_R * p.v * p.w / (p.H * min(p.M, p.H / p.P))
        if exact:
            return _lower(p, "thm1:best_case", arg,
                          exact_spec=(1 / 20, 14, arg))
        return _lower(p, "thm1:best_case", arg)
    raise ValueError(f"unknown layout {layout!r}")


def lemma2_lower(params: Params, exact: bool = False) -> CostEstimate:
    """Creating a row-major sparse matrix from v vectors."""
    p = params
    bad = p.failed_preconditions()
    if not p.eps_valid():
        bad.append("H/N_R <= N_M^(1-eps) and H/N_M <= N_R^(1-eps)")
    if bad:
        return CostEstimate(None, "lower", "lemma2", valid=False, reason=bad[0])
    arg = min(p.N_M * p.N_R * p.v / p.H, p.N_M * p.v / p.B)
    if exact:
        eps = p.effective_eps()
        earg = min(p.N_M * p.N_R * p.v / (3 * p.H),
                   p.N_M * p.v / (math.e * p.B))
        return _lower(p, "lemma2", arg, exact_spec=(eps * eps / 5, 7, earg))
    return _lower(p, "lemma2", arg)


def transpose_lower(params: Params) -> CostEstimate:
    """Potential-argument bound for sparse transposition."""
    p = params
    arg = min(p.B, p.N_M, p.N_R, p.H / p.B)
    scan = p.H / (p.P * p.B)
    value = max(scan * _log_d(p, arg), scan)
    return CostEstimate(value, "lower", "transpose")


def combined_lower(params: Params, layout: str) -> CostEstimate:
    """Transposition and counting bounds merged, plus the log P floor."""
    p = params
    bad = p.failed_preconditions()
    if not p.eps_valid():
        bad.append("H/N_R <= N_M^(1-eps) and H/N_M <= N_R^(1-eps)")
    if bad:
        return CostEstimate(None, "lower", f"combined:{layout}", valid=False,
                            reason=bad[0])
    if layout == COLUMN:
        arg = min(p.N_M * p.N_R * p.B / p.H, p.N_M, p.N_R, p.H / p.B)
    elif layout == MIXED:
        arg = min(p.N_R, p.H / p.B)
    else:
        raise ValueError(f"unknown layout {layout!r}")
    scan = p.H / (p.P * p.B)
    leading = min(p.H / p.P, max(scan * _log_d(p, arg), scan))
    logp = math.log2(p.P) if p.P > 1 else 0.0
    return CostEstimate(max(leading, logp), "lower", f"combined:{layout}",
                        log_p_term=logp)


def scatter_gather_floor(params: Params) -> CostEstimate:
    """Omega(log P) floor from the exclusive-write requirement."""
    logp = math.log2(params.P) if params.P > 1 else 0.0
    return CostEstimate(logp, "lower", "scatter_gather", log_p_term=logp)


# -- togetherness potential ---------------------------------------------------


def _f(x: int) -> float:
    return x * math.log2(x) if x > 0 else 0.0


def _group_rating(counter: dict[int, int]) -> float:
    return sum(_f(c) for c in counter.values())


def potential(machine: Machine,
              output_block_of: Callable[[Element], int | None]) -> float:
    """Togetherness potential of the live machine state.

    Every internal memory and every external block is rated by
    sum f(x_i) over the number x_i of its elements destined for output
    block i, f(x) = x log2 x.  Elements held by a processor count
    there; otherwise they count at the block they were last written to.
    Elements without an output block (bookkeeping values) are ignored.
    """
    P = machine.config.P
    mem_counts: list[dict[int, int]] = [dict() for _ in range(P)]
    blk_counts: dict[int, dict[int, int]] = {}
    seen_held: set[Element] = set()
    for p in range(P):
        for e in machine.held_sorted(p):
            o = output_block_of(e)
            if o is None:
                continue
            mem_counts[p][o] = mem_counts[p].get(o, 0) + 1
            seen_held.add(e)
    for addr, block in machine.external_image().items():
        for e in block:
            if e in seen_held:
                continue
            if machine.home_of(e) != addr:
                continue
            o = output_block_of(e)
            if o is None:
                continue
            blk_counts.setdefault(addr, {})[o] = blk_counts.setdefault(addr, {}).get(o, 0) + 1
    total = sum(_group_rating(c) for c in mem_counts)
    total += sum(_group_rating(c) for c in blk_counts.values())
    return total


@dataclass
class PotentialReport:
    """Per-step potential increases of a replayed trace."""

    deltas: list[float]
    bound: float
    phi_initial: float
    phi_final: float
    applicable: bool = True
    reason: str = ""
    violations: list[int] = field(default_factory=list)

    @property
    def margins(self) -> list[float]:
        return [self.bound - d for d in self.deltas]

    @property
    def total_delta(self) -> float:
        return sum(self.deltas)

    def ok(self) -> bool:
        return self.applicable and not self.violations


class _PhiTracker:
    """Incremental potential over a replayed trace.

    Every element carries exactly one "resting" rating at its home
    block plus one rating per processor holding it; re-reading content
    whose rating already moved elsewhere is a copy and simply adds a
    memory rating.  Elements held by more than one processor at a
    sample point mark the trace as carrying copies, which the per-step
    bound does not cover.
    """

    def __init__(self, P: int, output_block_of):
        self.out_of = output_block_of
        self.mem: list[dict[int, int]] = [dict() for _ in range(P)]
        self.blk: dict[int, dict[int, int]] = {}
        self.holders: dict[Element, list[int]] = {}
        self.home: dict[Element, int | None] = {}
        self.at_home: dict[Element, bool] = {}
        self.phi = 0.0
        self.multi_held = 0

    def _bump(self, counter: dict[int, int], o: int, delta: int) -> None:
        old = counter.get(o, 0)
        new = old + delta
        self.phi += _f(new) - _f(old)
        if new:
            counter[o] = new
        else:
            counter.pop(o, None)

    def place_initial(self, addr: int, elems: Iterable[Element]) -> None:
        for e in elems:
            o = self.out_of(e)
            self.home[e] = addr
            if o is not None:
                self.at_home[e] = True
                self._bump(self.blk.setdefault(addr, {}), o, +1)

    def read(self, p: int, addr: int, elems: Iterable[Element]) -> None:
        for e in elems:
            o = self.out_of(e)
            if o is None:
                continue
            hs = self.holders.setdefault(e, [])
            if p in hs:
                continue
            if self.at_home.get(e) and self.home.get(e) == addr:
                self.at_home[e] = False
                self._bump(self.blk.setdefault(addr, {}), o, -1)
            if len(hs) == 1:
                self.multi_held += 1
            hs.append(p)
            self._bump(self.mem[p], o, +1)

    def write(self, p: int, addr: int, elems: tuple, old: tuple) -> None:
        new_set = set(elems)
        for e in old:
            if e in new_set:
                continue
            if self.home.get(e) == addr:
                o = self.out_of(e)
                if o is not None and self.at_home.get(e):
                    self.at_home[e] = False
                    self._bump(self.blk.setdefault(addr, {}), o, -1)
                self.home[e] = None
        for e in elems:
            o = self.out_of(e)
            if o is not None and self.at_home.get(e):
                # a stale resting rating moves along with the rewrite
                prev = self.home.get(e)
                if prev is not None and prev != addr:
                    self.at_home[e] = False
                    self._bump(self.blk.setdefault(prev, {}), o, -1)
            self.home[e] = addr

    def drop(self, p: int, elems: Iterable[Element]) -> None:
        for e in elems:
            o = self.out_of(e)
            if o is None:
                continue
            hs = self.holders.get(e)
            if not hs or p not in hs:
                continue
            hs.remove(p)
            if len(hs) == 1:
                self.multi_held -= 1
            self._bump(self.mem[p], o, -1)
            if not hs and not self.at_home.get(e):
                home = self.home.get(e)
                if home is not None:
                    self.at_home[e] = True
                    self._bump(self.blk.setdefault(home, {}), o, +1)


def check_potential_deltas(trace: IOTrace,
                           initial_image: dict[int, tuple],
                           output_block_of: Callable[[Element], int | None],
                           P: int, M: int, B: int) -> PotentialReport:
    """Replay a trace and bound every parallel step's potential increase.

    The per-step bound is P*B*log2(2e) + P*B*log2(min(M, H/P)/B) with H
    the number of tracked elements.  Traces in which an element ends up
    held by two processors at a step boundary carry copies; the bound
    does not apply to them and the report says so.
    """
    tracker = _PhiTracker(P, output_block_of)
    ext: dict[int, tuple] = {}
    tracked = 0
    for addr, elems in initial_image.items():
        ext[addr] = tuple(elems)
        tracker.place_initial(addr, elems)
        tracked += sum(1 for e in elems if output_block_of(e) is not None)
    H = tracked
    bound = P * B * math.log2(2 * math.e) + P * B * math.log2(min(M, max(H / P, B)) / B)
    phi0 = tracker.phi

    def apply_free(bucket: list[tuple]) -> None:
        for rec in bucket:
            if rec[0] == "D":
                _, p, elems = rec
                tracker.drop(p, elems)
            else:
                _, p, consumed, produced = rec
                tracker.drop(p, consumed)
                # produced elements have no home yet; they enter rated
                # memory only if they map to an output block
                for e in produced:
                    o = output_block_of(e)
                    if o is not None:
                        tracker.holders.setdefault(e, []).append(p)
                        tracker._bump(tracker.mem[p], o, +1)

    deltas: list[float] = []
    violations: list[int] = []
    copies = False
    apply_free(trace.free_ops.get(0, ()))
    # pre-step free ops fold into the first delta so the sum telescopes
    # exactly to phi_final - phi_initial
    phi_prev = phi0
    for t, records in enumerate(trace.steps):
        for p, rec in enumerate(records):
            if rec is None:
                continue
            if rec[0] == "I":
                tracker.read(p, rec[1], ext.get(rec[1], ()))
        for p, rec in enumerate(records):
            if rec is None or rec[0] != "O":
                continue
            addr, elems = rec[1], rec[2]
            tracker.write(p, addr, elems, ext.get(addr, ()))
            ext[addr] = elems
        apply_free(trace.free_ops.get(t + 1, ()))
        if tracker.multi_held:
            copies = True
        delta = tracker.phi - phi_prev
        deltas.append(delta)
        phi_prev = tracker.phi
        if delta > bound + 1e-9:
            violations.append(t)
    report = PotentialReport(deltas, bound, phi0, tracker.phi,
                             applicable=not copies,
                             reason="trace copies elements" if copies else "",
                             violations=violations)
    return report
