"""Shuffle workload generation and sequential oracles.

A shuffle instance is a sparse N_R x N_M matrix of intermediate pairs:
triple (i, j, x) says map operation j emitted value x for reducer i.
For combined matrix-vector tasks every triple additionally names which
of v input vectors it stems from and which of w output vectors it
feeds.  Instances carry their triples in one of the four layouts the
algorithms consume.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

MIXED_COLUMN = "mixed_column"
COLUMN_MAJOR = "column_major"
ROW_MAJOR = "row_major"
META_COLUMN = "meta_column"  # serialised as meta_column:<columns per meta-column>

LAYOUTS = (MIXED_COLUMN, COLUMN_MAJOR, ROW_MAJOR, META_COLUMN)


class GenerationError(ValueError):
    pass


class Triple(NamedTuple):
    """One intermediate pair: row i, column j, value, origin k, destination l."""

    i: int
    j: int
    value: int
    k: int
    l: int


@dataclass(frozen=True)
class ShuffleInstance:
    N_M: int
    N_R: int
    H: int
    v: int
    w: int
    layout: str            # layout token, e.g. "mixed_column" or "meta_column:4"
    triples: tuple[Triple, ...]
    seed: int

    def layout_kind(self) -> str:
        return self.layout.split(":", 1)[0]

    def meta_width(self) -> int | None:
        if ":" in self.layout:
            return int(self.layout.split(":", 1)[1])
        return None


def _layout_token(layout: str, meta_width: int | None) -> str:
    if layout == META_COLUMN:
        if not meta_width or meta_width < 1:
            raise GenerationError("meta_column layout needs a positive column width")
        return f"{META_COLUMN}:{meta_width}"
    return layout


def _sample_capped(rng: random.Random, N_M: int, N_R: int, H: int,
                   max_col: int | None, max_row: int | None) -> list[tuple[int, int]]:
    col_cap = max_col if max_col is not None else H
    row_cap = max_row if max_row is not None else H
    if H > N_M * col_cap or H > N_R * row_cap:
        raise GenerationError("degree caps leave no room for H entries")
    chosen: set[int] = set()
    col_deg = [0] * (N_M + 1)
    row_deg = [0] * (N_R + 1)
    out = []
    while len(out) < H:
        for _ in range(64):
            c = rng.randrange(N_M * N_R)
            i, j = c % N_R + 1, c // N_R + 1
            if c not in chosen and col_deg[j] < col_cap and row_deg[i] < row_cap:
                break
        else:
            feasible = [c for c in range(N_M * N_R) if c not in chosen
                        and col_deg[c // N_R + 1] < col_cap
                        and row_deg[c % N_R + 1] < row_cap]
            if not feasible:
                raise GenerationError("degree caps leave no room for H entries")
            c = feasible[rng.randrange(len(feasible))]
            i, j = c % N_R + 1, c // N_R + 1
        chosen.add(c)
        col_deg[j] += 1
        row_deg[i] += 1
        out.append((i, j))
    return out


def _sample_positions(rng: random.Random, N_M: int, N_R: int, H: int,
                      regularity: str | None) -> list[tuple[int, int]]:
    if regularity is None:
        cells = rng.sample(range(N_M * N_R), H)
        return [(c % N_R + 1, c // N_R + 1) for c in cells]
    if regularity == "column":
        per_col = H // N_M
        out = []
        for j in range(1, N_M + 1):
            for i in rng.sample(range(1, N_R + 1), per_col):
                out.append((i, j))
        return out
    if regularity == "row":
        per_row = H // N_R
        out = []
        for i in range(1, N_R + 1):
            for j in rng.sample(range(1, N_M + 1), per_row):
                out.append((i, j))
        return out
    if regularity == "both":
        # Circulant band: consecutive cell ranks wrap around the rows, so
        # both margins come out exactly regular; random relabelling of
        # rows and columns keeps the conformation varied.
        per_col = H // N_M
        rows = list(range(1, N_R + 1))
        cols = list(range(1, N_M + 1))
        rng.shuffle(rows)
        rng.shuffle(cols)
        out = []
        for j0 in range(N_M):
            for t in range(per_col):
                out.append((rows[(j0 * per_col + t) % N_R], cols[j0]))
        return out
    raise GenerationError(f"unknown regularity {regularity!r}")


def generate(N_M: int, N_R: int, H: int, v: int = 1, w: int = 1,
             layout: str = MIXED_COLUMN, regularity: str | None = None,
             seed: int = 0, meta_width: int | None = None,
             combined: bool = False, max_col_degree: int | None = None,
             max_row_degree: int | None = None) -> ShuffleInstance:
    """Draw a shuffle instance, deterministic per seed.

    Positions are uniform without replacement, subject to the requested
    regularity (exactly H/N_M per column and/or H/N_R per row, which
    requires the matching divisibility).  Values are distinct integers
    so element identity survives reordering.

    ``combined=True`` additionally demands v <= H/N_M and w <= H/N_R,
    the combined-task preconditions.  Per-column and per-row degree
    caps can be requested independently; they are not tied to any
    validity exponent of the bound formulas.
    """
    if H < 1 or H > N_M * N_R:
        raise GenerationError(f"H={H} infeasible for a {N_R}x{N_M} matrix")
    if v < 1 or w < 1:
        raise GenerationError("v and w must be >= 1")
    if combined and (v > H / N_M or w > H / N_R):
        raise GenerationError(
            f"combined task needs v <= H/N_M and w <= H/N_R (v={v}, w={w})")
    if regularity in ("column", "both") and H % N_M:
        raise GenerationError(f"column-regular needs N_M | H ({N_M} does not divide {H})")
    if regularity in ("row", "both") and H % N_R:
        raise GenerationError(f"row-regular needs N_R | H ({N_R} does not divide {H})")
    if layout not in LAYOUTS:
        raise GenerationError(f"unknown layout {layout!r}")
    if regularity is not None and max_col_degree is not None \
            and max_col_degree < H // N_M and regularity in ("column", "both"):
        raise GenerationError("column degree cap below the regular degree")
    if regularity is not None and max_row_degree is not None \
            and max_row_degree < H // N_R and regularity in ("row", "both"):
        raise GenerationError("row degree cap below the regular degree")

    rng = random.Random(seed)
    if regularity is None and (max_col_degree is not None
                               or max_row_degree is not None):
        positions = _sample_capped(rng, N_M, N_R, H, max_col_degree,
                                   max_row_degree)
    else:
        positions = _sample_positions(rng, N_M, N_R, H, regularity)
    values = list(range(1, H + 1))
    rng.shuffle(values)
    triples = [Triple(i, j, values[idx], rng.randrange(1, v + 1), rng.randrange(1, w + 1))
               for idx, (i, j) in enumerate(positions)]

    kind = layout
    if kind == MIXED_COLUMN:
        decorated = sorted((t.j, rng.random(), t) for t in triples)
        triples = [t for _, _, t in decorated]
    elif kind == COLUMN_MAJOR:
        triples.sort(key=lambda t: (t.j, t.i))
    elif kind == ROW_MAJOR:
        triples.sort(key=lambda t: (t.i, t.j))
    else:
        width = meta_width or 1
        triples.sort(key=lambda t: ((t.j - 1) // width, t.i, t.j))
    return ShuffleInstance(N_M, N_R, H, v, w, _layout_token(kind, meta_width),
                           tuple(triples), seed)


def validate_layout(instance: ShuffleInstance) -> None:
    """Check the triple sequence against its layout's ordering rule."""
    t = instance.triples
    kind = instance.layout_kind()
    if kind == MIXED_COLUMN:
        cols = [x.j for x in t]
        if cols != sorted(cols):
            raise GenerationError("mixed column layout must group columns in order")
    elif kind == COLUMN_MAJOR:
        if [(x.j, x.i) for x in t] != sorted((x.j, x.i) for x in t):
            raise GenerationError("column major layout must sort by (j, i)")
    elif kind == ROW_MAJOR:
        if [(x.i, x.j) for x in t] != sorted((x.i, x.j) for x in t):
            raise GenerationError("row major layout must sort by (i, j)")
    else:
        width = instance.meta_width() or 1
        ranks = [((x.j - 1) // width, x.i, x.j) for x in t]
        if ranks != sorted(ranks):
            raise GenerationError("meta-column layout must be row-sorted per column range")


# -- oracles ---------------------------------------------------------------


def oracle_shuffle(instance: ShuffleInstance) -> list[Triple]:
    """Reference answer: the triples in row major order, stable by (i, j)."""
    return sorted(instance.triples, key=lambda t: (t.i, t.j))


def oracle_combined_mxv(instance: ShuffleInstance, input_vectors: Sequence[Sequence],
                        add: Callable = lambda a, b: a + b,
                        mul: Callable = lambda a, b: a * b,
                        zero=0) -> list[list]:
    """Combined matrix-vector product: out[l][i] = sum of x_ij * in[k_ij][j].

    Semiring addition and multiplication come from the caller; no
    subtraction is ever used.  ``input_vectors`` is v rows of N_M
    scalars; the result is w rows of N_R scalars.
    """
    out = [[zero] * instance.N_R for _ in range(instance.w)]
    for t in instance.triples:
        contrib = mul(t.value, input_vectors[t.k - 1][t.j - 1])
        out[t.l - 1][t.i - 1] = add(out[t.l - 1][t.i - 1], contrib)
    return out


def elementary_products(instance: ShuffleInstance, input_vectors: Sequence[Sequence],
                        mul: Callable = lambda a, b: a * b) -> ShuffleInstance:
    """Replace every triple's value by its elementary product x_ij * in[k][j].

    Shuffling the result and reducing by destination reproduces the
    combined matrix-vector product.
    """
    triples = tuple(t._replace(value=mul(t.value, input_vectors[t.k - 1][t.j - 1]))
                    for t in instance.triples)
    return ShuffleInstance(instance.N_M, instance.N_R, instance.H, instance.v,
                           instance.w, instance.layout, triples, instance.seed)


# -- serialization -----------------------------------------------------------


def to_text(instance: ShuffleInstance) -> str:
    lines = [f"{instance.N_M} {instance.N_R} {instance.H} {instance.v} "
             f"{instance.w} {instance.layout} {instance.seed}"]
    for t in instance.triples:
        lines.append(f"{t.i} {t.j} {t.value} {t.k} {t.l}")
    return "\n".join(lines) + "\n"


def from_text(text: str) -> ShuffleInstance:
    lines = text.strip("\n").split("\n")
    head = lines[0].split()
    if len(head) != 7:
        raise GenerationError(f"bad instance header: {lines[0]!r}")
    n_m, n_r, h, v, w = (int(x) for x in head[:5])
    layout, seed = head[5], int(head[6])
    triples = []
    for line in lines[1:]:
        i, j, value, k, l = (int(x) for x in line.split())
        triples.append(Triple(i, j, value, k, l))
    if len(triples) != h:
        raise GenerationError(f"header says H={h}, found {len(triples)} triples")
    return ShuffleInstance(n_m, n_r, h, v, w, layout, tuple(triples), seed)


# -- machine feed ------------------------------------------------------------


def instance_blocks(instance: ShuffleInstance, B: int,
                    base_addr: int = 0) -> list[tuple[int, list]]:
    """Chunk the triples into machine blocks keyed by (i, j)."""
    out = []
    t = instance.triples
    for bi in range(0, len(t), B):
        chunk = t[bi:bi + B]
        out.append((base_addr + bi // B, [((x.i, x.j), x) for x in chunk]))
    return out


@dataclass(frozen=True)
class MapTask:
    """Inputs of a parallel map phase: v stacked input vectors plus the
    emission function (column -> row-sorted triples)."""

    N_M: int
    H: int
    v: int
    emission: Callable[[int], list[Triple]]
    vector_values: tuple = ()    # column-major: (j=1,k=1..v), (j=2,k=1..v), ...

    def vector_blocks(self, B: int, base_addr: int = 0) -> list[tuple[int, list]]:
        specs = []
        idx = 0
        for j in range(1, self.N_M + 1):
            for k in range(1, self.v + 1):
                specs.append(((j, k), self.vector_values[idx]))
                idx += 1
        out = []
        for bi in range(0, len(specs), B):
            out.append((base_addr + bi // B, specs[bi:bi + B]))
        return out


def make_map_task(instance: ShuffleInstance,
                  input_vectors: Sequence[Sequence] | None = None,
                  mul: Callable = lambda a, b: a * b) -> MapTask:
    """Build the map-phase view of an instance.

    Without input vectors the emission reproduces the instance triples;
    with vectors it emits elementary products (value x_ij * in[k][j]).
    """
    by_col: dict[int, list[Triple]] = {}
    for t in instance.triples:
        by_col.setdefault(t.j, []).append(t)
    for j in by_col:
        by_col[j].sort(key=lambda t: (t.i, t.j))
    if input_vectors is None:
        vals = tuple(1 for _ in range(instance.N_M * instance.v))

        def emission(j: int) -> list[Triple]:
            return list(by_col.get(j, ()))
    else:
        vals = tuple(input_vectors[k][j] for j in range(instance.N_M)
                     for k in range(instance.v))

        def emission(j: int) -> list[Triple]:
            return [t._replace(value=mul(t.value, input_vectors[t.k - 1][j - 1]))
                    for t in by_col.get(j, ())]

    return MapTask(instance.N_M, instance.H, instance.v, emission, vals)
