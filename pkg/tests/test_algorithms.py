import math
import random

import pytest

from pemshuffle.algorithms import (
    MetaRunSet,
    Run,
    complete_sort,
    direct_shuffle,
    finalize_nonparallel_reduce,
    finalize_parallel_reduce,
    machine_with_instance,
    machine_with_vectors,
    make_direct_plan,
    merge_degree,
    meta_column_capacity,
    nonparallel_run_target,
    parallel_merge_to_R,
    parallel_run_target,
    prepare_parallel_map,
    prepare_sorted_map,
    prepare_unordered_map,
    run_elements,
    tile_destinations,
    tile_table,
)
from pemshuffle.machine import (
    IDLE,
    MachineConfig,
    Output,
    SimulationError,
    create_machine,
)
from pemshuffle.workload import (
    COLUMN_MAJOR,
    MIXED_COLUMN,
    ROW_MAJOR,
    ShuffleInstance,
    Triple,
    elementary_products,
    generate,
    make_map_task,
    oracle_combined_mxv,
    oracle_shuffle,
)


def region_payloads(machine, region):
    return [e.payload for e in machine.region_elements(region)]


def fingerprint(machine, runs):
    out = []
    for r in runs:
        out.extend(e.payload for e in run_elements(machine, r))
    return sorted(out, key=lambda t: (t.i, t.j))


class TestMergeDegree:
    def test_formula(self):
        assert merge_degree(H=2 ** 12, P=4, B=8, M=64) == \
            math.ceil(max(2, min(2 ** 12 / 32, math.sqrt(2 ** 10), 8)))

    def test_floor_of_two(self):
        assert merge_degree(H=64, P=8, B=8, M=24) == 2

    def test_run_targets(self):
        assert nonparallel_run_target(4096, 64, 8) == 8
        assert parallel_run_target(4096, 64, 16, 8) == 4
        assert nonparallel_run_target(10, 64, 8) == 1


def presorted_runs(machine, n_runs, run_len, B, seed=0):
    rng = random.Random(seed)
    runs = []
    value = 0
    for r in range(n_runs):
        keys = sorted(rng.randrange(1000) for _ in range(run_len))
        region = machine.alloc_region(run_len)
        for bi in range(region.blocks):
            chunk = keys[bi * B:(bi + 1) * B]
            elems = [machine.create(0, (k, value + i), (k, value + i))
                     for i, k in enumerate(chunk)]
            value += len(chunk)
            machine.parallel_step([Output(region.addr(bi), elems)] +
                                  [IDLE] * (machine.config.P - 1))
            machine.discard(0, elems)
        runs.append(Run(region, 0, run_len))
    return runs


class TestParallelMerge:
    def test_sixteen_runs_to_four_in_two_rounds(self):
        m = create_machine(MachineConfig(P=4, M=12, B=4))
        runs = presorted_runs(m, 16, 8, 4)
        meta = parallel_merge_to_R(m, runs, R=4, d=2)
        assert len(meta.runs) == 4
        assert meta.rounds == 2
        for r in meta.runs:
            keys = [e.key for e in run_elements(m, r)]
            assert keys == sorted(keys)

    def test_identity_when_few_runs(self):
        m = create_machine(MachineConfig(P=2, M=12, B=4))
        runs = presorted_runs(m, 3, 8, 4)
        before = m.io_count
        meta = parallel_merge_to_R(m, runs, R=4, d=2)
        assert m.io_count == before
        assert meta.runs == tuple(runs)

    def test_merge_preserves_multiset(self):
        m = create_machine(MachineConfig(P=4, M=12, B=4))
        runs = presorted_runs(m, 7, 12, 4, seed=3)
        everything = sorted(e.payload for r in runs
                            for e in run_elements(m, r))
        meta = parallel_merge_to_R(m, runs, R=2, d=3)
        got = sorted(e.payload for r in meta.runs
                     for e in run_elements(m, r))
        assert got == everything

    def test_sixty_four_to_eight_with_degree_four(self):
        m = create_machine(MachineConfig(P=8, M=24, B=4))
        runs = presorted_runs(m, 64, 4, 4, seed=4)
        meta = parallel_merge_to_R(m, runs, R=8, d=4)
        assert len(meta.runs) == 8
        assert meta.rounds == 2   # ceil(log4(64/8))

    def test_unsorted_input_rejected(self):
        m = create_machine(MachineConfig(P=1, M=12, B=4))
        region = m.alloc_region(4)
        elems = [m.create(0, (9 - i, i), i) for i in range(4)]
        m.parallel_step([Output(region.addr(0), elems)])
        m.discard(0, elems)
        with pytest.raises(SimulationError):
            parallel_merge_to_R(m, [Run(region, 0, 4)], R=1)


class TestPrepareUnordered:
    def test_spec_point(self):
        inst = generate(64, 64, 4096, layout=MIXED_COLUMN, seed=0)
        cfg = MachineConfig(P=8, M=64, B=8)
        m, region = machine_with_instance(cfg, inst)
        R = nonparallel_run_target(4096, 64, 8)
        assert R == 8
        meta = prepare_unordered_map(m, region, inst, R)
        assert len(meta.runs) == 8
        for r in meta.runs:
            keys = [e.key for e in run_elements(m, r)]
            assert keys == sorted(keys)
        assert fingerprint(m, meta.runs) == oracle_shuffle(inst)

    def test_local_only_when_fits(self):
        # R >= P and each processor's share fits in one memory load
        inst = generate(16, 16, 128, layout=MIXED_COLUMN, seed=1)
        cfg = MachineConfig(P=4, M=64, B=4)
        m, region = machine_with_instance(cfg, inst)
        meta = prepare_unordered_map(m, region, inst, R=8)
        assert meta.rounds == 0
        assert len(meta.runs) <= 8
        # formation only: one read and one write per block
        assert m.io_count <= 2 * math.ceil(region.blocks / 4)

    def test_wrong_layout_rejected(self):
        inst = generate(8, 8, 64, layout=COLUMN_MAJOR, seed=2)
        cfg = MachineConfig(P=2, M=24, B=4)
        m, region = machine_with_instance(cfg, inst)
        with pytest.raises(SimulationError):
            prepare_unordered_map(m, region, inst)

    def test_composition_equals_oracle(self):
        inst = generate(32, 32, 512, layout=MIXED_COLUMN, seed=3)
        cfg = MachineConfig(P=4, M=32, B=4)
        m, region = machine_with_instance(cfg, inst)
        meta = prepare_unordered_map(m, region, inst)
        out = finalize_nonparallel_reduce(m, meta)
        assert region_payloads(m, out) == oracle_shuffle(inst)
        m.assert_memories_empty()


class TestPrepareSorted:
    def test_columns_pass_through_when_few(self):
        inst = generate(4, 64, 256, layout=COLUMN_MAJOR, seed=4)
        cfg = MachineConfig(P=2, M=24, B=4)
        m, region = machine_with_instance(cfg, inst)
        meta = prepare_sorted_map(m, region, inst, R=8)
        assert m.io_count == 0
        assert len(meta.runs) <= 8

    def test_thin_rows_dispatch_to_unordered_path(self):
        # H/N_R < B: columns cannot serve the reduce side directly
        inst = generate(32, 64, 128, layout=COLUMN_MAJOR, seed=5)
        cfg = MachineConfig(P=2, M=24, B=4)
        m, region = machine_with_instance(cfg, inst)
        assert inst.H / inst.N_R < cfg.B
        meta = prepare_sorted_map(m, region, inst)
        assert fingerprint(m, meta.runs) == oracle_shuffle(inst)
        out = finalize_nonparallel_reduce(m, meta)
        assert region_payloads(m, out) == oracle_shuffle(inst)

    def test_composition_equals_oracle(self):
        inst = generate(32, 16, 512, layout=COLUMN_MAJOR, seed=6)
        cfg = MachineConfig(P=4, M=32, B=4)
        m, region = machine_with_instance(cfg, inst)
        meta = prepare_sorted_map(m, region, inst)
        out = finalize_nonparallel_reduce(m, meta)
        assert region_payloads(m, out) == oracle_shuffle(inst)
        m.assert_memories_empty()

    def test_conservation(self):
        inst = generate(16, 8, 128, layout=COLUMN_MAJOR, seed=7)
        cfg = MachineConfig(P=4, M=24, B=4)
        m, region = machine_with_instance(cfg, inst)
        meta = prepare_sorted_map(m, region, inst)
        assert fingerprint(m, meta.runs) == oracle_shuffle(inst)


class TestPrepareParallelMap:
    def test_nothing_to_do_when_meta_columns_fit(self):
        inst = generate(8, 16, 128, layout=COLUMN_MAJOR, seed=8)
        cfg = MachineConfig(P=2, M=64, B=4)
        m, vec = machine_with_vectors(cfg, make_map_task(inst))
        cap = meta_column_capacity(cfg, inst.H)
        meta = prepare_parallel_map(m, vec, make_map_task(inst), cap, N_R=16)
        assert meta.rounds == 0

    def test_one_merge_level(self):
        # 16 columns in meta-columns of 4: four runs merged to 2 in one round
        inst = generate(16, 16, 256, layout=COLUMN_MAJOR, seed=9)
        cfg = MachineConfig(P=2, M=24, B=4)
        task = make_map_task(inst)
        m, vec = machine_with_vectors(cfg, task)
        meta = prepare_parallel_map(m, vec, task, m=4, R=2)
        assert meta.rounds == 1
        assert len(meta.runs) == 2

    def test_emission_conserved(self):
        inst = generate(16, 16, 256, v=2, layout=COLUMN_MAJOR, seed=10)
        cfg = MachineConfig(P=4, M=32, B=4)
        task = make_map_task(inst)
        m, vec = machine_with_vectors(cfg, task)
        cap = meta_column_capacity(cfg, inst.H)
        meta = prepare_parallel_map(m, vec, task, cap, N_R=16)
        assert fingerprint(m, meta.runs) == oracle_shuffle(inst)

    def test_capacity_below_block_rejected(self):
        inst = generate(16, 16, 256, layout=COLUMN_MAJOR, seed=11)
        cfg = MachineConfig(P=2, M=24, B=8)
        task = make_map_task(inst)
        m, vec = machine_with_vectors(cfg, task)
        with pytest.raises(SimulationError):
            prepare_parallel_map(m, vec, task, m=4, R=4)

    def test_composition_equals_oracle(self):
        inst = generate(32, 16, 512, v=2, layout=COLUMN_MAJOR, seed=12)
        cfg = MachineConfig(P=4, M=48, B=4)
        task = make_map_task(inst)
        m, vec = machine_with_vectors(cfg, task)
        cap = meta_column_capacity(cfg, inst.H)
        meta = prepare_parallel_map(m, vec, task, cap, N_R=16)
        out = finalize_nonparallel_reduce(m, meta)
        assert region_payloads(m, out) == oracle_shuffle(inst)
        m.assert_memories_empty()


class TestFinalizeNonparallel:
    def test_single_run_passes_through(self):
        m = create_machine(MachineConfig(P=2, M=12, B=4))
        runs = presorted_runs(m, 1, 16, 4)
        before = m.io_count
        out = finalize_nonparallel_reduce(m, MetaRunSet(1, tuple(runs)))
        assert out == runs[0].region
        assert m.io_count == before

    def test_tile_destinations_hand_case(self):
        # two meta-runs over four rows; hand-computed ceiled prefix table
        m = create_machine(MachineConfig(P=1, M=12, B=2))
        r1 = [Triple(1, 1, 1, 1, 1), Triple(1, 2, 2, 1, 1), Triple(3, 1, 3, 1, 1)]
        r2 = [Triple(1, 3, 4, 1, 1), Triple(2, 3, 5, 1, 1), Triple(2, 4, 6, 1, 1),
              Triple(4, 4, 7, 1, 1)]
        regions = []
        for chunk in (r1, r2):
            region = m.alloc_region(len(chunk))
            for bi in range(region.blocks):
                part = chunk[bi * 2:(bi + 1) * 2]
                elems = [m.create(0, (t.i, t.j), t) for t in part]
                m.parallel_step([Output(region.addr(bi), elems)])
                m.discard(0, elems)
            regions.append(Run(region, 0, len(chunk)))
        meta = MetaRunSet(2, tuple(regions))
        tiles = tile_table(m, meta)
        # current order: (run1: row1 size2, row3 size1), (run2: row1, row2 size2, row4)
        assert [(t.run, t.row, t.size) for t in tiles] == \
            [(0, 1, 2), (0, 3, 1), (1, 1, 1), (1, 2, 2), (1, 4, 1)]
        dests = tile_destinations(tiles, B=2)
        # row-major tile order: (1,r0) (1,r1) (2,r1) (3,r0) (4,r1)
        assert dests[0] == 0   # row 1 of run 0 -> block 0
        assert dests[2] == 1   # row 1 of run 1 -> block 1
        assert dests[3] == 2   # row 2 of run 1
        assert dests[1] == 3   # row 3 of run 0
        assert dests[4] == 4   # row 4 of run 1
        out = finalize_nonparallel_reduce(m, meta)
        got = [(t.i, t.j) for t in region_payloads(m, out)]
        assert got == sorted(got)

    def test_oracle_equality_random_instances(self):
        rng = random.Random(99)
        for trial in range(100):
            n_m = rng.choice([4, 8, 16])
            n_r = rng.choice([4, 8, 16])
            h = min(n_m * n_r, rng.choice([32, 64, 128]))
            P = rng.choice([1, 2, 4])
            B = rng.choice([2, 4])
            if h < P * B:
                continue
            M = rng.choice([3, 4, 8]) * B
            layout = rng.choice([MIXED_COLUMN, COLUMN_MAJOR])
            inst = generate(n_m, n_r, h, layout=layout, seed=trial)
            cfg = MachineConfig(P=P, M=M, B=B)
            m, region = machine_with_instance(cfg, inst)
            if layout == MIXED_COLUMN:
                meta = prepare_unordered_map(m, region, inst)
            else:
                meta = prepare_sorted_map(m, region, inst)
            out = finalize_nonparallel_reduce(m, meta)
            assert region_payloads(m, out) == oracle_shuffle(inst)
            m.assert_memories_empty()


class TestFinalizeParallel:
    def test_row_sums_match_oracle(self):
        inst = generate(16, 16, 256, seed=13)
        cfg = MachineConfig(P=4, M=24, B=4)
        m, region = machine_with_instance(cfg, inst)
        R = parallel_run_target(inst.H, inst.N_R, 1, cfg.B)
        meta = prepare_unordered_map(m, region, inst, R)
        grid = finalize_parallel_reduce(m, meta, lambda a, b: a + b, 0,
                                        inst.N_R, 1)
        expected = oracle_combined_mxv(inst, [[1] * 16])
        got = {e.key: e.payload for e in m.region_elements(grid)}
        assert all(got[(i + 1, 1)] == expected[0][i] for i in range(16))
        m.assert_memories_empty()

    def test_single_processor_sequential(self):
        inst = generate(8, 8, 64, v=2, w=2, seed=14)
        cfg = MachineConfig(P=1, M=24, B=4)
        vectors = [[1, 2, 3, 4, 5, 6, 7, 8], [2, 2, 2, 2, 1, 1, 1, 1]]
        prod = elementary_products(inst, vectors)
        m, region = machine_with_instance(cfg, prod)
        meta = prepare_unordered_map(m, region, prod,
                                     parallel_run_target(64, 8, 2, 4))
        grid = finalize_parallel_reduce(m, meta, lambda a, b: a + b, 0, 8, 2)
        expected = oracle_combined_mxv(inst, vectors)
        got = {e.key: e.payload for e in m.region_elements(grid)}
        assert all(got[(i + 1, l + 1)] == expected[l][i]
                   for l in range(2) for i in range(8))

    def test_results_identical_across_p(self):
        inst = generate(32, 16, 512, v=2, w=4, seed=15)
        vectors = [[(3 * j + k) % 7 + 1 for j in range(32)] for k in range(2)]
        prod = elementary_products(inst, vectors)
        results = []
        for P in (1, 2, 4, 8):
            cfg = MachineConfig(P=P, M=48, B=4)
            m, region = machine_with_instance(cfg, prod)
            meta = prepare_unordered_map(
                m, region, prod, parallel_run_target(512, 16, 4, 4))
            grid = finalize_parallel_reduce(m, meta, lambda a, b: a + b, 0, 16, 4)
            results.append(sorted((e.key, e.payload)
                                  for e in m.region_elements(grid)))
        assert all(r == results[0] for r in results)
        expected = oracle_combined_mxv(inst, vectors)
        got = dict(results[0])
        assert all(got[(i + 1, l + 1)] == expected[l][i]
                   for l in range(4) for i in range(16))


class TestDirectShuffle:
    def test_budget_64(self):
        inst = generate(8, 8, 64, layout=MIXED_COLUMN, seed=16)
        cfg = MachineConfig(P=4, M=12, B=4)
        m, region = machine_with_instance(cfg, inst)
        out = direct_shuffle(m, region, inst)
        assert m.io_count <= 2 * inst.H / cfg.P
        assert region_payloads(m, out) == oracle_shuffle(inst)

    def test_single_cell_blocks_cost_two_h(self):
        inst = generate(4, 4, 12, layout=MIXED_COLUMN, seed=17)
        cfg = MachineConfig(P=1, M=3, B=1)
        m, region = machine_with_instance(cfg, inst)
        direct_shuffle(m, region, inst)
        assert m.io_count == 2 * inst.H

    def test_plan_is_externally_supplied(self):
        inst = generate(8, 8, 64, layout=MIXED_COLUMN, seed=18)
        cfg = MachineConfig(P=2, M=12, B=4)
        m, region = machine_with_instance(cfg, inst)
        out = direct_shuffle(m, region, inst, plan=make_direct_plan(inst))
        assert region_payloads(m, out) == oracle_shuffle(inst)

    def test_precondition(self):
        inst = generate(4, 4, 8, layout=MIXED_COLUMN, seed=19)
        cfg = MachineConfig(P=4, M=12, B=4)
        m, region = machine_with_instance(cfg, inst)
        with pytest.raises(SimulationError):
            direct_shuffle(m, region, inst)


class TestCompleteSort:
    def test_row_major_costs_a_scan(self):
        inst = generate(16, 16, 128, layout=ROW_MAJOR, seed=20)
        cfg = MachineConfig(P=4, M=24, B=4)
        m, region = machine_with_instance(cfg, inst)
        out = complete_sort(m, region, inst)
        assert out == region
        assert m.io_count <= region.blocks / cfg.P + 4

    def test_random_mixed_equals_oracle(self):
        inst = generate(32, 32, 1024, layout=MIXED_COLUMN, seed=21)
        cfg = MachineConfig(P=4, M=64, B=4)
        m, region = machine_with_instance(cfg, inst)
        out = complete_sort(m, region, inst)
        assert region_payloads(m, out) == oracle_shuffle(inst)
        m.assert_memories_empty()

    def test_presorted_columns_help(self):
        # same triple multiset in both layouts, long columns
        column = generate(16, 64, 1024, layout=COLUMN_MAJOR, seed=22)
        mixed = ShuffleInstance(
            column.N_M, column.N_R, column.H, column.v, column.w,
            MIXED_COLUMN, column.triples, column.seed)
        cfg = MachineConfig(P=4, M=24, B=4)
        m1, r1 = machine_with_instance(cfg, column)
        complete_sort(m1, r1, column)
        m2, r2 = machine_with_instance(cfg, mixed)
        complete_sort(m2, r2, mixed)
        assert m1.io_count <= m2.io_count

    def test_monotone_in_h(self):
        cfg = MachineConfig(P=4, M=24, B=4)
        ios = []
        for h in (256, 512, 1024):
            inst = generate(32, 32, h, layout=MIXED_COLUMN, seed=23)
            m, region = machine_with_instance(cfg, inst)
            complete_sort(m, region, inst)
            ios.append(m.io_count)
        assert ios == sorted(ios)


def test_finalize_single_sliced_run_copies_out():
    # a lone run that covers only part of its region must be materialised
    m = create_machine(MachineConfig(P=2, M=12, B=4))
    runs = presorted_runs(m, 1, 16, 4, seed=8)
    sliced = Run(runs[0].region, 4, 12)
    out = finalize_nonparallel_reduce(m, MetaRunSet(1, (sliced,)))
    assert [e.key for e in m.region_elements(out)] == \
        [e.key for e in run_elements(m, sliced)]
    m.assert_memories_empty()
