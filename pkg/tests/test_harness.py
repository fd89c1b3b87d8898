import json

import pytest

from pemshuffle import harness
from pemshuffle.cli import main as cli_main
from pemshuffle.harness import (
    CalibrationError,
    ExperimentSpec,
    Report,
    calibrate,
    parse_spec_text,
    run_sweep,
)

SMALL_GRID = """
# two-point grid
N_M = [16]
N_R = [16]
H = [128, 256]
v = [1]
w = [1]
P = [4]
M = [24]
B = [4]
algorithms = [complete_sort]
seeds = [0]
"""


class TestSpecParsing:
    def test_parse(self):
        spec = parse_spec_text(SMALL_GRID)
        assert spec.grid["H"] == [128, 256]
        assert spec.algorithms == ["complete_sort"]
        assert spec.seeds == [0]
        assert len(spec.points()) == 2

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            parse_spec_text("frobnicate = 3\n")

    def test_unknown_algorithm(self):
        with pytest.raises(ValueError):
            parse_spec_text("algorithms = [sort_of_sorting]\n")

    def test_comments_and_blanks(self):
        spec = parse_spec_text("\n# hi\nH = [64]\nseeds = [1, 2]\n")
        assert spec.grid["H"] == [64] and spec.seeds == [1, 2]


class TestSweep:
    def test_two_points_pass(self):
        spec = parse_spec_text(SMALL_GRID)
        report = run_sweep(spec)
        assert len(report.rows) == 2
        assert all(r["status"] == "ok" and r["correct"] == "pass"
                   for r in report.rows)

    def test_empty_grid_gives_header_only(self):
        spec = parse_spec_text(SMALL_GRID.replace("H = [128, 256]", "H = []"))
        report = run_sweep(spec)
        assert report.rows == []
        assert report.to_csv().count("\n") == 1

    def test_seed_repetition_identical(self):
        spec = parse_spec_text(SMALL_GRID)
        spec.seeds = [3, 3]
        report = run_sweep(spec)
        assert report.rows[0] == report.rows[1]

    def test_rerun_byte_identical(self):
        spec = parse_spec_text(SMALL_GRID)
        spec.algorithms = ["complete_sort", "unordered_nonparallel",
                           "prim_prefix_sum"]
        assert run_sweep(spec).to_csv() == run_sweep(spec).to_csv()

    def test_infeasible_points_skipped_with_reason(self):
        spec = parse_spec_text(SMALL_GRID)
        spec.grid["P"] = [128]  # H/P < B for every H in the grid
        report = run_sweep(spec)
        assert all(r["status"] == "skipped" and r["reason"] == "H/P < B"
                   for r in report.rows)


class TestCalibrate:
    def synthetic(self, rows):
        return Report(rows=[{"algorithm": "x", "status": "ok", "P": 4,
                             "measured_io": m, "leading_term": lt,
                             "correct": "pass", "potential": "na"}
                            for m, lt in rows])

    def test_exact_leading_gives_unit_constants(self):
        rep = self.synthetic([(100.0, 100.0)] * 10)
        consts = calibrate(rep)
        assert consts["x"] == {"C1": 1.0, "C2": 0.0}

    def test_requires_enough_rows(self):
        rep = self.synthetic([(1.0, 1.0)] * 3)
        with pytest.raises(CalibrationError):
            calibrate(rep)

    def test_zero_leading_failure(self):
        rows = [(0.0, 0.0)] * 10          # measured 0 with no leading: fine
        rep = self.synthetic(rows)
        consts = calibrate(rep)
        assert consts["x"]["C2"] == 0.0
        # a zero-leading row with measured I/O pins C2 instead of failing
        rep2 = self.synthetic([(8.0, 0.0)] * 10)
        assert calibrate(rep2)["x"]["C2"] == 4.0

    def test_direct_shuffle_constant_near_two(self):
        spec = ExperimentSpec(
            grid={"N_M": [32], "N_R": [32], "H": [256, 512, 1024], "v": [1],
                  "w": [1], "P": [1, 2], "M": [24], "B": [4]},
            algorithms=["direct_shuffle"], seeds=[0, 1])
        consts = calibrate(run_sweep(spec))
        assert 1.0 <= consts["direct_shuffle"]["C1"] <= 2.5

    def test_prefix_sum_microbench_pins_c2(self):
        spec = ExperimentSpec(
            grid={"N_M": [4], "N_R": [4], "H": [16], "v": [1], "w": [1],
                  "P": [2, 4, 8, 16, 32], "M": [24], "B": [4]},
            algorithms=["prim_prefix_sum"], seeds=[0, 1])
        consts = calibrate(run_sweep(spec))
        assert consts["prim_prefix_sum"]["C1"] == 0.0
        assert 0 < consts["prim_prefix_sum"]["C2"] <= 4

    def test_constants_stable_across_reruns(self):
        spec = parse_spec_text(SMALL_GRID)
        spec.seeds = [0, 1, 2, 3, 4]
        a = calibrate(run_sweep(spec), min_rows=1)
        b = calibrate(run_sweep(spec), min_rows=1)
        assert a == b


class TestVerifyAndBounds:
    def test_verify_passes_on_small_grid(self):
        spec = parse_spec_text(SMALL_GRID)
        spec.algorithms = ["complete_sort", "direct_shuffle"]
        report, verdicts = harness.verify(spec)
        assert verdicts.all_ok(), verdicts.failures

    def test_bounds_catalog_shape(self):
        spec = parse_spec_text(SMALL_GRID)
        text = harness.bounds_catalog(spec)
        lines = text.strip().split("\n")
        assert lines[0].startswith("formula_id,")
        assert len(lines) == 1 + 2 * 16
        assert any(line.split(",")[-1] == "False" for line in lines[1:])


class TestCli:
    def write_grid(self, tmp_path):
        path = tmp_path / "grid.cfg"
        path.write_text(SMALL_GRID)
        return str(path)

    def test_sweep_cli(self, tmp_path):
        grid = self.write_grid(tmp_path)
        out = tmp_path / "report.csv"
        assert cli_main(["sweep", "--grid", grid, "--out", str(out)]) == 0
        text = out.read_text()
        assert text.startswith("algorithm,seed,")
        assert "complete_sort" in text

    def test_sweep_cli_algorithm_override_and_seed(self, tmp_path):
        grid = self.write_grid(tmp_path)
        out = tmp_path / "report.csv"
        assert cli_main(["sweep", "--grid", grid, "--out", str(out),
                         "--algorithms", "direct_shuffle", "--seed", "7"]) == 0
        lines = out.read_text().strip().split("\n")[1:]
        assert all(line.startswith("direct_shuffle,7,") for line in lines)

    def test_calibrate_cli(self, tmp_path):
        grid = self.write_grid(tmp_path)
        path = tmp_path / "grid.cfg"
        path.write_text(SMALL_GRID.replace("seeds = [0]",
                                           "seeds = [0, 1, 2, 3, 4]"))
        out = tmp_path / "constants.json"
        assert cli_main(["calibrate", "--grid", str(path),
                         "--out", str(out)]) == 0
        consts = json.loads(out.read_text())
        assert "complete_sort" in consts
        assert consts["complete_sort"]["C1"] <= 32

    def test_verify_cli(self, tmp_path):
        grid = self.write_grid(tmp_path)
        assert cli_main(["verify", "--grid", grid]) == 0

    def test_bounds_cli(self, tmp_path):
        grid = self.write_grid(tmp_path)
        out = tmp_path / "bounds.csv"
        assert cli_main(["bounds", "--grid", grid, "--out", str(out)]) == 0
        assert out.read_text().startswith("formula_id,")

    def test_erew_policy_flag(self, tmp_path):
        grid = self.write_grid(tmp_path)
        out = tmp_path / "report.csv"
        # primitives are EREW-safe end to end
        assert cli_main(["sweep", "--grid", grid, "--out", str(out),
                         "--algorithms", "prim_prefix_sum,prim_gather",
                         "--policy", "erew"]) == 0
