"""Acceptance sweep definitions shared by the test suite.

Run ``python3 tests/acceptance_specs.py`` to regenerate the frozen
calibration constants in tests/data/calibration.json after an
intentional algorithm change.
"""

import json
import os

from pemshuffle.harness import ExperimentSpec, Report, calibrate, run_sweep

ALL_PIPELINES = [
    "direct_shuffle", "complete_sort",
    "unordered_nonparallel", "sorted_nonparallel", "parallel_map_nonparallel",
    "unordered_parallel", "sorted_parallel", "parallel_map_parallel",
    "prim_gather", "prim_scatter", "prim_prefix_sum",
]

# Asymptotic-tracking configuration: H doubles across 2^10..2^14 at
# fixed (P, B, M, N_R), so measured/leading ratios expose any drift.
BAND_SPEC = ExperimentSpec(
    grid={"N_M": [256], "N_R": [64], "H": [1024, 2048, 4096, 8192, 16384],
          "v": [2], "w": [2], "P": [4], "M": [64], "B": [8]},
    algorithms=ALL_PIPELINES,
    seeds=[0],
)

# Minimum-memory configuration (M = 3B) with more processors.
TIGHT_SPEC = ExperimentSpec(
    grid={"N_M": [128], "N_R": [32], "H": [1024, 4096],
          "v": [1], "w": [1], "P": [8], "M": [24], "B": [4]},
    algorithms=ALL_PIPELINES,
    seeds=[0, 1],
)

CALIBRATION_PATH = os.path.join(os.path.dirname(__file__), "data",
                                "calibration.json")


def combined_report() -> Report:
    band = run_sweep(BAND_SPEC)
    tight = run_sweep(TIGHT_SPEC)
    return Report(band.rows + tight.rows)


def regenerate() -> dict:
    constants = calibrate(combined_report(), min_rows=2)
    os.makedirs(os.path.dirname(CALIBRATION_PATH), exist_ok=True)
    with open(CALIBRATION_PATH, "w", encoding="utf-8") as fh:
        json.dump(constants, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return constants


def frozen_constants() -> dict:
    with open(CALIBRATION_PATH, "r", encoding="utf-8") as fh:
        return json.load(fh)


if __name__ == "__main__":
    for algo, c in sorted(regenerate().items()):
        print(f"{algo}: C1={c['C1']} C2={c['C2']}")
