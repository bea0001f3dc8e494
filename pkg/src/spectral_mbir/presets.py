"""Bundled demo setup: a 5-bin photon-counting acquisition of a 7-tube
water/iodine/gadolinium/calcium phantom, with a measured mixing table.

These numbers ship so the toolkit can be exercised end to end without any
scanner data; configs/desk_*.toml embed the same values.
"""

from __future__ import annotations

import math

import numpy as np

from .materials import MaterialSpec
from .mixing import MixingMatrix

BIN_EDGES_KEV = (7.0, 19.0, 29.0, 38.8, 51.1, 82.6)

MATERIAL_NAMES = ("water", "iodine", "gadolinium", "calcium")

# pure-material densities (mg/mL) backing the mg/mL <-> volume-fraction
# bridge; the calcium value follows the high-concentration reference row
DENSITIES_MG_ML = {
    "water": 1000.0,
    "iodine": 4940.0,
    "gadolinium": 7910.0,
    "calcium": 1637.8,
}

ROLES = {
    "water": "solvent",
    "iodine": "contrast",
    "gadolinium": "contrast",
    "calcium": "mineral",
}

# measured per-bin LAC (1/mm) of the pure basis materials, bins x materials
MIXING_VALUES = np.array([
    [0.0301, 8.0544, 7.5169, 0.7722],
    [0.0345, 4.9786, 11.1868, 1.0905],
    [0.0253, 5.9366, 8.1421, 0.7815],
    [0.0196, 7.2125, 4.8177, 0.4259],
    [0.0177, 3.7628, 8.4091, 0.2395],
])

# solute concentrations (mg/mL) of the 6 solution tubes, by tube label
CALIBRATION_CONC_MG_ML = {
    "iodine_high": 15.86, "iodine_low": 7.93,
    "gadolinium_high": 19.66, "gadolinium_low": 9.83,
    "calcium_high": 146.29, "calcium_low": 73.14,
}
TEST_CONC_MG_ML = {
    "iodine_high": 9.52, "iodine_low": 4.76,
    "gadolinium_high": 11.79, "gadolinium_low": 5.90,
    "calcium_high": 87.77, "calcium_low": 43.89,
}

# tube order: water reference first, then each agent high before low
TUBE_ORDER = ("water", "iodine_high", "iodine_low", "gadolinium_high",
              "gadolinium_low", "calcium_high", "calcium_low")


def demo_materials() -> list[MaterialSpec]:
    return [MaterialSpec(name, DENSITIES_MG_ML[name], ROLES[name])
            for name in MATERIAL_NAMES]


def demo_mixing_matrix() -> MixingMatrix:
    return MixingMatrix(MIXING_VALUES.copy(), BIN_EDGES_KEV, MATERIAL_NAMES)


def demo_tube_layout(ring_radius_mm: float = 6.5,
                     tube_radius_mm: float = 2.2) -> list[tuple[float, float, float]]:
    """(cx, cy, radius) of the 7 tubes: a ring starting at 12 o'clock,
    clockwise, in TUBE_ORDER."""
    out = []
    for k in range(len(TUBE_ORDER)):
        theta = 0.5 * math.pi - 2.0 * math.pi * k / len(TUBE_ORDER)
        out.append((ring_radius_mm * math.cos(theta),
                    ring_radius_mm * math.sin(theta),
                    tube_radius_mm))
    return out


def tube_solute_conc(column: str) -> list[tuple[str | None, float]]:
    """(solute, mg/mL) per tube in TUBE_ORDER for the 'calibration' or 'test'
    concentration column."""
    table = {"calibration": CALIBRATION_CONC_MG_ML, "test": TEST_CONC_MG_ML}[column]
    out: list[tuple[str | None, float]] = [(None, 0.0)]
    for label in TUBE_ORDER[1:]:
        solute = label.rsplit("_", 1)[0]
        out.append((solute, table[label]))
    return out
