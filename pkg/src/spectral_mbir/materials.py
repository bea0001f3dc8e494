"""Basis materials and the concentration <-> volume-fraction bridge."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError

ROLES = ("solvent", "contrast", "mineral")


@dataclass(frozen=True)
class MaterialSpec:
    """One basis material.  ``density_mg_ml`` is the density of the pure
    material, so concentration / density is the volume fraction it occupies
    in solution."""

    name: str
    density_mg_ml: float
    role: str = "solvent"

    def __post_init__(self):
        if self.density_mg_ml <= 0.0:
            raise ConfigError(f"material {self.name!r}: density must be positive")
        if self.role not in ROLES:
            raise ConfigError(f"material {self.name!r}: role must be one of {ROLES}")
        if not self.name or any(ch.isspace() for ch in self.name):
            raise ConfigError(f"material name {self.name!r} must be non-empty "
                              "and contain no whitespace")


def concentration_to_volume_fraction(conc_mg_ml: float, mat: MaterialSpec) -> float:
    """Volume fraction occupied by ``conc_mg_ml`` of ``mat`` in solution."""
    if not 0.0 <= conc_mg_ml <= mat.density_mg_ml:
        raise ConfigError(
            f"concentration {conc_mg_ml} mg/mL outside [0, {mat.density_mg_ml}] "
            f"for material {mat.name!r}")
    return conc_mg_ml / mat.density_mg_ml


def volume_fraction_to_concentration(fraction: float, mat: MaterialSpec) -> float:
    """Inverse of :func:`concentration_to_volume_fraction`."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"volume fraction {fraction} outside [0, 1]")
    return fraction * mat.density_mg_ml
