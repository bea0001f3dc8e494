"""Run configuration: one TOML file drives every CLI command.

Sections: [geometry], [bins], [[materials]], [phantom] (+ [[phantom.tubes]]),
[simulation], [optimizer], [calibration], [paths], [report].  Diagnostics
name the offending key.  Relative paths are resolved against the current
working directory.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .geometry import FanBeamGeometry
from .materials import MaterialSpec
from .phantom import PhantomSpec, TubeSpec


@dataclass(frozen=True)
class PathsConfig:
    output_dir: str = "out"
    sinogram: str = "out/sinogram.sin"
    truth_image: str = "out/truth.img"
    mixing: str = "out/mixing.txt"
    sim_mixing: str = ""            # forward-model mixing file for simulate
    recon_prefix: str = "out/recon"
    cost_log: str = "out/cost_log.csv"
    checkpoint: str = "out/checkpoint.img"
    report_dir: str = "out/report"


@dataclass(frozen=True)
class OptimizerConfig:
    sigma: float = 0.0              # 0 = auto (1% of median data curvature)
    iterations: int = 150
    tolerance: float = 0.0
    visit_order: str = "raster"
    seed: int = 1
    checkpoint_every: int = 0
    resume: bool = False


@dataclass(frozen=True)
class SimulationConfig:
    i0_per_bin: tuple[float, ...]
    noiseless: bool = False
    defect_rate: float = 0.0
    repair_weight_factor: float = 0.5


@dataclass(frozen=True)
class CalibrationConfig:
    roi_fraction: float = 0.5
    lac_images: tuple[str, ...] = ()
    cond_limit: float = 1e12
    iterations: int = 150           # per-bin scalar reconstruction sweeps
    tolerance: float = 0.0


@dataclass(frozen=True)
class RunConfig:
    geometry: FanBeamGeometry
    bin_edges_kev: tuple[float, ...]
    materials: tuple[MaterialSpec, ...]
    phantom: PhantomSpec
    simulation: SimulationConfig
    optimizer: OptimizerConfig
    calibration: CalibrationConfig
    paths: PathsConfig
    report_figures: bool = True

    @property
    def n_bins(self) -> int:
        return len(self.bin_edges_kev) - 1

    def material_names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.materials)


def _get(table, key, types, section, default=None, required=False):
    if key not in table:
        if required:
            raise ConfigError(f"[{section}] missing required key {key!r}")
        return default
    value = table[key]
    if not isinstance(value, types) or isinstance(value, bool) and bool not in (
            types if isinstance(types, tuple) else (types,)):
        raise ConfigError(f"[{section}] key {key!r} has wrong type "
                          f"({type(value).__name__})")
    return value


def _num(table, key, section, default=None, required=False):
    v = _get(table, key, (int, float), section, default, required)
    return None if v is None else float(v)


def load_config(path) -> RunConfig:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ConfigError(f"config file {path!r} does not exist")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path!r} is not valid TOML: {exc}") from exc

    geom_t = raw.get("geometry")
    if not isinstance(geom_t, dict):
        raise ConfigError("missing [geometry] section")
    angular_deg = _num(geom_t, "angular_range_deg", "geometry", default=360.0)
    geometry = FanBeamGeometry(
        n_views=int(_num(geom_t, "n_views", "geometry", required=True)),
        n_channels=int(_num(geom_t, "n_channels", "geometry", required=True)),
        det_pitch_mm=_num(geom_t, "det_pitch_mm", "geometry", required=True),
        image_n=int(_num(geom_t, "image_n", "geometry", required=True)),
        voxel_mm=_num(geom_t, "voxel_mm", "geometry", required=True),
        fov_mm=_num(geom_t, "fov_mm", "geometry", required=True),
        source_iso_mm=_num(geom_t, "source_iso_mm", "geometry", default=200.0),
        source_det_mm=_num(geom_t, "source_det_mm", "geometry", default=250.0),
        angular_range_rad=math.radians(angular_deg),
    )

    bins_t = raw.get("bins")
    if not isinstance(bins_t, dict) or "edges_kev" not in bins_t:
        raise ConfigError("missing [bins] edges_kev")
    edges = tuple(float(b) for b in bins_t["edges_kev"])
    if len(edges) < 2 or any(b >= a for b, a in zip(edges[1:], edges)):
        raise ConfigError("[bins] edges_kev must be strictly increasing, length >= 2")

    mats_raw = raw.get("materials")
    if not isinstance(mats_raw, list) or not mats_raw:
        raise ConfigError("missing [[materials]] entries")
    materials = tuple(
        MaterialSpec(
            name=str(_get(m, "name", str, "materials", required=True)),
            density_mg_ml=_num(m, "density_mg_ml", "materials", required=True),
            role=str(_get(m, "role", str, "materials", default="solvent")),
        ) for m in mats_raw)
    if len(edges) - 1 < len(materials):
        raise ConfigError("need at least as many energy bins as materials")

    ph_t = raw.get("phantom")
    if not isinstance(ph_t, dict):
        raise ConfigError("missing [phantom] section")
    known = {m.name for m in materials}
    tubes = []
    for i, t in enumerate(ph_t.get("tubes", [])):
        solute = _get(t, "solute", str, f"phantom.tubes[{i}]")
        if solute is not None and solute not in known:
            raise ConfigError(f"[phantom.tubes[{i}]] unknown solute {solute!r}")
        center = t.get("center_mm")
        if (not isinstance(center, list) or len(center) != 2
                or not all(isinstance(c, (int, float)) for c in center)):
            raise ConfigError(f"[phantom.tubes[{i}]] center_mm must be [x, y]")
        tubes.append(TubeSpec(
            center_mm=(float(center[0]), float(center[1])),
            radius_mm=_num(t, "radius_mm", f"phantom.tubes[{i}]", required=True),
            solute=solute,
            conc_mg_ml=_num(t, "conc_mg_ml", f"phantom.tubes[{i}]", default=0.0),
        ))
    phantom = PhantomSpec(
        tubes=tuple(tubes),
        background_radius_mm=_num(ph_t, "background_radius_mm", "phantom",
                                  required=True),
        grid_n=geometry.image_n,
        voxel_mm=geometry.voxel_mm,
    )

    sim_t = raw.get("simulation", {})
    i0 = sim_t.get("i0_per_bin")
    if (not isinstance(i0, list) or len(i0) != len(edges) - 1
            or not all(isinstance(v, (int, float)) for v in i0)):
        raise ConfigError("[simulation] i0_per_bin must list one count level per bin")
    defect_rate = _num(sim_t, "defect_rate", "simulation", default=0.0)
    if not 0.0 <= defect_rate <= 0.05:
        raise ConfigError("[simulation] defect_rate outside [0, 0.05]")
    simulation = SimulationConfig(
        i0_per_bin=tuple(float(v) for v in i0),
        noiseless=bool(_get(sim_t, "noiseless", bool, "simulation", default=False)),
        defect_rate=defect_rate,
        repair_weight_factor=_num(sim_t, "repair_weight_factor", "simulation",
                                  default=0.5),
    )

    opt_t = raw.get("optimizer", {})
    optimizer = OptimizerConfig(
        sigma=_num(opt_t, "sigma", "optimizer", default=0.0),
        iterations=int(_num(opt_t, "iterations", "optimizer", default=150)),
        tolerance=_num(opt_t, "tolerance", "optimizer", default=0.0),
        visit_order=str(_get(opt_t, "visit_order", str, "optimizer",
                             default="raster")),
        seed=int(_num(opt_t, "seed", "optimizer", default=1)),
        checkpoint_every=int(_num(opt_t, "checkpoint_every", "optimizer", default=0)),
        resume=bool(_get(opt_t, "resume", bool, "optimizer", default=False)),
    )
    if optimizer.visit_order not in ("raster", "shuffled"):
        raise ConfigError("[optimizer] visit_order must be 'raster' or 'shuffled'")
    if optimizer.iterations < 0 or optimizer.sigma < 0.0:
        raise ConfigError("[optimizer] iterations and sigma must be nonnegative")

    cal_t = raw.get("calibration", {})
    roi_fraction = _num(cal_t, "roi_fraction", "calibration", default=0.5)
    if not 0.0 < roi_fraction < 1.0:
        raise ConfigError("[calibration] roi_fraction outside (0, 1)")
    lac_images = cal_t.get("lac_images", [])
    if not isinstance(lac_images, list) or not all(isinstance(p, str) for p in lac_images):
        raise ConfigError("[calibration] lac_images must be a list of paths")
    if lac_images and len(lac_images) != len(edges) - 1:
        raise ConfigError("[calibration] lac_images must name one file per bin")
    calibration = CalibrationConfig(
        roi_fraction=roi_fraction,
        lac_images=tuple(lac_images),
        cond_limit=_num(cal_t, "cond_limit", "calibration", default=1e12),
        iterations=int(_num(cal_t, "iterations", "calibration", default=150)),
        tolerance=_num(cal_t, "tolerance", "calibration", default=0.0),
    )

    paths_t = raw.get("paths", {})
    defaults = PathsConfig()
    paths = PathsConfig(**{
        key: str(_get(paths_t, key, str, "paths", default=getattr(defaults, key)))
        for key in defaults.__dataclass_fields__})

    report_t = raw.get("report", {})
    figures = bool(_get(report_t, "figures", bool, "report", default=True))

    return RunConfig(geometry=geometry, bin_edges_kev=edges, materials=materials,
                     phantom=phantom, simulation=simulation, optimizer=optimizer,
                     calibration=calibration, paths=paths, report_figures=figures)


def require_readable(path: str, key: str) -> str:
    """Existence check with the config key named in the diagnostic."""
    if not path:
        raise ConfigError(f"[paths] {key} is not set")
    if not os.path.exists(path):
        raise ConfigError(f"[paths] {key}={path!r} does not exist")
    return path
