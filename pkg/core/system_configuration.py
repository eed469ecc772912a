# core/system_configuration.py
"""
Run configuration for the Hartree-Fock solver.

A run is described by an INI file ([system], [grid], [basis], [solver],
[output]) and a system file listing the nuclei. The manager merges the INI
on top of the JSON defaults, validates the result as a RunConfig and writes
the resolved config next to the outputs.
"""

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from core.dynamic_config_manager import DynamicConfigManager
from core.errors import ConfigError, ParseError
from core.fock_operator import RepulsionMode
from core.grid import (
    BasisFamily,
    BasisMode,
    BoundaryCondition,
    GridSpec,
    NonUniformGrid,
    NucleusList,
    build_centered_tensor_grid,
    build_uniform_grid,
)
from core.logging_setup import get_logger

logger = get_logger("system_configuration")

ANGSTROM_TO_BOHR = 1.8897259886


@dataclass
class NucleusEntry:
    """One nucleus of a system file, coordinates in atomic units"""
    charge: float
    position: Tuple[float, float, float]
    symbol: str = ""
    line_number: int = 0


@dataclass
class SystemFile:
    """Parsed system definition: nuclei, electron-pair count, optional box override"""
    nuclei: List[NucleusEntry]
    m: int
    units: str = "bohr"
    box: Optional[Tuple[int, int, int]] = None
    source: str = ""
    centered_grid: Optional[NonUniformGrid] = field(default=None, repr=False)
    angstrom_to_bohr: float = ANGSTROM_TO_BOHR

    def __post_init__(self):
        if self.m < 1:
            raise ParseError(f"electron-pair count m must be >= 1, got {self.m}")
        if not self.nuclei:
            raise ParseError("system file lists no nuclei")
        for entry in self.nuclei:
            if not np.all(np.isfinite(entry.position)):
                raise ParseError(f"non-finite coordinate {entry.position}", entry.line_number)

    @property
    def charges(self) -> List[float]:
        return [n.charge for n in self.nuclei]

    def positions(self, units: str = "bohr") -> np.ndarray:
        pos = np.array([n.position for n in self.nuclei], dtype=float)
        return pos / self.angstrom_to_bohr if units == "angstrom" else pos

    def grid_origin(self, grid: GridSpec) -> np.ndarray:
        """Coordinate of node (0, 0, 0); half a cell inside the centered grid when one was built"""
        if self.centered_grid is None:
            return np.zeros(3)
        return np.array([b[0] for b in self.centered_grid.breakpoints]) + 0.5 * grid.h

    def place_on_grid(self, grid: GridSpec) -> Tuple[NucleusList, float]:
        """Snap every nucleus to its nearest grid index; returns the list and the largest shift (a.u.)"""
        origin = self.grid_origin(grid)
        entries, shift = [], 0.0
        for n in self.nuclei:
            local = np.asarray(n.position) - origin
            index = grid.nearest_index(local)
            snapped = grid.position(index)
            delta = local - snapped
            delta -= np.rint(delta / np.array(grid.box_lengths)) * np.array(grid.box_lengths)
            shift = max(shift, float(np.linalg.norm(delta)))
            entries.append((n.charge, index))
        if shift > 1e-9 * grid.h:
            logger.warning("nuclei snapped to grid", extra={"max_shift": shift, "h": grid.h})
        return NucleusList.from_entries(entries), shift


def parse_system(
    path: str,
    elements: Optional[Dict[str, int]] = None,
    angstrom_to_bohr: float = ANGSTROM_TO_BOHR,
    centered_h: Optional[float] = None,
) -> SystemFile:
    """
    Parse a system file.

    Format, one item per line, '#' starts a comment:
        units=angstrom | units=bohr
        m=<electron pairs>
        box=<n_i> <n_j> <n_k>          (optional)
        <Symbol> <x> <y> <z>           (H through Ar)
        Z=<charge> <x> <y> <z>         (explicit charge)

    Args:
        path: system file
        elements: symbol -> charge table, H through Ar when omitted
        angstrom_to_bohr: unit conversion factor
        centered_h: when given, also build the non-uniform grid with every
            nucleus at a cell center

    Returns:
        SystemFile with coordinates in atomic units
    """
    elements = elements or default_elements()
    text = Path(path).read_text(encoding="utf-8")
    units: Optional[str] = None
    m: Optional[int] = None
    box: Optional[Tuple[int, int, int]] = None
    raw: List[Tuple[float, List[float], str, int]] = []

    for line_number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        for chunk in (c.strip() for c in content.split("/") if c.strip()):
            head, _, rest = chunk.partition("=")
            key = head.strip().lower()
            if rest and key == "units":
                units = rest.strip().lower()
                if units in ("a.u.", "au"):
                    units = "bohr"
                if units not in ("angstrom", "bohr"):
                    raise ParseError(f"unknown units {rest.strip()!r}", line_number)
                continue
            if rest and key == "m":
                try:
                    m = int(rest.strip())
                except ValueError as exc:
                    raise ParseError(f"m must be an integer, got {rest.strip()!r}", line_number) from exc
                continue
            if rest and key == "box":
                try:
                    values = [int(v) for v in rest.split()]
                except ValueError as exc:
                    raise ParseError(f"box needs three integers, got {rest.strip()!r}", line_number) from exc
                if len(values) != 3:
                    raise ParseError(f"box needs three integers, got {len(values)}", line_number)
                box = tuple(values)
                continue
            raw.append(_parse_nucleus(chunk, elements, line_number))

    if m is None:
        raise ParseError("missing electron-pair count 'm='")
    units = units or "bohr"
    scale = angstrom_to_bohr if units == "angstrom" else 1.0
    nuclei = [NucleusEntry(q, tuple(float(v) * scale for v in xyz), sym, ln) for q, xyz, sym, ln in raw]
    system = SystemFile(nuclei, m, units, box, str(path), angstrom_to_bohr=angstrom_to_bohr)
    if centered_h is not None:
        system.centered_grid = build_centered_tensor_grid(system.positions(), centered_h)
    logger.info("system parsed", extra={"path": str(path), "nuclei": len(nuclei), "m": m, "units": units})
    return system


def _parse_nucleus(chunk: str, elements: Dict[str, int], line_number: int) -> Tuple[float, List[float], str, int]:
    tokens = chunk.split()
    if len(tokens) != 4:
        raise ParseError(f"expected '<element> x y z', got {chunk!r}", line_number)
    label = tokens[0]
    if label.upper().startswith("Z="):
        try:
            charge = float(label[2:])
        except ValueError as exc:
            raise ParseError(f"bad explicit charge {label!r}", line_number) from exc
        symbol = ""
    else:
        symbol = label[:1].upper() + label[1:].lower()
        if symbol not in elements:
            raise ParseError(f"unknown element {label!r}; known symbols: {', '.join(elements)}", line_number)
        charge = float(elements[symbol])
    try:
        xyz = [float(v) for v in tokens[1:]]
    except ValueError as exc:
        raise ParseError(f"bad coordinate in {chunk!r}", line_number) from exc
    if not all(np.isfinite(xyz)):
        raise ParseError(f"non-finite coordinate in {chunk!r}", line_number)
    return charge, xyz, symbol, line_number


def default_elements() -> Dict[str, int]:
    symbols = ["H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar"]
    return {s: z for z, s in enumerate(symbols, start=1)}


# ---------------------------------------------------------------------------
# RunConfig
# ---------------------------------------------------------------------------

class RunConfig(BaseModel):
    """Validated, fully resolved run settings"""
    model_config = ConfigDict(extra="forbid")

    system_path: str
    n: Tuple[int, int, int] = (8, 8, 8)
    h: float = 1.0
    centered_h: Optional[float] = None
    degree: int = 0
    boundary: str = "periodic"
    basis_mode: str = "general"
    vee_mode: str = "exact"
    rank1_norm: str = "frobenius"

    eta: float = 1e-10
    drop_tol: float = 0.0
    exact_pairs: bool = True

    inner_tol: float = 1e-8
    outer_tol: float = 1e-8
    max_outer: int = Field(100, ge=1)
    maxspace: int = Field(30, ge=2)
    warm_start: bool = False
    warm_max_outer: int = Field(50, ge=1)
    mixing: float = Field(0.0, ge=0.0, lt=1.0)
    preconditioner: str = "circulant_fit"
    seed: int = 0
    guard: float = 1e-12
    guard_shift: float = 1e-10
    band_crossover: Optional[float] = None

    storage: str = "dense"
    tensor_tol: float = 1e-8
    tensor_rank_max: int = Field(64, ge=1)

    cache_dir: str = ".hf_cache"
    output_dir: str = "runs"
    report_format: str = "text"
    deterministic: bool = True
    threads: int = Field(1, ge=1)

    @field_validator("eta", "inner_tol", "outer_tol", "tensor_tol", "h", "centered_h", "guard", "guard_shift", "band_crossover")
    @classmethod
    def _positive(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and not v > 0:
            raise ValueError(f"must be positive, got {v}")
        return v

    @field_validator("drop_tol")
    @classmethod
    def _nonnegative(cls, v: float) -> float:
        if v < 0:
            raise ValueError(f"must be >= 0, got {v}")
        return v

    @field_validator("degree")
    @classmethod
    def _degree(cls, v: int) -> int:
        if v not in (0, 1):
            raise ValueError(f"basis degree must be 0 or 1, got {v}")
        return v

    @field_validator("boundary")
    @classmethod
    def _boundary(cls, v: str) -> str:
        return BoundaryCondition(v.lower()).value

    @field_validator("basis_mode")
    @classmethod
    def _basis_mode(cls, v: str) -> str:
        return BasisMode(v.lower()).value

    @field_validator("vee_mode")
    @classmethod
    def _vee_mode(cls, v: str) -> str:
        RepulsionMode.parse(v)
        return v.strip().lower()

    @field_validator("storage")
    @classmethod
    def _storage(cls, v: str) -> str:
        if v not in ("dense", "tensor"):
            raise ValueError(f"storage must be dense or tensor, got {v!r}")
        return v

    @field_validator("report_format")
    @classmethod
    def _report_format(cls, v: str) -> str:
        if v not in ("text", "json", "csv", "excel"):
            raise ValueError(f"unknown report format {v!r}")
        return v

    @field_validator("preconditioner")
    @classmethod
    def _preconditioner(cls, v: str) -> str:
        if v not in ("kinetic_inverse", "circulant_fit"):
            raise ValueError(f"unknown preconditioner {v!r}")
        return v

    @model_validator(mode="after")
    def _consistent(self) -> "RunConfig":
        if self.boundary != "periodic":
            raise ValueError("the SCF solver needs periodic boundaries")
        if self.degree == 1 and self.vee_mode == "exact" and not self.exact_pairs:
            raise ValueError("exact repulsion on the hat basis needs exact_pairs = true")
        if self.warm_start and self.vee_mode in ("none", "rank1"):
            raise ValueError(f"warm start has nothing to do for vee_mode={self.vee_mode}")
        if min(self.n) < 2 * self.degree + 1:
            raise ValueError(f"grid {self.n} too small for degree {self.degree}")
        return self

    def grid(self) -> GridSpec:
        return build_uniform_grid(*self.n, self.h, self.degree, self.boundary)

    def basis(self) -> BasisFamily:
        return BasisFamily(self.degree, BasisMode(self.basis_mode))


# INI section -> RunConfig fields it may set
SECTION_KEYS: Dict[str, Tuple[str, ...]] = {
    "system": ("system_path",),
    "grid": ("n", "h", "centered_h", "boundary"),
    "basis": ("degree", "basis_mode", "vee_mode", "rank1_norm", "eta", "drop_tol", "exact_pairs"),
    "solver": (
        "inner_tol", "outer_tol", "max_outer", "maxspace", "warm_start", "warm_max_outer",
        "mixing", "preconditioner", "seed", "guard", "guard_shift", "band_crossover",
        "storage", "tensor_tol", "tensor_rank_max", "deterministic", "threads",
    ),
    "output": ("cache_dir", "output_dir", "report_format"),
}

_INI_ALIASES = {"path": "system_path", "file": "system_path", "mode": "basis_mode", "vee": "vee_mode", "format": "report_format"}


class SystemConfigurationManager:
    """
    Resolves run configs: JSON defaults <- INI file <- explicit overrides,
    then HF_CACHE_DIR. Validation errors surface as ConfigError.
    """

    def __init__(self, config_manager: Optional[DynamicConfigManager] = None):
        self.config_manager = config_manager or DynamicConfigManager()

    def defaults(self, degree: int = 0) -> Dict[str, Any]:
        cm = self.config_manager
        solver = cm.get("solver", {})
        return {
            "eta": cm.default_eta(degree),
            "drop_tol": cm.get("integrals.drop_tol", 0.0),
            "exact_pairs": cm.get("integrals.exact_pairs", True),
            "inner_tol": solver.get("inner_tol", 1e-8),
            "outer_tol": solver.get("outer_tol", 1e-8),
            "max_outer": solver.get("max_outer", 100),
            "maxspace": solver.get("maxspace", 30),
            "warm_start": solver.get("warm_start", False),
            "warm_max_outer": solver.get("warm_max_outer", 50),
            "mixing": solver.get("mixing", 0.0),
            "preconditioner": solver.get("preconditioner", "circulant_fit"),
            "seed": solver.get("seed", 0),
            "guard": solver.get("guard", 1e-12),
            "guard_shift": solver.get("guard_shift", 1e-10),
            "band_crossover": cm.get("integrals.band_crossover"),
            "tensor_tol": cm.get("tensor.tol", 1e-8),
            "tensor_rank_max": cm.get("tensor.rank_max", 64),
            "cache_dir": cm.get("output.cache_directory", ".hf_cache"),
            "output_dir": cm.get("output.directory", "runs"),
            "report_format": cm.get("output.report_format", "text"),
        }

    def read_ini(self, path: str) -> Dict[str, Any]:
        parser = configparser.ConfigParser()
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        values: Dict[str, Any] = {}
        for section in parser.sections():
            allowed = SECTION_KEYS.get(section)
            if allowed is None:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                name = _INI_ALIASES.get(key, key)
                if name not in allowed:
                    raise ConfigError(f"{path}: key {key!r} does not belong in [{section}]")
                values[name] = _coerce(name, raw)
        if "system_path" in values and not os.path.isabs(values["system_path"]):
            values["system_path"] = str(Path(path).parent / values["system_path"])
        return values

    def resolve(self, ini_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
        values: Dict[str, Any] = {}
        if ini_path:
            values.update(self.read_ini(ini_path))
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        merged = self.defaults(int(values.get("degree", 0)))
        merged.update(values)
        if os.getenv("HF_CACHE_DIR"):
            merged["cache_dir"] = os.environ["HF_CACHE_DIR"]
        try:
            config = RunConfig(**merged)
        except ValidationError as exc:
            raise ConfigError(f"invalid run config: {exc}") from exc
        logger.debug("run config resolved", extra={"config": config.model_dump()})
        return config

    def write_resolved(self, config: RunConfig, directory: str) -> Path:
        """Write resolved_config.ini next to the run outputs"""
        parser = configparser.ConfigParser()
        data = config.model_dump()
        for section, keys in SECTION_KEYS.items():
            parser[section] = {key: _render(data[key]) for key in keys if data[key] is not None}
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "resolved_config.ini"
        with open(path, "w", encoding="utf-8") as fh:
            parser.write(fh)
        return path

    def load_system(self, config: RunConfig) -> SystemFile:
        return parse_system(
            config.system_path,
            self.config_manager.elements() or None,
            float(self.config_manager.get("units.angstrom_to_bohr", ANGSTROM_TO_BOHR)),
            centered_h=config.centered_h,
        )

    def export_configuration(self, config: RunConfig) -> Dict[str, Any]:
        return {"configuration": config.model_dump(), "base": self.config_manager.get_stats()}


def _coerce(name: str, raw: str) -> Any:
    raw = raw.strip()
    if name == "n":
        parts = raw.replace(",", " ").split()
        if len(parts) == 1:
            parts = parts * 3
        try:
            return tuple(int(p) for p in parts)
        except ValueError as exc:
            raise ConfigError(f"n needs one or three integers, got {raw!r}") from exc
    if raw.lower() in ("true", "yes", "on"):
        return True
    if raw.lower() in ("false", "no", "off"):
        return False
    return raw


def _render(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        return " ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)
