# core/table_io.py
"""
Binary (HFIT) and text persistence for integral tables, plus the
hash-keyed table cache used by the batch front end.

HFIT layout, little-endian:
    b"HFIT" | u32 version | u32 kind | u32 n_i, n_j, n_k | u32 p | u32 key width
    | 32-byte sha256 of the basis descriptor | u64 count
    | count records of (key width x i32, f64), keys sorted
"""

import hashlib
import struct
from itertools import product
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from core.errors import TableFormatError
from core.grid import BasisFamily, GridSpec
from core.integral_engine import FourCenterTable, NuclearTable, StencilKind, StencilTable, cell_product_factors
from core.logging_setup import get_logger

logger = get_logger("table_io")

MAGIC = b"HFIT"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIII32sQ")

_KIND_CODES = {
    StencilKind.OVERLAP: 1,
    StencilKind.KINETIC: 2,
    StencilKind.NUCLEAR_W: 3,
    StencilKind.FOUR_CENTER: 4,
    StencilKind.DENSITY_COULOMB: 5,
}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}

Table = Union[StencilTable, NuclearTable, FourCenterTable]


def basis_hash(basis: BasisFamily) -> bytes:
    return hashlib.sha256(basis.descriptor().encode("utf-8")).digest()


def _entries(table: Table) -> Tuple[StencilKind, Dict[Tuple[int, ...], float], int]:
    if isinstance(table, StencilTable):
        return table.kind, {tuple(k): v for k, v in table.entries.items()}, 3
    if isinstance(table, NuclearTable):
        return table.kind, table.entries(), 6
    if isinstance(table, FourCenterTable):
        kind = StencilKind.DENSITY_COULOMB if table.n_types == 1 and table.type_map == {(0, 0, 0, 0, 0, 0): 0} else StencilKind.FOUR_CENTER
        return kind, table.entries(), 5
    raise TableFormatError(f"cannot persist {type(table).__name__}")


def save_table(path: Union[str, Path], table: Table, dims: Tuple[int, int, int], basis: BasisFamily) -> Path:
    """Write one table; returns the path written"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kind, entries, width = _entries(table)
    keys = sorted(entries)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, _KIND_CODES[kind], *dims, table.p, width, basis_hash(basis), len(keys)))
        record = struct.Struct("<" + "i" * width + "d")
        for key in keys:
            fh.write(record.pack(*key, entries[key]))
    logger.debug("table saved", extra={"path": str(path), "kind": kind.value, "entries": len(keys)})
    return path


def load_table(path: Union[str, Path], basis: Optional[BasisFamily] = None, degree: int = 0) -> Table:
    """
    Read a table written by save_table. With a basis the stored descriptor
    hash must match, otherwise TableFormatError.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise TableFormatError(f"{path}: file shorter than the header")
    magic, version, code, ni, nj, nk, p, width, digest, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise TableFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise TableFormatError(f"{path}: unsupported version {version}")
    if code not in _CODE_KINDS:
        raise TableFormatError(f"{path}: unknown table kind {code}")
    if basis is not None and digest != basis_hash(basis):
        raise TableFormatError(f"{path}: basis descriptor hash mismatch")
    record = struct.Struct("<" + "i" * width + "d")
    if len(data) != _HEADER.size + count * record.size:
        raise TableFormatError(f"{path}: expected {count} records, payload has {len(data) - _HEADER.size} bytes")
    entries: Dict[Tuple[int, ...], float] = {}
    for key_value in record.iter_unpack(data[_HEADER.size:]):
        entries[tuple(key_value[:-1])] = key_value[-1]
    kind = _CODE_KINDS[code]
    dims = (ni, nj, nk)

    if kind in (StencilKind.OVERLAP, StencilKind.KINETIC):
        return StencilTable(kind, entries, p)
    if kind == StencilKind.NUCLEAR_W:
        bands: Dict[Tuple[int, int, int], np.ndarray] = {}
        for key, value in entries.items():
            band = key[3:]
            bands.setdefault(band, np.zeros(dims))[key[:3]] = value
        return NuclearTable(dims, p, bands)
    n_types = 1 if kind == StencilKind.DENSITY_COULOMB else (3 ** 3 if degree == 1 else 1)
    values = np.zeros((n_types, n_types) + dims)
    for key, value in entries.items():
        values[key] = value
    if kind == StencilKind.DENSITY_COULOMB:
        return FourCenterTable(dims, p, values, {(0, 0, 0, 0, 0, 0): 0})
    return FourCenterTable(dims, p, values, _type_map(degree))


def _type_map(degree: int) -> Dict[Tuple[int, ...], int]:
    _, corner_map = cell_product_factors(degree)
    n_axis = 3 if degree == 1 else 1
    corners = (0, 1) if degree == 1 else (0,)
    out = {}
    for o, o2 in product(product(corners, repeat=3), repeat=2):
        axis_types = tuple(corner_map[(o[a], o2[a])] for a in range(3))
        out[tuple(o) + tuple(o2)] = int(np.ravel_multi_index(axis_types, (n_axis,) * 3))
    return out


def export_text(path: Union[str, Path], table: Table) -> Path:
    """One line per entry: offset/key integers then the value with 17 significant digits"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _, entries, _ = _entries(table)
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(entries):
            fh.write(" ".join(str(k) for k in key) + f" {entries[key]:.16e}\n")
    return path


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------

def cache_key(
    grid: GridSpec,
    basis: BasisFamily,
    eta: float,
    drop_tol: float,
    exact_pairs: bool,
    calibration: Optional[Dict[str, Any]] = None,
) -> str:
    """Hash of everything the tables depend on; calibration overrides (k1, order, floor) included"""
    settings = ",".join(f"{k}={calibration[k]!r}" for k in sorted(calibration or {}))
    text = f"{grid.describe()}|{basis.descriptor()}|eta={eta!r}|drop={drop_tol!r}|pairs={exact_pairs}|calibration={settings}"
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


class TableCache:
    """Directory of HFIT files, one subdirectory per grid+basis hash"""

    NAMES = ("overlap", "kinetic", "nuclear", "coulomb", "density_coulomb")

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def directory(self, key: str) -> Path:
        return self.root / key

    def has(self, key: str) -> bool:
        d = self.directory(key)
        return all((d / f"{name}.hfit").exists() for name in ("overlap", "kinetic", "nuclear", "density_coulomb"))

    def store(self, key: str, tables: Dict[str, Optional[Table]], dims: Tuple[int, int, int], basis: BasisFamily) -> Path:
        d = self.directory(key)
        for name in self.NAMES:
            table = tables.get(name)
            if table is None:
                continue
            save_table(d / f"{name}.hfit", table, dims, basis)
        logger.info("tables cached", extra={"directory": str(d)})
        return d

    def load(self, key: str, basis: BasisFamily) -> Dict[str, Optional[Table]]:
        d = self.directory(key)
        out: Dict[str, Optional[Table]] = {}
        for name in self.NAMES:
            path = d / f"{name}.hfit"
            out[name] = load_table(path, basis, basis.degree) if path.exists() else None
        logger.info("tables loaded from cache", extra={"directory": str(d)})
        return out
