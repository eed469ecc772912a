# main.py
"""
Structured-matrix Hartree-Fock solver - batch CLI
Verbs: tables (build/cache integrals), scf (run), report (aggregate), selfcheck (test suite)
"""

import argparse
import json
import os
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from scipy import fft as sfft

# Load environment variables from .env file
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

from core.data_exporter import SUMMARY_FILE, RunDataExporter, summary_to_row
from core.dynamic_config_manager import DynamicConfigManager
from core.eigensolver import ScfSettings, scf_solve
from core.errors import CheckpointFormatError, HFStructError, TableFormatError
from core.fock_operator import FockOperator, HartreeFockSystem
from core.grid import GridSpec, NucleusList
from core.integral_engine import IntegralEngine, axis_tables
from core.logging_setup import configure_logging, get_logger
from core.system_configuration import RunConfig, SystemConfigurationManager, SystemFile
from core.table_io import TableCache, cache_key, export_text
from core.tensor_lowrank import CanonicalTensor, TensorStorage, decompose_operator, load_checkpoint, save_checkpoint

logger = get_logger("cli")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2
CHECKPOINT_FILE = "orbitals.hfct"


def load_or_build_system(
    config: RunConfig,
    grid: GridSpec,
    nuclei: NucleusList,
    config_manager: DynamicConfigManager,
) -> Tuple[HartreeFockSystem, bool]:
    """
    Integral tables for the run, from the hash-keyed cache when possible.
    Tables do not depend on the nuclei (W is a unit charge at the origin).

    Returns:
        (system, loaded_from_cache)
    """
    basis = config.basis()
    calibration = config_manager.calibration_table()
    engine = IntegralEngine(basis, config.eta, calibration)
    cache = TableCache(config.cache_dir)
    key = cache_key(grid, basis, config.eta, config.drop_tol, config.exact_pairs, calibration.get(basis.degree))

    if cache.has(key):
        try:
            tables = cache.load(key, basis)
            nuclei.validate(grid)
            system = HartreeFockSystem(
                grid, basis, nuclei,
                tables["overlap"], tables["kinetic"], tables["nuclear"],
                tables["coulomb"] if basis.degree == 1 else tables["density_coulomb"],
                tables["density_coulomb"], engine,
            )
            return system, True
        except (TableFormatError, OSError) as e:
            print(f"⚠️ Cached tables unusable ({e}); rebuilding in {cache.directory(key)}")

    system = HartreeFockSystem.build(grid, basis, nuclei, config.eta, config.drop_tol, calibration, config.exact_pairs)
    tables = {
        "overlap": system.overlap,
        "kinetic": system.kinetic,
        "nuclear": system.nuclear,
        "coulomb": system.coulomb if system.coulomb is not system.density_coulomb else None,
        "density_coulomb": system.density_coulomb,
    }
    cache.store(key, tables, grid.dims, basis)
    return system, False


def _run_grid(config: RunConfig, system_file: SystemFile) -> Tuple[RunConfig, GridSpec]:
    """Uniform grid of the run; a centered grid sets h and n, a box line in the system file wins for n"""
    update: Dict[str, Any] = {}
    if system_file.centered_grid is not None:
        update["h"] = float(system_file.centered_grid.h_target)
        update["n"] = tuple(system_file.centered_grid.uniform_counts)
    if system_file.box is not None:
        update["n"] = tuple(system_file.box)
    if update:
        config = config.model_copy(update=update)
    return config, config.grid()


def tables_command(
    config: RunConfig,
    manager: SystemConfigurationManager,
    export_dir: Optional[str] = None,
    decompose: bool = False,
) -> int:
    system_file = manager.load_system(config)
    config, grid = _run_grid(config, system_file)
    nuclei, _ = system_file.place_on_grid(grid)
    start = time.perf_counter()
    system, cached = load_or_build_system(config, grid, nuclei, manager.config_manager)
    elapsed = time.perf_counter() - start
    print(f"✅ Tables {'loaded from cache' if cached else 'built'} for grid {grid.dims} in {elapsed:.2f}s")
    print(f"   📋 S: {len(system.overlap)} entries, A: {len(system.kinetic)} entries, W: {system.nuclear.nnz} nonzeros")
    if export_dir:
        out = Path(export_dir)
        for name, table in (("overlap", system.overlap), ("kinetic", system.kinetic), ("nuclear", system.nuclear), ("density_coulomb", system.density_coulomb)):
            export_text(out / f"{name}.txt", table)
        if system.coulomb is not None and system.coulomb is not system.density_coulomb:
            export_text(out / "coulomb.txt", system.coulomb)
        print(f"   📁 Text export: {out}")
    if decompose:
        report_tensor_operators(system, manager.config_manager)
    return EXIT_OK


def report_tensor_operators(system: HartreeFockSystem, config_manager: DynamicConfigManager) -> None:
    """Kronecker-sum ranks of the kinetic and Coulomb operators at the configured accuracy"""
    tol = float(config_manager.get("tensor.operator_tol", 1e-6))
    R_max = int(config_manager.get("tensor.operator_rank_max", 6))
    kinetic = decompose_operator("kinetic_A", (*axis_tables(system.basis), system.grid.dims))
    coulomb = decompose_operator("coulomb_T", FockOperator(system, "none").T_density, tol, R_max)
    for op in (kinetic, coulomb):
        status = "✅" if op.achieved else "⚠️"
        print(f"   {status} {op.kind} rank {op.rank} (error {op.accuracy:.2e})")


def run_scf_command(config: RunConfig, manager: SystemConfigurationManager, run_name: Optional[str] = None) -> int:
    """
    Build or load tables, run the SCF and write every artifact of the run.

    Returns:
        0 on convergence, 2 on reported non-convergence
    """
    system_file = manager.load_system(config)
    config, grid = _run_grid(config, system_file)
    nuclei, shift = system_file.place_on_grid(grid)
    run_name = run_name or Path(config.system_path).stem
    out_dir = Path(config.output_dir) / run_name
    manager.write_resolved(config, str(out_dir))

    start = time.perf_counter()
    workers = 1 if config.deterministic else config.threads
    with sfft.set_workers(workers):
        system, cached = load_or_build_system(config, grid, nuclei, manager.config_manager)
        op = FockOperator(
            system,
            config.vee_mode,
            rank1_norm=config.rank1_norm,
            deterministic=config.deterministic,
            band_crossover=config.band_crossover,
        )
        settings = ScfSettings(
            inner_tol=config.inner_tol,
            outer_tol=config.outer_tol,
            max_outer=config.max_outer,
            maxspace=config.maxspace,
            warm_start=config.warm_start,
            warm_max_outer=config.warm_max_outer,
            mixing=config.mixing,
            preconditioner=config.preconditioner,
            seed=config.seed,
            guard=config.guard,
            guard_shift=config.guard_shift,
        )
        storage = TensorStorage(grid.dims, config.tensor_tol, config.tensor_rank_max) if config.storage == "tensor" else None
        orbitals, energies, state = scf_solve(op, system_file.m, settings, storage=storage)
    wall = time.perf_counter() - start

    exporter = RunDataExporter(str(out_dir))
    report = exporter.export_energy_report(energies, config.report_format)
    if config.report_format != "text":
        exporter.export_energy_report(energies, "text")
    exporter.write_iteration_log(state)

    if storage is not None and storage.tensors:
        tensors = storage.tensors
        ranks = [t.rank for t in tensors]
    else:
        tensors = [CanonicalTensor.from_dense(orbitals.coeffs[:, i].reshape(grid.dims)) for i in range(orbitals.m)]
        ranks = None
    save_checkpoint(out_dir / CHECKPOINT_FILE, tensors)

    summary: Dict[str, Any] = {
        "run": run_name,
        "L_angstrom": grid.box_lengths[0] / system_file.angstrom_to_bohr,
        "m": system_file.m,
        "grid": "x".join(str(n) for n in grid.dims),
        "N": grid.N,
        "storage": config.storage,
        "ranks": ranks,
        "wall_time_s": wall,
        "peak_vectors": state.peak_vectors,
        "energies": {
            "kinetic": energies.kinetic,
            "nuclear": energies.nuclear,
            "electron": energies.electron,
            "total": energies.total,
            "nuclear_repulsion": energies.nuclear_repulsion,
        },
        "mode": energies.mode,
        "converged": state.converged,
        "outer_iterations": state.iteration,
        "inner_iterations": state.inner_iterations,
        "warm_inner_iterations": state.warm_inner_iterations,
        "tables_from_cache": cached,
        "max_snap_shift": shift,
        "eigenvalues": state.eigenvalues,
    }
    exporter.write_run_summary(summary)

    if not report.get("success"):
        print(f"⚠️ {report.get('error')}")
    if state.converged:
        print(f"✅ SCF converged in {state.iteration} outer steps: E = {energies.total:.12f}")
        print(f"   📁 Artifacts: {out_dir}")
        return EXIT_OK
    print(f"⚠️ SCF did not converge after {state.iteration} outer steps (|dE| = {state.delta_energy:.3e})")
    print(f"   📁 History: {out_dir / 'energy_history.tsv'}")
    return EXIT_NOT_CONVERGED


def report_command(run_dirs: Sequence[str], format_type: str = "text", output_dir: str = ".") -> int:
    """Best-effort consolidated table over run directories; always exits 0"""
    rows: List[Dict[str, Any]] = []
    missing: List[str] = []
    for run_dir in run_dirs:
        path = Path(run_dir)
        summary_path = path / SUMMARY_FILE
        if not summary_path.exists():
            missing.append(str(path))
            continue
        try:
            summary = json.loads(summary_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            rows.append({"run": path.name, "status": f"summary unreadable: {e}"})
            continue
        row = summary_to_row(summary, path.name)
        checkpoint = path / CHECKPOINT_FILE
        try:
            load_checkpoint(checkpoint)
        except (CheckpointFormatError, OSError) as e:
            row["status"] = f"checkpoint unreadable: {e}"
        rows.append(row)

    for path in missing:
        print(f"❌ Missing artifacts: {path}")
        rows.append({"run": Path(path).name, "status": "missing"})
    result = RunDataExporter(output_dir).export_run_table(rows, format_type)
    if result.get("success"):
        print(f"✅ Report with {result['records']} rows: {result['path']}")
    else:
        print(f"⚠️ {result.get('error')}")
    return EXIT_OK


def selfcheck_command(extra: Sequence[str] = ()) -> int:
    import pytest

    tests = Path(__file__).resolve().parent / "tests"
    return int(pytest.main([str(tests), "-q", *extra]))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hfstruct", description="Structured-matrix Hartree-Fock solver on regular grids")
    parser.add_argument("--log-level", default=None, help="overrides HF_LOG_LEVEL")
    parser.add_argument("--base-config", default="config/solver_config.json")
    sub = parser.add_subparsers(dest="verb", required=True)

    def run_options(p: argparse.ArgumentParser) -> None:
        p.add_argument("config", nargs="?", help="INI run config")
        p.add_argument("--system", dest="system_path", help="system file (overrides [system] path)")
        p.add_argument("--n", type=int, nargs=3, help="cells per axis")
        p.add_argument("--h", type=float, help="cell side (a.u.)")
        p.add_argument("--centered-h", dest="centered_h", type=float, help="target cell side of a nucleus-centered grid (a.u.)")
        p.add_argument("--degree", type=int, choices=(0, 1))
        p.add_argument("--vee-mode", dest="vee_mode")
        p.add_argument("--eta", type=float)
        p.add_argument("--cache-dir", dest="cache_dir")
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--threads", type=int)

    tables = sub.add_parser("tables", help="build or load cached integral tables")
    run_options(tables)
    tables.add_argument("--export-text", help="directory for text exports of every table")
    tables.add_argument("--decompose", action="store_true", help="report tensor ranks of the kinetic and Coulomb operators")

    scf = sub.add_parser("scf", help="run the SCF")
    run_options(scf)
    scf.add_argument("--max-outer", dest="max_outer", type=int)
    scf.add_argument("--storage", choices=("dense", "tensor"))
    scf.add_argument("--warm-start", dest="warm_start", action="store_const", const=True)
    scf.add_argument("--report-format", dest="report_format", choices=("text", "json", "csv", "excel"))
    scf.add_argument("--name", help="run directory name")

    report = sub.add_parser("report", help="consolidate run directories")
    report.add_argument("runs", nargs="+")
    report.add_argument("--format", default="text", choices=("text", "json", "csv", "excel"))
    report.add_argument("--output-dir", default=".")

    check = sub.add_parser("selfcheck", help="run the bundled test suite")
    check.add_argument("--slow", action="store_true", help="include slow oracle sweeps")
    return parser


OVERRIDE_KEYS = (
    "system_path", "n", "h", "centered_h", "degree", "vee_mode", "eta", "cache_dir", "output_dir", "threads",
    "max_outer", "storage", "warm_start", "report_format",
)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    base = DynamicConfigManager(args.base_config)
    configure_logging(args.log_level or os.getenv("HF_LOG_LEVEL") or base.get("logging.level"))
    try:
        if args.verb == "report":
            return report_command(args.runs, args.format, args.output_dir)
        if args.verb == "selfcheck":
            return selfcheck_command(() if args.slow else ("-m", "not slow"))

        manager = SystemConfigurationManager(base)
        overrides = {k: getattr(args, k, None) for k in OVERRIDE_KEYS}
        if overrides.get("n") is not None:
            overrides["n"] = tuple(overrides["n"])
        config = manager.resolve(args.config, overrides)
        if args.verb == "tables":
            return tables_command(config, manager, args.export_text, args.decompose)
        return run_scf_command(config, manager, args.name)
    except HFStructError as e:
        print(f"❌ {type(e).__name__}: {e}")
        return EXIT_ERROR
    except OSError as e:
        print(f"❌ I/O error on {getattr(e, 'filename', None) or 'unknown path'}: {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
