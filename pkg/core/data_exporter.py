# core/data_exporter.py
"""
Exports run results: the energy report, the tab-separated iteration log,
per-run summaries and the consolidated run table (excel, csv, json, text).
"""

import json
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from core.eigensolver import ScfState
from core.fock_operator import EnergyBreakdown
from core.logging_setup import get_logger

logger = get_logger("data_exporter")

RUN_TABLE_COLUMNS = [
    "run",
    "L_angstrom",
    "m",
    "grid",
    "N",
    "storage",
    "R",
    "wall_time_s",
    "peak_vectors",
    "memory_bytes",
    "kinetic",
    "nuclear",
    "electron",
    "total",
    "converged",
    "outer_iterations",
    "inner_iterations",
    "status",
]

SUMMARY_FILE = "run_summary.json"


class RunDataExporter:
    """
    Writes run artifacts under an output directory. Every export returns a
    {"success": ...} dict with an "error" entry on failure.
    """

    def __init__(self, output_dir: str = "runs"):
        self.output_dir = Path(output_dir)
        self.supported_formats = ["excel", "csv", "json", "text"]

    def _path(self, name: str) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        return self.output_dir / name

    def export_energy_report(self, energies: EnergyBreakdown, format_type: str = "text") -> Dict[str, Any]:
        if format_type not in self.supported_formats:
            return {"success": False, "error": f"Unsupported format. Available: {self.supported_formats}"}
        try:
            if format_type == "text":
                path = self._path("energy_report.txt")
                path.write_text("\n".join(energies.report_lines()) + "\n", encoding="utf-8")
            elif format_type == "json":
                path = self._path("energy_report.json")
                path.write_text(json.dumps(energies.to_dict(), indent=2), encoding="utf-8")
            elif format_type == "csv":
                path = self._path("energy_report.csv")
                pd.DataFrame([energies.to_dict()]).to_csv(path, index=False)
            else:
                path = self._path("energy_report.xlsx")
                with pd.ExcelWriter(path, engine="openpyxl") as writer:
                    pd.DataFrame([energies.to_dict()]).to_excel(writer, sheet_name="Energies", index=False)
            return {"success": True, "format": format_type, "path": str(path)}
        except (OSError, ValueError) as e:
            return {"success": False, "error": f"Error exporting energy report: {e}"}

    def write_iteration_log(self, state: ScfState) -> Dict[str, Any]:
        try:
            path = self._path("iterations.tsv")
            path.write_text(state.log_tsv(), encoding="utf-8")
            history = self._path("energy_history.tsv")
            history.write_text(
                "outer\tenergy\n" + "".join(f"{i}\t{e:.16e}\n" for i, e in enumerate(state.energy_history)),
                encoding="utf-8",
            )
            return {"success": True, "path": str(path), "history": str(history), "records": len(state.log)}
        except OSError as e:
            return {"success": False, "error": f"Error writing iteration log: {e}"}

    def write_run_summary(self, summary: Dict[str, Any]) -> Dict[str, Any]:
        try:
            path = self._path(SUMMARY_FILE)
            payload = dict(summary)
            payload.setdefault("exported_at", datetime.now().isoformat())
            path.write_text(json.dumps(payload, indent=2, default=_jsonable), encoding="utf-8")
            return {"success": True, "path": str(path)}
        except (OSError, TypeError) as e:
            return {"success": False, "error": f"Error writing run summary: {e}"}

    def export_run_table(self, rows: Sequence[Dict[str, Any]], format_type: str = "text", stem: str = "report") -> Dict[str, Any]:
        """Consolidated table, one row per run"""
        if format_type not in self.supported_formats:
            return {"success": False, "error": f"Unsupported format. Available: {self.supported_formats}"}
        df = run_table_frame(rows)
        try:
            if format_type == "excel":
                path = self._path(f"{stem}.xlsx")
                with pd.ExcelWriter(path, engine="openpyxl") as writer:
                    df.to_excel(writer, sheet_name="Runs", index=False)
            elif format_type == "csv":
                path = self._path(f"{stem}.csv")
                df.to_csv(path, index=False)
            elif format_type == "json":
                path = self._path(f"{stem}.json")
                path.write_text(df.to_json(orient="records", indent=2), encoding="utf-8")
            else:
                path = self._path(f"{stem}.txt")
                path.write_text(df.to_string(index=False, na_rep="") + "\n", encoding="utf-8")
            return {"success": True, "format": format_type, "path": str(path), "records": len(df)}
        except (OSError, ValueError) as e:
            return {"success": False, "error": f"Error exporting run table: {e}"}


def run_table_frame(rows: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    df = pd.DataFrame(list(rows))
    for column in RUN_TABLE_COLUMNS:
        if column not in df.columns:
            df[column] = None
    return df[RUN_TABLE_COLUMNS]


def summary_to_row(summary: Dict[str, Any], run: str = "") -> Dict[str, Any]:
    """Flatten a run summary to a run-table row; rank stays empty for dense runs"""
    energies = summary.get("energies", {})
    N = summary.get("N")
    peak = summary.get("peak_vectors")
    ranks: Optional[List[int]] = summary.get("ranks")
    return {
        "run": run or summary.get("run", ""),
        "L_angstrom": summary.get("L_angstrom"),
        "m": summary.get("m"),
        "grid": summary.get("grid"),
        "N": N,
        "storage": summary.get("storage"),
        "R": max(ranks) if summary.get("storage") == "tensor" and ranks else None,
        "wall_time_s": summary.get("wall_time_s"),
        "peak_vectors": peak,
        "memory_bytes": peak * N * 16 if peak is not None and N is not None else None,
        "kinetic": energies.get("kinetic"),
        "nuclear": energies.get("nuclear"),
        "electron": energies.get("electron"),
        "total": energies.get("total"),
        "converged": summary.get("converged"),
        "outer_iterations": summary.get("outer_iterations"),
        "inner_iterations": summary.get("inner_iterations"),
        "status": summary.get("status", "ok"),
    }


def _jsonable(value: Any) -> Any:
    if hasattr(value, "tolist"):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not serializable: {type(value).__name__}")
