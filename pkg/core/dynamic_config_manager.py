# core/dynamic_config_manager.py
"""
Solver base configuration: JSON defaults shipped under config/, an embedded
fallback when the file cannot be read, and deep-merged run overrides on top.
"""

import copy
import json
from datetime import datetime
from typing import Any, Dict, Optional

from core.logging_setup import get_logger

logger = get_logger("config")


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursive dict merge; override wins, base is left untouched"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


class DynamicConfigManager:
    """
    Loads the solver defaults and answers typed lookups:
    1. Base config from config/solver_config.json
    2. Embedded fallback if the file is missing or malformed
    3. Run-level overrides merged with deep_merge
    """

    def __init__(self, base_config_path: str = "config/solver_config.json"):
        self.base_config_path = base_config_path
        self.base_config = self._load_base_config()
        self.overrides: Dict[str, Any] = {}
        self.config = copy.deepcopy(self.base_config)
        self.loaded_at = datetime.now().isoformat()

    def _load_base_config(self) -> Dict[str, Any]:
        try:
            with open(self.base_config_path, "r", encoding="utf-8") as f:
                config = json.load(f)
            logger.debug("base config loaded", extra={"path": self.base_config_path, "version": config.get("version", "1.0")})
            return deep_merge(self._get_fallback_config(), config)
        except (OSError, json.JSONDecodeError) as e:
            logger.warning("base config unavailable, using fallback", extra={"path": self.base_config_path, "error": str(e)})
            return self._get_fallback_config()

    def _get_fallback_config(self) -> Dict[str, Any]:
        """Defaults used when config/solver_config.json cannot be loaded"""
        return {
            "version": "1.0-fallback",
            "solver": {
                "inner_tol": 1e-8,
                "outer_tol": 1e-8,
                "max_outer": 100,
                "maxspace": 30,
                "guard": 1e-12,
                "guard_shift": 1e-10,
                "warm_start": False,
                "warm_max_outer": 50,
                "mixing": 0.0,
                "preconditioner": "circulant_fit",
                "seed": 0,
            },
            "integrals": {"eta": {"0": 1e-10, "1": 1e-8}, "drop_tol": 0.0, "exact_pairs": True, "band_crossover": None},
            "calibration": {"0": {"k1": 2, "order": 14}, "1": {"k1": 1, "order": 14}},
            "tensor": {"tol": 1e-8, "rank_max": 64, "operator_tol": 1e-6, "operator_rank_max": 6},
            "units": {"angstrom_to_bohr": 1.8897259886},
            "elements": {
                "H": 1, "He": 2, "Li": 3, "Be": 4, "B": 5, "C": 6, "N": 7, "O": 8, "F": 9,
                "Ne": 10, "Na": 11, "Mg": 12, "Al": 13, "Si": 14, "P": 15, "S": 16, "Cl": 17, "Ar": 18,
            },
            "output": {"directory": "runs", "cache_directory": ".hf_cache", "report_format": "text"},
            "logging": {"level": "INFO"},
        }

    def apply_overrides(self, overrides: Dict[str, Any]) -> Dict[str, Any]:
        self.overrides = deep_merge(self.overrides, overrides)
        self.config = deep_merge(self.base_config, self.overrides)
        return self.config

    def get(self, dotted: str, default: Optional[Any] = None) -> Any:
        node: Any = self.config
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def calibration_table(self) -> Dict[int, Dict[str, Any]]:
        return {int(k): dict(v) for k, v in self.get("calibration", {}).items()}

    def default_eta(self, degree: int) -> float:
        eta = self.get("integrals.eta", {})
        if isinstance(eta, dict):
            return float(eta.get(str(degree), eta.get(degree, 1e-8)))
        return float(eta)

    def elements(self) -> Dict[str, int]:
        return {str(k): int(v) for k, v in self.get("elements", {}).items()}

    def get_stats(self) -> Dict[str, Any]:
        return {
            "base_config_version": self.base_config.get("version", "Unknown"),
            "base_config_path": self.base_config_path,
            "overrides": sorted(self.overrides),
            "loaded_at": self.loaded_at,
        }
