"""
Result tables and run manifests.

- Tables are CSV files written with polars; every row carries the config
  hash and the toolkit version.
- Manifests are JSON documents (`<command>.manifest.json`) holding the
  validated RunConfig verbatim plus a command-specific payload.
- Nothing here writes timestamps: identical configs give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import polars as pl

from . import __version__
from .config import RunConfig
from .errors import ConfigError
from .logging_utils import get_logger, log_structured

logger = get_logger(__name__)

MANIFEST_SUFFIX = ".manifest.json"

# Source table -> plot-data file emitted by build_report.
PLOT_TABLES: Dict[str, str] = {
    "branch.csv": "plot_branch_convergence.csv",
    "packet_sweep.csv": "plot_packet_scaling.csv",
    "nsweep.csv": "plot_nsweep.csv",
}

_MU_MATCH_TOL = 1e-12


class ManifestError(ConfigError):
    """Raised when a run directory has missing or corrupt manifests."""

    def __init__(self, message: str, files: Sequence[str] = ()) -> None:
        super().__init__(message)
        self.files = list(files)


# -----------------------
# Internal helpers
# -----------------------


def _sanitize(value: Any) -> Any:
    """Convert numpy / complex values to plain JSON; non-finite floats become null."""
    if isinstance(value, Mapping):
        return {str(k): _sanitize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_sanitize(v) for v in value]
    if isinstance(value, np.ndarray):
        return _sanitize(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (complex, np.complexfloating)):
        return {"re": _sanitize(float(value.real)), "im": _sanitize(float(value.imag))}
    if isinstance(value, (np.floating, float)):
        f = float(value)
        return f if math.isfinite(f) else None
    return value


def _safe_mkdir(path: Path) -> None:
    os.makedirs(path, exist_ok=True)


def matrix_fingerprint(matrix: np.ndarray) -> str:
    """sha256 of shape, dtype and raw bytes (C order)."""
    arr = np.ascontiguousarray(matrix)
    digest = hashlib.sha256()
    digest.update(f"{arr.dtype.str}:{arr.shape}".encode("utf-8"))
    digest.update(arr.tobytes())
    return digest.hexdigest()


def file_checksum(path: str | Path) -> Optional[str]:
    if not os.path.exists(path):
        return None
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(8192), b""):
            digest.update(chunk)
    return digest.hexdigest()


# -----------------------
# Writers
# -----------------------


def write_table(
    path: str | Path,
    rows: Iterable[Mapping[str, Any]],
    columns: Sequence[str],
    config_hash: str,
) -> Path:
    """
    Write rows as CSV with fixed column order plus config_hash/version.

    Complex cells must be split by the caller; polars writes RFC-4180 quoting.
    """
    path = Path(path)
    _safe_mkdir(path.parent)
    materialized = list(rows)
    data: Dict[str, List[Any]] = {
        col: [_sanitize(row.get(col)) for row in materialized] for col in columns
    }
    data["config_hash"] = [config_hash] * len(materialized)
    data["version"] = [__version__] * len(materialized)
    frame = pl.DataFrame(data, strict=False)
    frame.write_csv(path)
    return path


def write_manifest(
    path: str | Path,
    kind: str,
    config: RunConfig,
    payload: Mapping[str, Any],
) -> Path:
    path = Path(path)
    _safe_mkdir(path.parent)
    document = {
        "kind": kind,
        "version": __version__,
        "config_hash": config.config_hash(),
        "config": config.model_dump(mode="json"),
        "payload": _sanitize(payload),
    }
    path.write_text(
        json.dumps(document, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return path


def manifest_path(output_dir: str | Path, kind: str) -> Path:
    return Path(output_dir) / f"{kind}{MANIFEST_SUFFIX}"


# -----------------------
# Report
# -----------------------


def load_manifests(directory: str | Path) -> Dict[str, Dict[str, Any]]:
    """
    Read every `*.manifest.json` in `directory`, keyed by kind.

    Raises ManifestError listing the offending files when the directory is
    missing, holds no manifests, or any manifest is unreadable.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise ManifestError(f"run directory '{directory}' does not exist", [str(directory)])

    files = sorted(directory.glob(f"*{MANIFEST_SUFFIX}"))
    if not files:
        raise ManifestError(f"no manifests found in '{directory}'", [str(directory)])

    manifests: Dict[str, Dict[str, Any]] = {}
    bad: List[str] = []
    for file in files:
        try:
            doc = json.loads(file.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            bad.append(file.name)
            continue
        if not isinstance(doc, dict) or not {"kind", "payload", "config_hash"} <= set(doc):
            bad.append(file.name)
            continue
        manifests[str(doc["kind"])] = doc

    if bad:
        raise ManifestError(f"corrupt manifests: {', '.join(bad)}", bad)
    return manifests


def _mu_warnings(manifests: Mapping[str, Dict[str, Any]]) -> List[str]:
    lyap = manifests.get("lyapunov")
    warnings: List[str] = []
    if lyap is None:
        return warnings
    mu_lyap = lyap["payload"].get("mu")
    for kind in ("branch", "spectrum"):
        doc = manifests.get(kind)
        if doc is None:
            continue
        mu_used = doc["payload"].get("mu_hat")
        if mu_used is None or mu_lyap is None:
            continue
        if abs(float(mu_used) - float(mu_lyap)) > _MU_MATCH_TOL:
            warnings.append(
                f"{kind} filtered with mu_hat={mu_used} but the lyapunov run "
                f"estimated mu={mu_lyap}"
            )
    return warnings


def build_report(directory: str | Path) -> Dict[str, Any]:
    """
    Merge manifests into report.json and copy plot-data CSVs.

    Recomputes nothing: plot files are copies of tables already on disk.
    """
    directory = Path(directory)
    manifests = load_manifests(directory)

    plot_files: List[str] = []
    for source, target in PLOT_TABLES.items():
        source_path = directory / source
        if not source_path.exists():
            continue
        frame = pl.read_csv(source_path)
        frame.write_csv(directory / target)
        plot_files.append(target)

    warnings = _mu_warnings(manifests)
    report = {
        "version": __version__,
        "sections": {kind: manifests[kind] for kind in sorted(manifests)},
        "config_hashes": {kind: manifests[kind]["config_hash"] for kind in sorted(manifests)},
        "plot_files": plot_files,
        "table_checksums": {
            file.name: file_checksum(file) for file in sorted(directory.glob("*.csv"))
        },
        "warnings": warnings,
    }
    (directory / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    for message in warnings:
        log_structured(logger, logging.WARNING, "report_mu_mismatch", detail=message)
    return report


__all__ = [
    "MANIFEST_SUFFIX",
    "ManifestError",
    "PLOT_TABLES",
    "build_report",
    "file_checksum",
    "load_manifests",
    "manifest_path",
    "matrix_fingerprint",
    "write_manifest",
    "write_table",
]
