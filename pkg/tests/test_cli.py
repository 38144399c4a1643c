from __future__ import annotations

"""
End-to-end runs of the batch front-end on cheap configurations.

The zero flow keeps every command exact: L^eps is diagonal with entries
-eps |k|^2 and the Lyapunov exponent is 0.
"""

import json
from pathlib import Path
from typing import Any, Dict

import polars as pl
import pytest
from scripts.cli import EXIT_CONFIG, EXIT_HYPOTHESIS, EXIT_NUMERICAL, EXIT_OK, main


def _write_config(tmp_path: Path, **overrides: Any) -> Path:
    data: Dict[str, Any] = {
        "flow": {"name": "zero"},
        "cutoff": 2,
        "samples": 2,
        "horizon": 2.0,
        "eps_grid": [0.1, 0.01, 0.0],
    }
    data.update(overrides)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def _manifest(out: Path, kind: str) -> Dict[str, Any]:
    return json.loads((out / f"{kind}.manifest.json").read_text(encoding="utf-8"))


def test_missing_config_flag(tmp_path: Path) -> None:
    assert main(["spectrum", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main([]) == EXIT_CONFIG


def test_invalid_config_writes_nothing(tmp_path: Path) -> None:
    out = tmp_path / "out"
    path = _write_config(tmp_path, flow={"name": "vortex"})
    assert main(["spectrum", "--config", str(path), "--out", str(out)]) == EXIT_CONFIG
    assert not out.exists()

    assert main(["spectrum", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG


def test_lyapunov_on_zero_flow(tmp_path: Path) -> None:
    out = tmp_path / "out"
    path = _write_config(tmp_path)
    assert main(["lyapunov", "--config", str(path), "--out", str(out), "--seed", "4"]) == EXIT_OK

    doc = _manifest(out, "lyapunov")
    assert doc["payload"]["mu"] == 0.0
    assert doc["config"]["seed"] == 4
    assert pl.read_csv(out / "lyapunov_rates.csv").height >= 2


def test_spectrum_reuses_lyapunov_manifest(tmp_path: Path) -> None:
    out = tmp_path / "out"
    path = _write_config(tmp_path, eps=0.1, n_list=[2, 3])
    assert main(["lyapunov", "--config", str(path), "--out", str(out)]) == EXIT_OK
    assert main(["spectrum", "--config", str(path), "--out", str(out)]) == EXIT_OK

    payload = _manifest(out, "spectrum")["payload"]
    assert payload["mu_hat_source"] == "lyapunov_manifest"
    assert payload["mu_hat"] == 0.0
    assert payload["dimension"] == 24
    assert payload["unstable"] == []
    assert len(payload["nsweep"]) == 2

    frame = pl.read_csv(out / "spectrum.csv")
    assert frame.height == 24
    assert (out / "nsweep.csv").exists()


def test_spectrum_tables_are_reproducible(tmp_path: Path) -> None:
    path = _write_config(tmp_path, eps=0.05, mu_hat=0.0)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["spectrum", "--config", str(path), "--out", str(a)]) == EXIT_OK
    assert main(["spectrum", "--config", str(path), "--out", str(b), "--threads", "2"]) == EXIT_OK
    assert (a / "spectrum.csv").read_bytes() == (b / "spectrum.csv").read_bytes()
    assert _manifest(a, "spectrum")["payload"] == _manifest(b, "spectrum")["payload"]


def test_branch_without_unstable_eigenvalue(tmp_path: Path) -> None:
    out = tmp_path / "out"
    path = _write_config(tmp_path, mu_hat=0.0)
    assert main(["branch", "--config", str(path), "--out", str(out)]) == EXIT_HYPOTHESIS
    assert not (out / "branch.manifest.json").exists()


def test_riesz_counts_first_shell(tmp_path: Path) -> None:
    # eps = 0.1: the four modes with |k|^2 = 1 sit at -0.1, the next shell at -0.2
    out = tmp_path / "out"
    path = _write_config(
        tmp_path, eps=0.1, contour={"center_re": -0.1, "radius": 0.05, "nodes": 32}
    )
    assert main(["riesz", "--config", str(path), "--out", str(out)]) == EXIT_OK
    payload = _manifest(out, "riesz")["payload"]
    assert payload["multiplicity"] == 4
    assert payload["inside_count"] == 4
    assert pl.read_csv(out / "riesz.csv").height == 4


def test_riesz_contour_through_eigenvalue(tmp_path: Path) -> None:
    path = _write_config(tmp_path, eps=0.1, contour={"center_re": -0.1, "radius": 0.1})
    assert main(["riesz", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_NUMERICAL


def test_packet_on_zero_flow(tmp_path: Path) -> None:
    out = tmp_path / "out"
    path = _write_config(
        tmp_path,
        packet={"deltas": [0.5, 0.25], "eps_list": [1e-2], "t": 0.5, "carrier": [1, 0]},
    )
    assert main(["packet", "--config", str(path), "--out", str(out)]) == EXIT_OK
    payload = _manifest(out, "packet")["payload"]
    assert len(payload["records"]) == 2
    assert pl.read_csv(out / "packet_sweep.csv").height == 2


def test_packet_carrier_dimension(tmp_path: Path) -> None:
    path = _write_config(tmp_path, packet={"deltas": [0.5], "carrier": [1, 0, 0]})
    assert main(["packet", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_CONFIG


def test_report(tmp_path: Path) -> None:
    out = tmp_path / "out"
    assert main(["report"]) == EXIT_CONFIG
    assert main(["report", "--out", str(out)]) == EXIT_CONFIG

    path = _write_config(tmp_path, eps=0.1, mu_hat=0.5)
    assert main(["lyapunov", "--config", str(path), "--out", str(out)]) == EXIT_OK
    assert main(["spectrum", "--config", str(path), "--out", str(out)]) == EXIT_OK
    assert main(["report", "--out", str(out)]) == EXIT_OK

    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert sorted(report["sections"]) == ["lyapunov", "spectrum"]
    # spectrum was filtered with the pinned mu_hat, not the estimate
    assert len(report["warnings"]) == 1


@pytest.mark.parametrize("command", ["lyapunov", "spectrum", "branch", "riesz", "packet"])
def test_corrupt_config_maps_to_exit_code(tmp_path: Path, command: str) -> None:
    path = tmp_path / "run.json"
    path.write_text("[]", encoding="utf-8")
    assert main([command, "--config", str(path)]) == EXIT_CONFIG


def test_branch_tables_are_reproducible(tmp_path: Path) -> None:
    path = _write_config(
        tmp_path,
        flow={"name": "shear", "params": {"m": 2, "A": 1.0}},
        cutoff=8,
        mu_hat=0.0,
        delta=0.0,
    )
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["branch", "--config", str(path), "--out", str(a)]) == EXIT_OK
    assert main(["branch", "--config", str(path), "--out", str(b), "--threads", "2"]) == EXIT_OK
    assert (a / "branch.csv").read_bytes() == (b / "branch.csv").read_bytes()

    payload = _manifest(a, "branch")["payload"]
    assert payload == _manifest(b, "branch")["payload"]
    assert payload["lambda0"]["re"] > 1e-3
    assert payload["reference_multiplicity"] >= 1
    assert pl.read_csv(a / "branch.csv").height == 3
