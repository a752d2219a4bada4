"""Command-line interface: commands, exit codes, output idempotency."""

import hashlib
import io
import json
from pathlib import Path

import numpy as np
import pytest

from sparsim import cli, isa, matio, oracle


def write_mtx(path: Path, coo):
    with path.open("w") as fh:
        matio.write_matrix_market(coo, fh)


@pytest.fixture
def identity_mtx(tmp_path):
    coo = matio.coo_from_entries(8, 8, range(8), range(8), [1.0] * 8)
    path = tmp_path / "eye.mtx"
    write_mtx(path, coo)
    return path


def out_hashes(out: Path) -> dict:
    digests = {}
    for p in sorted(out.iterdir()):
        if p.name == "run.log":  # timestamps live only here
            continue
        digests[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    return digests


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def test_verify_identity_all_paths_pass(identity_mtx, tmp_path, capsys):
    rc = cli.main([
        "verify", "--matrix", str(identity_mtx), "--out", str(tmp_path / "o"),
        "--integer-mode",
    ])
    captured = capsys.readouterr().out
    assert rc == cli.EXIT_OK
    assert captured.count("PASS") >= 6  # dense, replay, 4 smash versions, sim


def test_verify_rmat_integer_mode(tmp_path, capsys):
    rc = cli.main([
        "verify", "--rmat", "5:3", "--seed", "3", "--integer-mode",
        "--out", str(tmp_path / "o"),
    ])
    assert rc == cli.EXIT_OK
    assert "all paths match" in capsys.readouterr().out


def test_verify_corrupted_trace_reports_divergence(tmp_path, capsys):
    coo = matio.with_integer_values(
        matio.generate_rmat(matio.RmatParams(scale=4, edge_factor=3, seed=2)), seed=3
    )
    a = matio.to_csr(coo)
    plan = oracle.symbolic_pass(a, a)
    prog = isa.lower_spgemm(matio.to_csc(matio.csr_to_coo(a)), a, plan)
    buf = io.StringIO()
    isa.write_trace(prog, buf)
    lines = buf.getvalue().splitlines()
    # corrupt one record's A-data address to point at a different element
    rec = lines[7].split()
    rec[2] = hex(int(rec[2], 16) + 8)
    lines[7] = " ".join(rec)
    trace_path = tmp_path / "bad.trace"
    trace_path.write_text("\n".join(lines) + "\n")
    mtx = tmp_path / "a.mtx"
    write_mtx(mtx, coo)

    rc = cli.main([
        "verify", "--matrix", str(mtx), "--trace", str(trace_path),
        "--integer-mode", "--out", str(tmp_path / "o"),
    ])
    out = capsys.readouterr().out
    assert rc == cli.EXIT_VERIFY
    assert "first divergent element (" in out


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def test_run_outputs_and_idempotency(tmp_path):
    args = [
        "run", "--rmat", "5:3", "--seed", "9", "--integer-mode",
        "--config", "tile4", "--mapper", "drhm-low",
    ]
    outs = []
    for name in ("r1", "r2"):
        rc = cli.main(args + ["--out", str(tmp_path / name)])
        assert rc == cli.EXIT_OK
        outs.append(out_hashes(tmp_path / name))
    assert outs[0] == outs[1]
    names = set(outs[0])
    assert {"stats.json", "heatmap.csv", "manifest.json",
            "cpi_mmh4.csv", "cpi_hacc-re.csv"} <= names


def test_run_emit_result_round_trips(identity_mtx, tmp_path):
    out = tmp_path / "o"
    rc = cli.main([
        "run", "--matrix", str(identity_mtx), "--out", str(out), "--emit-result",
    ])
    assert rc == cli.EXIT_OK
    got = matio.load_matrix(out / "result.mtx")
    assert np.array_equal(matio.to_dense(got), np.eye(8))


def test_run_stats_schema(tmp_path):
    out = tmp_path / "o"
    cli.main(["run", "--rmat", "4:2", "--seed", "1", "--out", str(out)])
    data = json.loads((out / "stats.json").read_text())
    assert data["schema"] == "sparsim-stats-v1"
    for key in ("cycles", "instructions", "evictions", "stalls", "cpi",
                "hashpad", "network", "memory", "mapper", "conservation"):
        assert key in data
    assert data["conservation"]["ok"] is True


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def test_sweep_grid_and_rerun_identical(tmp_path):
    base = [
        "sweep", "--rmat", "4:2", "--rmat", "5:2", "--configs", "tile4,tile16",
        "--mappers", "ring,modular,drhm-low", "--seed", "2", "--integer-mode",
    ]
    rc = cli.main(base + ["--out", str(tmp_path / "s1")])
    assert rc == cli.EXIT_OK
    stats_files = list((tmp_path / "s1").glob("stats_*.json"))
    assert len(stats_files) == 2 * 2 * 3
    rc = cli.main(base + ["--out", str(tmp_path / "s2")])
    assert rc == cli.EXIT_OK
    assert out_hashes(tmp_path / "s1") == out_hashes(tmp_path / "s2")
    summary = (tmp_path / "s1" / "summary.csv").read_text()
    assert "cycles_vs_tile4" in summary.splitlines()[0]
    # tile4 rows normalize to 1.0
    for line in summary.splitlines()[1:]:
        cells = line.split(",")
        if cells[2] == "tile4":
            assert float(cells[6]) == 1.0


def test_sweep_empty_grid_is_usage_error(tmp_path, capsys):
    rc = cli.main(["sweep", "--configs", "", "--out", str(tmp_path / "s")])
    assert rc == cli.EXIT_USAGE


# ---------------------------------------------------------------------------
# bloat
# ---------------------------------------------------------------------------


def test_bloat_diagonal_is_zero(tmp_path, capsys):
    coo = matio.coo_from_entries(16, 16, range(16), range(16), [1.0] * 16)
    path = tmp_path / "diag.mtx"
    write_mtx(path, coo)
    rc = cli.main(["bloat", "--matrix", str(path), "--out", str(tmp_path / "o")])
    assert rc == cli.EXIT_OK
    rows = json.loads((tmp_path / "o" / "bloat.json").read_text())
    assert rows[0]["bloat_percent"] == 0.0
    csv_text = (tmp_path / "o" / "bloat.csv").read_text()
    assert "bloat_percent" in csv_text


def test_bloat_missing_file_is_io_error(tmp_path):
    rc = cli.main(["bloat", "--matrix", str(tmp_path / "nope.mtx"),
                   "--out", str(tmp_path / "o")])
    assert rc == cli.EXIT_IO


# ---------------------------------------------------------------------------
# smash / gcn
# ---------------------------------------------------------------------------


def test_smash_command_all_versions(tmp_path, capsys):
    rc = cli.main([
        "smash", "--rmat", "5:3", "--seed", "4", "--integer-mode",
        "--workers", "2", "--out", str(tmp_path / "o"),
    ])
    assert rc == cli.EXIT_OK
    report = json.loads((tmp_path / "o" / "smash_audit.json").read_text())
    assert set(report["versions"]) == {"base", "v1", "v2", "v3"}
    v2 = report["versions"]["v2"]
    assert v2["tokens_total"] == sum(v2["tokens_per_worker"].values())


def test_gcn_identity_graph(identity_mtx, tmp_path, capsys):
    rc = cli.main([
        "gcn", "--matrix", str(identity_mtx), "--features", "4", "--hidden", "3",
        "--seed", "2", "--out", str(tmp_path / "o"),
    ])
    assert rc == cli.EXIT_OK
    report = json.loads((tmp_path / "o" / "gcn_report.json").read_text())
    assert report["pass"] is True
    assert report["max_relative_error"] <= 1e-9


def test_gcn_path_graph_through_simulator(tmp_path):
    coo = matio.coo_from_entries(2, 2, [0, 1], [1, 0], [1.0, 1.0])
    path = tmp_path / "path.mtx"
    write_mtx(path, coo)
    rc = cli.main([
        "gcn", "--matrix", str(path), "--features", "2", "--hidden", "2",
        "--seed", "5", "--out", str(tmp_path / "o"),
    ])
    assert rc == cli.EXIT_OK


def test_usage_error_exit_code(tmp_path):
    rc = cli.main(["run", "--rmat", "bogus", "--out", str(tmp_path / "o")])
    assert rc == cli.EXIT_USAGE
    rc = cli.main(["run", "--config", "tile9000", "--rmat", "4:2",
                   "--out", str(tmp_path / "o")])
    assert rc == cli.EXIT_USAGE
