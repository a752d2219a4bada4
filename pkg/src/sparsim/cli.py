"""Command-line front end.

Subcommands: run (simulate one multiply), verify (cross-check every
execution path against the oracles), sweep (config x mapper x matrix
grid), bloat (partial-product analysis over datasets), smash (host
kernel), gcn (one graph-convolution layer through the simulator).

Every command is idempotent for fixed inputs and seeds: stats, tables,
and matrices are byte-identical across reruns; wall-clock figures go to a
sidecar run.log only. Exit codes: 0 success, 1 verification failure,
2 usage or configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import engine, isa, mapping, matio, oracle, smash, uarch
from .errors import (
    ConfigError,
    MatrixFormatError,
    SimulationError,
    SparsimError,
    TraceError,
    VerificationError,
)

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_IO = 3

MAPPER_CHOICES = list(mapping.STRATEGIES)
SMASH_CHOICES = list(smash.VERSIONS) + ["all"]


# ---------------------------------------------------------------------------
# Argument plumbing
# ---------------------------------------------------------------------------


def parse_rmat_spec(spec: str) -> matio.RmatParams:
    """scale:edge_factor[:a:b:c:d] with the usual skewed defaults."""
    parts = spec.split(":")
    if len(parts) not in (2, 6):
        raise ConfigError(f"--rmat wants scale:ef or scale:ef:a:b:c:d, got {spec!r}")
    scale, ef = int(parts[0]), int(parts[1])
    if len(parts) == 6:
        a, b, c, d = (float(p) for p in parts[2:])
        return matio.RmatParams(scale=scale, edge_factor=ef, a=a, b=b, c=c, d=d)
    return matio.RmatParams(scale=scale, edge_factor=ef)


def chip_config(name: str) -> uarch.ChipConfig:
    if name.startswith("file:"):
        path = Path(name[5:])
        data = json.loads(path.read_text())
        tile_fields = data.pop("tile")
        tile = uarch.TileConfig(**tile_fields)
        return uarch.ChipConfig(tile=tile, **data)
    return uarch.named_chip(name)


def mapper_config(args) -> mapping.MapperConfig:
    reseed = args.reseed
    if reseed != mapping.PER_ROW:
        reseed = math.inf if reseed == "inf" else int(reseed)
    return mapping.MapperConfig(
        strategy=args.mapper,
        n_targets=1,  # the engine sizes this to the chip
        k=args.k,
        reseed_interval=reseed,
        rng_seed=args.seed,
    )


def load_input_matrix(args, which="matrix") -> tuple[str, matio.CsrMatrix]:
    path = getattr(args, which.replace("-", "_"), None)
    if path and args.rmat and which == "matrix":
        raise ConfigError("give either --matrix or --rmat, not both")
    if path:
        coo = matio.load_matrix(path)
        name = Path(path).name
    elif which == "matrix" and args.rmat:
        params = parse_rmat_spec(args.rmat)
        params = replace(params, seed=args.seed)
        coo = matio.generate_rmat(params)
        name = f"rmat-{args.rmat}-s{args.seed}"
    else:
        raise ConfigError(f"no --{which} given")
    if getattr(args, "integer_mode", False):
        coo = matio.with_integer_values(coo, seed=args.seed + 1)
    return name, matio.to_csr(coo)


def out_dir(args) -> Path:
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, sort_keys=True, indent=1) + "\n")


def write_cpi_csv(path: Path, hist: dict) -> None:
    with path.open("w") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cycles", "count"])
        for c in sorted(hist):
            writer.writerow([c, hist[c]])


def write_series_csv(path: Path, header, rows) -> None:
    with path.open("w") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def first_divergence(got: matio.CsrMatrix, want: matio.CsrMatrix, tol: float):
    """First (i, j) where the matrices differ, or None. Structure counts."""
    for i in range(want.n_rows):
        gj, gv = got.row(i)
        wj, wv = want.row(i)
        gd = dict(zip(gj.tolist(), gv.tolist()))
        wd = dict(zip(wj.tolist(), wv.tolist()))
        for j in sorted(set(gd) | set(wd)):
            if j not in gd:
                return (i, j, None, wd[j])
            if j not in wd:
                return (i, j, gd[j], None)
            denom = max(abs(wd[j]), 1.0)
            if abs(gd[j] - wd[j]) / denom > tol:
                return (i, j, gd[j], wd[j])
    return None


def sidecar_log(path: Path, lines) -> None:
    with path.open("a") as fh:
        stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
        for line in lines:
            fh.write(f"{stamp} {line}\n")


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def emit_run_outputs(out: Path, stats: engine.SimStats, result=None) -> None:
    write_json(out / "stats.json", stats.to_json_dict())
    with (out / "heatmap.csv").open("w") as fh:
        mapping.export_heatmap(stats.grid, fh)
    for kind in stats.cpi:
        write_cpi_csv(out / f"cpi_{kind}.csv", stats.cpi[kind])
    write_series_csv(
        out / "hashpad_occupancy.csv", ["cycle", "occupancy"], stats.occupancy_trace
    )
    write_series_csv(
        out / "inflight_reads.csv", ["cycle", "outstanding"], stats.inflight_trace
    )
    if result is not None:
        with (out / "result.mtx").open("w") as fh:
            matio.write_matrix_market(matio.csr_to_coo(result), fh)
    sidecar_log(out / "run.log", [f"kcps={stats.kcps:.3f} wall={stats.wall_seconds:.3f}s"])


def cmd_run(args) -> int:
    name, a = load_input_matrix(args)
    if args.matrix_b:
        b_name, b = load_input_matrix(args, "matrix-b")
    else:
        b_name, b = name, a
    out = out_dir(args)
    stats, result, run = engine.run_spgemm_simulation(
        a,
        b,
        chip_config(args.config),
        mapper_config(args),
        seed=args.seed,
        eviction_mode=args.eviction,
        host_workers=args.host_workers,
    )
    write_json(
        out / "seed_log.json",
        {
            "strategy": args.mapper,
            "rng_seed": args.seed,
            "row_gammas": {str(r): g for r, g in sorted(run.mapper._row_gammas.items())},
            "epochs": run.mapper.seed_log_json(),
        },
    )
    write_json(out / "image_manifest.json", run.program.image.manifest())
    write_json(
        out / "manifest.json",
        {
            "command": "run",
            "matrix": name,
            "matrix_b": b_name,
            "config": args.config,
            "mapper": args.mapper,
            "seed": args.seed,
            "eviction": args.eviction,
        },
    )
    emit_run_outputs(out, stats, result if args.emit_result else None)
    print(f"run: {name} x {b_name} on {args.config}: {stats.cycles} cycles, "
          f"{stats.evictions} output nonzeros, conservation "
          f"{'ok' if stats.conservation['ok'] else 'VIOLATED'}")
    return EXIT_OK if stats.conservation["ok"] else EXIT_VERIFY


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def cmd_verify(args) -> int:
    name, a = load_input_matrix(args)
    if args.matrix_b:
        _, b = load_input_matrix(args, "matrix-b")
    else:
        b = a
    tol = 0.0 if args.integer_mode else 1e-9
    reference = oracle.spgemm_gustavson(a, b)
    failures = []

    if a.n_rows <= 512:
        dense = oracle.spgemm_dense_oracle(matio.csr_to_dense(a), matio.csr_to_dense(b))
        div = first_divergence(reference, matio.dense_to_csr(dense), max(tol, 1e-12))
        _report("dense-oracle vs gustavson", div, failures)

    plan = oracle.symbolic_pass(a, b)
    a_csc = matio.to_csc(matio.csr_to_coo(a))
    program = isa.lower_spgemm(a_csc, b, plan)

    if args.trace:
        try:
            with open(args.trace) as fh:
                program = isa.read_trace(fh, image=program.image)
        except OSError as err:
            raise TraceError(f"cannot read trace: {err}") from err
        replayed = isa.replay(program)
        div = first_divergence(replayed, reference, tol)
        _report(f"trace replay ({args.trace})", div, failures)
    else:
        replayed = isa.replay(program)
        div = first_divergence(replayed, reference, tol)
        _report("functional replay", div, failures)

        for version in smash.VERSIONS:
            cfg = smash.SmashConfig(version=version, n_workers=args.workers)
            got = smash.smash_spgemm(a, b, cfg)
            div = first_divergence(got, reference, tol)
            _report(f"smash-{version}", div, failures)

        stats, sim_out, _ = engine.run_spgemm_simulation(
            a, b, chip_config(args.config), mapper_config(args), seed=args.seed
        )
        div = first_divergence(sim_out, reference, tol)
        _report(f"simulation ({args.config})", div, failures)
        if not stats.conservation["ok"]:
            failures.append(("conservation", stats.conservation))
            print(f"FAIL conservation: {stats.conservation}")

    if failures:
        print(f"verify: {len(failures)} path(s) diverged on {name}")
        return EXIT_VERIFY
    print(f"verify: all paths match the oracle on {name}")
    return EXIT_OK


def _report(label, divergence, failures) -> None:
    if divergence is None:
        print(f"PASS {label}")
    else:
        i, j, got, want = divergence
        failures.append((label, divergence))
        print(f"FAIL {label}: first divergent element ({i},{j}): got {got!r}, want {want!r}")


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _sweep_point(payload):
    (label, a, b, config_name, mapper_name, k, seed) = payload
    try:
        mcfg = mapping.MapperConfig(strategy=mapper_name, n_targets=1, k=k, rng_seed=seed)
        stats, _, _ = engine.run_spgemm_simulation(
            a, b, chip_config(config_name), mcfg, seed=seed
        )
        return label, stats.to_json_dict(), None
    except SparsimError as err:
        return label, None, str(err)


def cmd_sweep(args) -> int:
    configs = [c for c in args.configs.split(",") if c]
    mappers = [m for m in args.mappers.split(",") if m]
    matrices = []
    for path in args.matrix or []:
        coo = matio.load_matrix(path)
        if args.integer_mode:
            coo = matio.with_integer_values(coo, seed=args.seed + 1)
        matrices.append((Path(path).name, matio.to_csr(coo)))
    for spec in args.rmat or []:
        params = replace(parse_rmat_spec(spec), seed=args.seed)
        coo = matio.generate_rmat(params)
        if args.integer_mode:
            coo = matio.with_integer_values(coo, seed=args.seed + 1)
        matrices.append((f"rmat-{spec}-s{args.seed}", matio.to_csr(coo)))
    if not configs or not mappers or not matrices:
        raise ConfigError("sweep needs at least one config, one mapper, and one matrix")
    for m in mappers:
        if m not in mapping.STRATEGIES:
            raise ConfigError(f"unknown mapper {m!r}")

    out = out_dir(args)
    points = []
    for mat_name, a in matrices:
        for config_name in configs:
            for mapper_name in mappers:
                label = f"{mat_name}__{config_name}__{mapper_name}"
                points.append((label, a, a, config_name, mapper_name, args.k, args.seed))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_point, points))
    else:
        results = [_sweep_point(p) for p in points]

    rows = []
    tile4_cycles = {}
    for (label, stats_dict, error), point in zip(results, points):
        _, _, _, config_name, mapper_name, _, _ = point
        mat_name = label.split("__")[0]
        if stats_dict is not None:
            write_json(out / f"stats_{label}.json", stats_dict)
            if config_name == "tile4":
                tile4_cycles[(mat_name, mapper_name)] = stats_dict["cycles"]
        rows.append((label, mat_name, config_name, mapper_name, stats_dict, error))

    with (out / "summary.csv").open("w") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["point", "matrix", "config", "mapper", "status", "cycles",
             "cycles_vs_tile4", "hacc", "evictions", "mean_cpi_mmh4",
             "occupancy_max", "bytes_read", "bytes_written"]
        )
        for label, mat_name, config_name, mapper_name, stats_dict, error in sorted(rows):
            if stats_dict is None:
                writer.writerow([label, mat_name, config_name, mapper_name,
                                 f"error: {error}"] + [""] * 8)
                continue
            base = tile4_cycles.get((mat_name, mapper_name))
            norm = f"{stats_dict['cycles'] / base:.6f}" if base else ""
            cpi = stats_dict["cpi"]["mmh4"]["mean"]
            writer.writerow([
                label, mat_name, config_name, mapper_name, "ok",
                stats_dict["cycles"], norm,
                stats_dict["instructions"]["hacc_committed"],
                stats_dict["evictions"], f"{cpi:.6f}",
                stats_dict["hashpad"]["occupancy_max"],
                stats_dict["memory"]["bytes_read"],
                stats_dict["memory"]["bytes_written"],
            ])

    n_err = sum(1 for r in rows if r[4] is None)
    print(f"sweep: {len(rows)} points, {n_err} failed; summary at {out / 'summary.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bloat
# ---------------------------------------------------------------------------


def cmd_bloat(args) -> int:
    if not args.matrix:
        raise ConfigError("bloat needs at least one --matrix dataset")
    out = out_dir(args)
    rows = []
    for path in args.matrix:
        coo = matio.load_matrix(path)
        sym = matio.symmetrize(coo)
        a = matio.to_csr(sym)
        plan = oracle.symbolic_pass(a, a)
        rep = oracle.bloat_report(plan)
        sparsity = (1.0 - sym.nnz / (sym.n_rows * sym.n_cols)) * 100.0
        rows.append({
            "dataset": Path(path).name,
            "nodes": sym.n_rows,
            "edges_raw": coo.nnz,
            "nnz_symmetric": sym.nnz,
            "sparsity_pct": round(sparsity, 4),
            "pp_interim": rep.pp_interim,
            "nnz_output": rep.nnz_output,
            "bloat_percent": round(rep.bloat_percent, 2),
        })
        print(f"{rows[-1]['dataset']}: nodes={sym.n_rows} pp={rep.pp_interim} "
              f"out={rep.nnz_output} bloat={rep.bloat_percent:.2f}%")
    with (out / "bloat.csv").open("w") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    write_json(out / "bloat.json", rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# smash
# ---------------------------------------------------------------------------


def cmd_smash(args) -> int:
    name, a = load_input_matrix(args)
    if args.matrix_b:
        _, b = load_input_matrix(args, "matrix-b")
    else:
        b = a
    out = out_dir(args)
    versions = smash.VERSIONS if args.smash_version == "all" else [args.smash_version]
    reference = oracle.spgemm_gustavson(a, b)
    tol = 0.0 if args.integer_mode else 1e-9
    failures = 0
    reports = {}
    for version in versions:
        audit = smash.SmashAudit(version=version)
        cfg = smash.SmashConfig(version=version, n_workers=args.workers)
        got = smash.smash_spgemm(a, b, cfg, audit=audit)
        div = first_divergence(got, reference, tol)
        _report(f"smash-{version} ({args.workers} workers)", div, [] if div is None else [1])
        failures += div is not None
        reports[version] = audit.to_json_dict()
    write_json(out / "smash_audit.json", {"matrix": name, "versions": reports})
    return EXIT_VERIFY if failures else EXIT_OK


# ---------------------------------------------------------------------------
# gcn
# ---------------------------------------------------------------------------


def cmd_gcn(args) -> int:
    name, adj = load_input_matrix(args)
    rng = np.random.Generator(np.random.PCG64(args.seed + 17))
    x = rng.normal(size=(adj.n_cols, args.features))
    w = rng.normal(size=(args.features, args.hidden))
    job = oracle.gcn_layer_workload(adj, x, w)
    out = out_dir(args)

    if args.functional:
        aggregated = job.run_aggregation()
        stats = None
    else:
        x_csr = oracle.features_as_csr(x)
        mcfg = mapper_config(args)
        stats, agg_csr, _ = engine.run_spgemm_simulation(
            adj, x_csr, chip_config(args.config), mcfg, seed=args.seed
        )
        aggregated = matio.csr_to_dense(agg_csr)
        emit_run_outputs(out, stats)
    chained = job.run_combination(aggregated)
    err = np.max(np.abs(chained - job.reference) / np.maximum(np.abs(job.reference), 1.0))
    ok = err <= 1e-9
    write_json(
        out / "gcn_report.json",
        {
            "matrix": name,
            "features": args.features,
            "hidden": args.hidden,
            "max_relative_error": float(err),
            "pass": bool(ok),
            "aggregation": "simulated" if not args.functional else "functional",
        },
    )
    print(f"gcn: {name} f={args.features} h={args.hidden} rel_err={err:.3e} "
          f"{'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsim",
        description="Sparse matmul kernels and a decoupled-accelerator simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, matrices=True):
        if matrices:
            p.add_argument("--matrix", help="input matrix (.mtx or edge list)")
            p.add_argument("--matrix-b", dest="matrix_b", help="optional second operand")
            p.add_argument("--rmat", help="synthetic input, scale:ef[:a:b:c:d]")
            p.add_argument("--integer-mode", action="store_true",
                           help="replace values with small integers (exact arithmetic)")
        p.add_argument("--config", default="tile4",
                       help="tile4|tile16|tile64|tile16-gnn|file:PATH")
        p.add_argument("--mapper", default=mapping.DRHM_LOW, choices=MAPPER_CHOICES)
        p.add_argument("--k", type=int, default=16, help="mapper shift bit count")
        p.add_argument("--reseed", default=mapping.PER_ROW,
                       help="row | N items | inf")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="sparsim-out", help="output directory")

    p = sub.add_parser("run", help="simulate one sparse multiply")
    common(p)
    p.add_argument("--eviction", choices=[engine.ROLLING, engine.BARRIER],
                   default=engine.ROLLING)
    p.add_argument("--host-workers", type=int, default=1)
    p.add_argument("--emit-result", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="diff every execution path against the oracles")
    common(p)
    p.add_argument("--trace", help="replay this instruction trace instead")
    p.add_argument("--workers", type=int, default=4, help="host kernel workers")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="run a config x mapper x matrix grid")
    p.add_argument("--configs", default="tile4,tile16")
    p.add_argument("--mappers", default=",".join(MAPPER_CHOICES))
    p.add_argument("--matrix", action="append", help="repeatable dataset path")
    p.add_argument("--rmat", action="append", help="repeatable rmat spec")
    p.add_argument("--integer-mode", action="store_true")
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="sparsim-out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bloat", help="partial-product bloat for C = A*A")
    p.add_argument("--matrix", action="append", help="repeatable dataset path")
    p.add_argument("--out", default="sparsim-out")
    p.set_defaults(func=cmd_bloat)

    p = sub.add_parser("smash", help="run the host hashing kernel")
    common(p)
    p.add_argument("--smash-version", dest="smash_version", default="all",
                   choices=SMASH_CHOICES)
    p.add_argument("--workers", type=int, default=4)
    p.set_defaults(func=cmd_smash)

    p = sub.add_parser("gcn", help="one graph-convolution layer")
    common(p)
    p.add_argument("--features", type=int, default=16)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--functional", action="store_true",
                   help="skip the cycle simulator for the aggregation")
    p.set_defaults(func=cmd_gcn)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (MatrixFormatError, TraceError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except (VerificationError, SimulationError) as err:
        print(f"verification failed: {err}", file=sys.stderr)
        return EXIT_VERIFY
    except SparsimError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
