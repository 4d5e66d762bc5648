"""Command-line interface.

Subcommands:

* ``treegrid run``             -- drive a simulation (emulated sites in one
  process, or one site of a real-socket run per process);
* ``treegrid bench-transport`` -- measure a channel configuration;
* ``treegrid oracle``          -- compare tree + mesh forces against the
  direct periodic summation;
* ``treegrid balance-demo``    -- run the synthetic load-balancing loop.

Every report path writes delimited output (CSV/TSV) and a PNG figure next
to it.  Exit code 0 on success, 1 with a labeled message otherwise.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time

import numpy as np

from . import figures
from .domain import CosmologyParams, RunConfig
from .harness import ewald_force, generate_ic, synthetic_balance_run, treepm_accelerations
from .orchestrator import run_simulation, run_site_net
from .transport import ChannelConfig, EmuNetConfig, measure_path, open_channel_pair, serve_echo

_COSMO_KEYS = {f.name for f in dataclasses.fields(CosmologyParams)}
_RUN_KEYS = {f.name for f in dataclasses.fields(RunConfig)}
_SPECIAL_KEYS = {"ic", "ic_seed", "ic_amplitude", "z_stop"}


def _parse_value(text):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text.strip("\"'")


def load_config_file(path):
    """key = value lines into (RunConfig kwargs, CosmologyParams kwargs, extras)."""
    run_kw, cosmo_kw, extra = {}, {}, {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            value = _parse_value(val)
            if key in _RUN_KEYS:
                run_kw[key] = value
            elif key in _COSMO_KEYS:
                cosmo_kw[key] = value
            elif key in _SPECIAL_KEYS:
                extra[key] = value
            else:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
    return run_kw, cosmo_kw, extra


_IC_KINDS = {"uniform-random", "lattice", "lattice-perturbed", "plummer"}


def _load_ic_arg(source, n, seed, amplitude):
    if source and source not in _IC_KINDS and os.path.exists(source):
        return source  # snapshot path; the run loads it
    kind = source or "uniform-random"
    return generate_ic(kind, n, seed=seed, amplitude=amplitude)


def _cmd_run(args):
    run_kw, cosmo_kw, extra = ({}, {}, {})
    if args.config:
        run_kw, cosmo_kw, extra = load_config_file(args.config)
    if args.sites is not None:
        run_kw["n_sites"] = args.sites
    config = RunConfig(**run_kw)
    cosmo = CosmologyParams(**cosmo_kw)
    z_stop = args.z_stop if args.z_stop is not None else extra.get("z_stop", 0.0)
    ic = _load_ic_arg(extra.get("ic"), config.n_particles,
                      extra.get("ic_seed", config.seed),
                      extra.get("ic_amplitude", 0.0))
    os.makedirs(args.outdir, exist_ok=True)
    if args.backend == "emu":
        emu = EmuNetConfig(one_way_latency_ms=args.emu_latency_ms,
                           bandwidth_bytes_per_s=args.emu_bandwidth_mbps * 1e6)
        if args.site not in (None, "all"):
            print("note: emulated runs execute every site in-process; "
                  f"--site {args.site} selects the figure/summary view",
                  file=sys.stderr)
        summary = run_simulation(config, ic, z_stop, outdir=args.outdir,
                                 cosmo=cosmo, emu_cfg=emu)
        view = int(args.site) if args.site not in (None, "all") else 0
        rows = summary["timings_per_site"][view]
    else:
        if args.site in (None, "all"):
            raise SystemExit("--backend net needs an explicit --site id")
        peer_hosts = (args.peer_hosts.split(",") if args.peer_hosts else None)
        summary = run_site_net(config, ic, z_stop, int(args.site),
                               peer_hosts=peer_hosts, cosmo=cosmo,
                               outdir=args.outdir)
        rows = summary["timings_per_site"][0]
    fig = figures.render_step_timings(
        rows, os.path.join(args.outdir, "step_timings.png"))
    print(f"steps: {summary['steps']}")
    print(f"interactions: {summary['interactions']}")
    print(f"sustained interactions/s: {summary['sustained_per_s']:.6e}")
    print(f"peak interactions/s: {summary['peak_per_s']:.6e}")
    print(f"snapshot: {summary['snapshot_path']}")
    for p in summary["csv_paths"]:
        print(f"timings: {p}")
    print(f"figure: {fig}")
    return 0


def _cmd_bench_transport(args):
    import threading
    cfg = ChannelConfig(n_streams=args.streams,
                        buffer_bytes=args.buffer_kb * 1024,
                        pace_bytes_per_s=int(args.pace_mbps * 1e6),
                        connect_timeout_ms=20_000)
    emu = EmuNetConfig(one_way_latency_ms=args.latency_ms,
                       bandwidth_bytes_per_s=args.bandwidth_mbps * 1e6,
                       jitter_ms=args.jitter_ms, seed=args.seed)
    a, b = open_channel_pair(cfg, emu)
    try:
        echo = threading.Thread(target=serve_echo, args=(b, 2 * args.reps),
                                daemon=True)
        echo.start()
        rtt, tput = measure_path(a, int(args.size_mb * 1e6), args.reps)
        echo.join(timeout=60)
    finally:
        a.close()
        b.close()
    os.makedirs(args.outdir, exist_ok=True)
    label = f"{args.streams}str/{args.latency_ms:g}ms/{args.pace_mbps:g}MBs"
    result = {"label": label, "rtt_s": rtt, "throughput_bps": tput}
    tsv = os.path.join(args.outdir, "bench-transport.tsv")
    with open(tsv, "w") as fh:
        fh.write("label\trtt_s\tthroughput_bytes_per_s\n")
        fh.write(f"{label}\t{rtt!r}\t{tput!r}\n")
    fig = figures.render_transport_bench([result],
                                         os.path.join(args.outdir, "bench-transport.png"))
    print(f"rtt: {rtt*1e3:.3f} ms")
    print(f"throughput: {tput/1e6:.3f} MB/s")
    print(f"report: {tsv}")
    print(f"figure: {fig}")
    return 0


def _cmd_oracle(args):
    cfg = RunConfig(n_particles=args.n)
    cosmo = CosmologyParams()
    parts = generate_ic("uniform-random", args.n, seed=args.seed)
    t0 = time.perf_counter()
    ref = ewald_force(parts, cosmo.softening_box)
    t_oracle = time.perf_counter() - t0
    rn = np.linalg.norm(ref, axis=1)
    errors = {}
    os.makedirs(args.outdir, exist_ok=True)
    tsv = os.path.join(args.outdir, "oracle-report.tsv")
    with open(tsv, "w") as fh:
        fh.write("theta\trms_relative_error\tmax_relative_error\n")
        for theta in (0.3, 0.5):
            acc = treepm_accelerations(parts, theta, cosmo.softening_box,
                                       cfg.mesh_size, cfg.r_split, cfg.r_cut)
            per = np.linalg.norm(acc - ref, axis=1) / rn
            errors[theta] = per
            fh.write(f"{theta}\t{float(np.sqrt(np.mean(per**2)))!r}"
                     f"\t{float(per.max())!r}\n")
            print(f"theta {theta}: rms {np.sqrt(np.mean(per**2)):.4%}, "
                  f"max {per.max():.4%}")
    fig = figures.render_force_errors(errors, os.path.join(args.outdir, "oracle.png"))
    print(f"oracle time: {t_oracle:.2f} s for N={args.n}")
    print(f"report: {tsv}")
    print(f"figure: {fig}")
    return 0


def _cmd_balance_demo(args):
    spreads, hist = synthetic_balance_run(n_steps=args.steps,
                                          move_limit=args.move_limit,
                                          slow_factor=args.ratio,
                                          seed=args.seed)
    os.makedirs(args.outdir, exist_ok=True)
    csv = os.path.join(args.outdir, "balance-demo.csv")
    with open(csv, "w") as fh:
        fh.write("step,cost_spread," +
                 ",".join(f"bound{i}" for i in range(hist.shape[1])) + "\n")
        for k in range(len(spreads)):
            fh.write(f"{k},{float(spreads[k])!r}," +
                     ",".join(repr(float(v)) for v in hist[k]) + "\n")
    fig = figures.render_balance_history(spreads, hist,
                                         os.path.join(args.outdir, "balance-demo.png"))
    reached = np.nonzero(spreads <= 0.05)[0]
    msg = f"converged to <=5% spread at step {reached[0]}" if len(reached) \
        else "did not reach 5% spread"
    print(msg)
    print(f"report: {csv}")
    print(f"figure: {fig}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="treegrid", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="drive a simulation")
    r.add_argument("--config", help="key = value config file")
    r.add_argument("--site", default=None,
                   help="site id (net backend) or 'all' (emulated)")
    r.add_argument("--sites", type=int, default=None, help="number of sites")
    r.add_argument("--backend", choices=("emu", "net"), default="emu")
    r.add_argument("--emu-latency-ms", type=float, default=0.0)
    r.add_argument("--emu-bandwidth-mbps", type=float, default=1250.0)
    r.add_argument("--z-stop", type=float, default=None)
    r.add_argument("--peer-hosts", help="comma-separated peer hosts (net)")
    r.add_argument("--outdir", default="treegrid-run")
    r.set_defaults(fn=_cmd_run)

    b = sub.add_parser("bench-transport", help="measure a channel")
    b.add_argument("--streams", type=int, default=64)
    b.add_argument("--buffer-kb", type=int, default=768)
    b.add_argument("--pace-mbps", type=float, default=10.0)
    b.add_argument("--latency-ms", type=float, default=0.0)
    b.add_argument("--bandwidth-mbps", type=float, default=1250.0)
    b.add_argument("--jitter-ms", type=float, default=0.0)
    b.add_argument("--size-mb", type=float, default=8.0)
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--outdir", default="treegrid-bench")
    b.set_defaults(fn=_cmd_bench_transport)

    o = sub.add_parser("oracle", help="force accuracy vs direct summation")
    o.add_argument("--n", type=int, default=512)
    o.add_argument("--seed", type=int, default=42)
    o.add_argument("--outdir", default="treegrid-oracle")
    o.set_defaults(fn=_cmd_oracle)

    d = sub.add_parser("balance-demo", help="synthetic balancing run")
    d.add_argument("--steps", type=int, default=60)
    d.add_argument("--move-limit", type=float, default=0.01)
    d.add_argument("--ratio", type=float, default=2.0)
    d.add_argument("--seed", type=int, default=99)
    d.add_argument("--outdir", default="treegrid-balance")
    d.set_defaults(fn=_cmd_balance_demo)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        label = getattr(exc, "phase", None)
        prefix = f"[{label}] " if label else ""
        print(f"treegrid {args.command}: {prefix}{exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
