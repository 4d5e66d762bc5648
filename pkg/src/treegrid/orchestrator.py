"""Per-step orchestration across sites: the four communication phases,
force evaluation, leapfrog update, instrumentation, snapshots, summaries.

Step structure (all sites in lockstep, enforced by a step/phase handshake
header on every message):

1. balancing-sample exchange, boundary update (coordinator: site 0);
2. particle migration honoring the new boundaries;
3. PM: CIC deposit, sparse occupied-cell broadcast, assembled slab FFT
   solve, long-range interpolation;
4. PP: local essential tree exchange, short-range tree walk;
5. leapfrog kick-drift-kick: the second half-kick of a step is applied at
   the start of the next step with the freshly computed forces (one force
   evaluation per step); a closing force pass after the last step
   synchronizes momenta;
6. periodic wrap; out-of-slab particles are left marked for the next
   step's migration phase.
"""

from __future__ import annotations

import math
import os
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import balancer as bal
from . import cosmology as cosmo_mod
from . import mesh as mesh_mod
from . import tree as tree_mod
from .domain import (CosmologyParams, Particles, RunConfig, SlabDomain,
                     StepTimings, TIMINGS_CSV_HEADER, slab_contains,
                     validate_domains, wrap_position)
from .transport import ChannelConfig, EmuNetwork, TransportError, open_channel

__all__ = [
    "SyncFault",
    "PhaseError",
    "SnapshotFormatError",
    "SnapshotTruncatedError",
    "SiteRuntime",
    "run_step",
    "run_simulation",
    "write_snapshot",
    "read_snapshot",
    "write_timings_csv",
    "read_timings_csv",
    "summarize_rates",
    "equal_domains",
    "SIM_CHANNEL_CONFIG",
]

SNAPSHOT_MAGIC = b"TGSN"
SNAPSHOT_VERSION = 1
_SNAP_HEAD = struct.Struct("<4sIQdddddd")
_RECORD_DTYPE = np.dtype([("id", "<u8"), ("pos", "<f8", (3,)),
                          ("mom", "<f8", (3,)), ("mass", "<f8")])

# desk-scale simulation channels: striping without the 64-stream thread bill
SIM_CHANNEL_CONFIG = ChannelConfig(n_streams=4, pace_bytes_per_s=0,
                                   connect_timeout_ms=30_000)

_PHASE_SAMPLE = 1
_PHASE_BOUNDS = 2
_PHASE_MIGRATE = 3
_PHASE_MESH = 4
_PHASE_LET = 5
_ENVELOPE = struct.Struct("<IBI")


class SyncFault(TransportError):
    """Sites disagreed on the step or phase of a message."""


class PhaseError(RuntimeError):
    def __init__(self, phase, site_id, cause):
        super().__init__(f"phase {phase!r} failed on site {site_id}: {cause}")
        self.phase = phase
        self.site_id = site_id
        self.cause = cause


class SnapshotFormatError(ValueError):
    pass


class SnapshotTruncatedError(ValueError):
    pass


# -- snapshot I/O ---------------------------------------------------------------

def write_snapshot(path, particles, cosmo, a):
    """Binary snapshot; round-trips bit-exactly through read_snapshot."""
    head = _SNAP_HEAD.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, len(particles),
                           a, cosmo.box_mpc, cosmo.omega0, cosmo.lambda0,
                           cosmo.h0, cosmo.sigma8)
    rec = np.empty(len(particles), dtype=_RECORD_DTYPE)
    rec["id"] = particles.ids
    rec["pos"] = particles.pos
    rec["mom"] = particles.mom
    rec["mass"] = particles.mass
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(rec.tobytes())
    return path


def read_snapshot(path):
    """(particles, cosmo, a) from a snapshot file."""
    with open(path, "rb") as fh:
        head = fh.read(_SNAP_HEAD.size)
        if len(head) < _SNAP_HEAD.size:
            raise SnapshotTruncatedError(f"{path}: header truncated")
        magic, version, n, a, box, om, la, h0, s8 = _SNAP_HEAD.unpack(head)
        if magic != SNAPSHOT_MAGIC:
            raise SnapshotFormatError(f"{path}: bad magic {magic!r}")
        if version != SNAPSHOT_VERSION:
            raise SnapshotFormatError(f"{path}: unsupported version {version}")
        body = fh.read()
    if len(body) != n * _RECORD_DTYPE.itemsize:
        raise SnapshotTruncatedError(
            f"{path}: header claims {n} records, body holds "
            f"{len(body) // _RECORD_DTYPE.itemsize}")
    rec = np.frombuffer(body, dtype=_RECORD_DTYPE)
    parts = Particles(rec["id"].copy(), rec["pos"].copy(), rec["mom"].copy(),
                      rec["mass"].copy(), validate=False)
    cosmo = CosmologyParams(omega0=om, lambda0=la, h0=h0, sigma8=s8,
                            box_mpc=box, a_initial=min(a, 1.0))
    return parts, cosmo, a


def _particles_to_bytes(p):
    rec = np.empty(len(p), dtype=_RECORD_DTYPE)
    rec["id"] = p.ids
    rec["pos"] = p.pos
    rec["mom"] = p.mom
    rec["mass"] = p.mass
    return rec.tobytes()


def _particles_from_bytes(buf):
    rec = np.frombuffer(buf, dtype=_RECORD_DTYPE)
    return Particles(rec["id"].copy(), rec["pos"].copy(), rec["mom"].copy(),
                     rec["mass"].copy(), validate=False)


# -- timings CSV ----------------------------------------------------------------

def write_timings_csv(path, rows):
    with open(path, "w") as fh:
        fh.write(TIMINGS_CSV_HEADER + "\n")
        for r in rows:
            fh.write(r.csv_row() + "\n")
    return path


def read_timings_csv(path):
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != TIMINGS_CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            f = line.strip().split(",")
            rows.append(StepTimings(step=int(f[0]), z=float(f[1]),
                                    calc_s=float(f[2]), migrate_s=float(f[3]),
                                    sample_s=float(f[4]), let_s=float(f[5]),
                                    mesh_s=float(f[6]), total_s=float(f[7]),
                                    interactions=int(f[8])))
    return rows


def summarize_rates(rows_per_site):
    """Sustained and peak interaction rates from per-site timing rows.

    sustained = total interactions / total wall seconds (per-step wall is
    the slowest site's total); peak = the best single step by the same
    per-step definition.
    """
    if not rows_per_site or not rows_per_site[0]:
        return {"steps": 0, "wall_s": 0.0, "interactions": 0,
                "sustained_per_s": 0.0, "peak_per_s": 0.0}
    n_steps = len(rows_per_site[0])
    total_inter = 0
    total_wall = 0.0
    peak = 0.0
    for k in range(n_steps):
        inter_k = sum(rows[k].interactions for rows in rows_per_site)
        wall_k = max(rows[k].total_s for rows in rows_per_site)
        total_inter += inter_k
        total_wall += wall_k
        if wall_k > 0:
            peak = max(peak, inter_k / wall_k)
    return {"steps": n_steps, "wall_s": total_wall, "interactions": total_inter,
            "sustained_per_s": total_inter / total_wall if total_wall > 0 else 0.0,
            "peak_per_s": peak}


def equal_domains(n_sites):
    edges = np.linspace(0.0, 1.0, n_sites + 1)
    return [SlabDomain(i, float(edges[i]), float(edges[i + 1]))
            for i in range(n_sites)]


# -- site runtime ----------------------------------------------------------------

@dataclass
class SiteRuntime:
    """Everything one site needs to take steps in lockstep with its peers."""

    site_id: int
    config: RunConfig
    cosmo: CosmologyParams
    domains: list
    particles: Particles
    channels: dict = field(default_factory=dict)   # peer site_id -> Channel
    timings: list = field(default_factory=list)
    step_index: int = 0
    pending_kick: float = 0.0
    a_current: float = 0.0
    force_walk_s: float = 0.0
    csv_path: str | None = None
    _csv_fh: object = None

    def __post_init__(self):
        validate_domains(self.domains)
        if self.a_current == 0.0:
            self.a_current = self.cosmo.a_initial

    @property
    def domain(self):
        return self.domains[self.site_id]

    @property
    def n_sites(self):
        return len(self.domains)

    @property
    def peers(self):
        return [d.site_id for d in self.domains if d.site_id != self.site_id]

    # messaging ------------------------------------------------------------

    def _send(self, peer, phase, payload):
        head = _ENVELOPE.pack(self.step_index, phase, self.site_id)
        self.channels[peer].send_message(head + payload)

    def _recv(self, peer, phase):
        data = self.channels[peer].recv_message()
        step, ph, origin = _ENVELOPE.unpack_from(data, 0)
        if step != self.step_index or ph != phase:
            raise SyncFault(
                f"site {self.site_id} expected step {self.step_index} phase {phase}, "
                f"got step {step} phase {ph} from site {origin}")
        return origin, data[_ENVELOPE.size:]

    def _exchange(self, phase, payload_for):
        """Symmetric all-to-all: send to every peer, then collect from every peer."""
        for peer in self.peers:
            self._send(peer, phase, payload_for(peer))
        out = {}
        for peer in self.peers:
            origin, payload = self._recv(peer, phase)
            out[origin] = payload
        return out

    def open_csv(self, path):
        self.csv_path = path
        self._csv_fh = open(path, "w")
        self._csv_fh.write(TIMINGS_CSV_HEADER + "\n")
        self._csv_fh.flush()

    def log_row(self, row):
        self.timings.append(row)
        if self._csv_fh is not None:
            self._csv_fh.write(row.csv_row() + "\n")
            self._csv_fh.flush()

    def close_csv(self):
        if self._csv_fh is not None:
            self._csv_fh.close()
            self._csv_fh = None

    def close(self):
        self.close_csv()
        for ch in self.channels.values():
            ch.close()


def _phase_sample(rt):
    """Gather load reports on site 0, rebalance, broadcast new boundaries."""
    cfg = rt.config
    seed = (cfg.seed, rt.step_index, rt.site_id)
    xs = bal.sample_particles(rt.particles, cfg.sampling_rate, seed)
    last_calc = rt.timings[-1].calc_s if rt.timings else 0.0
    report = bal.SiteLoadReport(rt.site_id, last_calc, len(rt.particles), xs)
    if rt.n_sites == 1:
        return 0.0
    t0 = time.perf_counter()
    if rt.site_id == 0:
        reports = [report]
        for peer in rt.peers:
            origin, payload = rt._recv(peer, _PHASE_SAMPLE)
            reports.append(bal.SiteLoadReport.from_bytes(payload))
        reports.sort(key=lambda r: r.site_id)
        new_domains = bal.propose_boundaries(
            rt.domains, reports, cfg.boundary_move_limit, alpha=cfg.balance_alpha,
            min_width=2.0 / cfg.mesh_size)
        bounds = np.array([d.lo for d in new_domains] + [1.0])
        blob = bounds.astype("<f8").tobytes()
        for peer in rt.peers:
            rt._send(peer, _PHASE_BOUNDS, blob)
    else:
        rt._send(0, _PHASE_SAMPLE, report.to_bytes())
        origin, blob = rt._recv(0, _PHASE_BOUNDS)
        bounds = np.frombuffer(blob, dtype="<f8")
        new_domains = [SlabDomain(i, float(bounds[i]), float(bounds[i + 1]))
                       for i in range(rt.n_sites)]
    elapsed = time.perf_counter() - t0
    for old, new in zip(rt.domains, new_domains):
        if abs(new.lo - old.lo) > cfg.boundary_move_limit + 1e-15:
            raise PhaseError("sample", rt.site_id,
                             f"boundary moved {abs(new.lo-old.lo)} > limit")
    rt.domains = list(new_domains)
    return elapsed


def _phase_migrate(rt):
    """Ship every particle to the site owning its x position."""
    t_comm = 0.0
    dom = rt.domain
    x = rt.particles.pos[:, 0]
    stay = slab_contains(dom, x)
    outgoing = {}
    for peer in rt.peers:
        pd = rt.domains[peer]
        sel = slab_contains(pd, x)
        outgoing[peer] = rt.particles.select(sel)
    keep = rt.particles.select(stay)
    if rt.n_sites > 1:
        t0 = time.perf_counter()
        received = rt._exchange(_PHASE_MIGRATE,
                                lambda peer: _particles_to_bytes(outgoing[peer]))
        t_comm = time.perf_counter() - t0
        incoming = [_particles_from_bytes(b) for _, b in sorted(received.items())]
        rt.particles = Particles.concat([keep] + incoming)
    else:
        rt.particles = keep
    if len(rt.particles) and not np.all(slab_contains(dom, rt.particles.pos[:, 0])):
        raise PhaseError("migrate", rt.site_id, "particle escaped its slab")
    return t_comm


def _phase_mesh(rt):
    """Deposit, broadcast occupied cells, assemble, solve, interpolate."""
    cfg = rt.config
    t_calc = 0.0
    t0 = time.perf_counter()
    own = mesh_mod.cic_assign(rt.particles, cfg.mesh_size, rt.domain)
    t_calc += time.perf_counter() - t0
    t_comm = 0.0
    payloads = []
    dense_remote = []
    if rt.n_sites > 1:
        if cfg.sparse_mesh:
            blob = mesh_mod.sparse_encode(own, rt.site_id).to_bytes()
        else:
            blob = own.values.astype("<f8").tobytes()
        t0 = time.perf_counter()
        received = rt._exchange(_PHASE_MESH, lambda peer: blob)
        t_comm = time.perf_counter() - t0
        for origin in sorted(received):
            buf = received[origin]
            if cfg.sparse_mesh:
                payloads.append(mesh_mod.SparseMeshPayload.from_bytes(buf, origin))
            else:
                dense_remote.append(np.frombuffer(buf, dtype="<f8")
                                    .reshape((cfg.mesh_size,) * 3))
    t0 = time.perf_counter()
    if cfg.sparse_mesh:
        density = mesh_mod.assemble_density(own, payloads)
    else:
        total = own.values.copy()
        for arr in dense_remote:
            total += arr
        density = mesh_mod.DensityMesh(cfg.mesh_size, total)
    plane_slabs = _domain_planes(rt.domains, cfg.mesh_size)
    forces = mesh_mod.solve_long_range(density, cfg.r_split, plane_slabs=plane_slabs,
                                       deconvolve=cfg.cic_deconvolve)
    accel_long = mesh_mod.cic_interpolate(forces, rt.particles.pos)
    t_calc += time.perf_counter() - t0
    return t_comm, t_calc, accel_long


def _domain_planes(domains, mesh_size):
    edges = [0]
    for d in domains:
        p0, p1 = mesh_mod.plane_range(d, mesh_size)
        edges.append(p1)
    edges[-1] = mesh_size
    out = []
    for i in range(len(domains)):
        if edges[i + 1] > edges[i]:
            out.append((edges[i], edges[i + 1]))
    if not out:
        out = [(0, mesh_size)]
    out[-1] = (out[-1][0], mesh_size)
    return out


def _phase_let(rt):
    """Exchange essential trees and evaluate short-range forces."""
    cfg = rt.config
    t0 = time.perf_counter()
    local_tree = tree_mod.build_tree(rt.particles)
    lets = {peer: tree_mod.extract_let(local_tree, rt.domains[peer], cfg.theta,
                                       cfg.r_cut, origin=rt.site_id)
            for peer in rt.peers}
    t_calc = time.perf_counter() - t0
    t_comm = 0.0
    payloads = []
    if rt.n_sites > 1:
        t0 = time.perf_counter()
        received = rt._exchange(_PHASE_LET, lambda peer: lets[peer].to_bytes())
        t_comm = time.perf_counter() - t0
        payloads = [tree_mod.LetPayload.from_bytes(b)
                    for _, b in sorted(received.items())]
    t0 = time.perf_counter()
    walk_tree = tree_mod.build_walk_tree(rt.particles, payloads)
    t_build = time.perf_counter() - t0
    t0 = time.perf_counter()
    accel_short, inter = tree_mod.tree_force_many(
        walk_tree, rt.particles.pos, cfg.theta, rt.cosmo.softening_box,
        cfg.r_split, cfg.r_cut, workers=cfg.workers_per_site)
    t_walk = time.perf_counter() - t0
    rt.force_walk_s += t_walk
    return t_comm, t_calc + t_build + t_walk, accel_short, int(inter.sum())


def _step_edges(rt, a_start, a_end):
    if rt.config.freeze_expansion:
        dt = rt.config.fixed_dt
        return dt, dt / 2.0, dt / 2.0
    a_mid = math.exp(0.5 * (math.log(a_start) + math.log(a_end)))
    drift_c, _ = cosmo_mod.step_coefficients(a_start, a_end, rt.cosmo)
    _, kick_first = cosmo_mod.step_coefficients(a_start, a_mid, rt.cosmo)
    _, kick_second = cosmo_mod.step_coefficients(a_mid, a_end, rt.cosmo)
    return drift_c, kick_first, kick_second


def _labeled(phase, rt, fn, *args):
    try:
        return fn(rt, *args)
    except TransportError as exc:
        raise PhaseError(phase, rt.site_id, exc) from exc


def run_step(rt, a_start, a_end):
    """One synchronized step; returns (and logs) its StepTimings row."""
    t_start = time.perf_counter()
    z = cosmo_mod.z_of_a(a_start) if not rt.config.freeze_expansion \
        else 1.0 / rt.cosmo.a_initial - 1.0
    sample_s = _labeled("sample", rt, _phase_sample)
    migrate_s = _labeled("migrate", rt, _phase_migrate)
    mesh_s, calc_mesh, accel_long = _labeled("mesh", rt, _phase_mesh)
    let_s, calc_tree, accel_short, interactions = _labeled("let", rt, _phase_let)
    accel = accel_short + accel_long
    t0 = time.perf_counter()
    drift_c, kick_first, kick_second = _step_edges(rt, a_start, a_end)
    p = cosmo_mod.kick(rt.particles, accel, rt.pending_kick + kick_first)
    p = cosmo_mod.drift(p, drift_c)
    rt.pending_kick = kick_second
    rt.particles = Particles(p.ids, wrap_position(p.pos), p.mom, p.mass,
                             validate=False)
    calc_kdk = time.perf_counter() - t0
    rt.a_current = a_end
    row = StepTimings(step=rt.step_index, z=z,
                      calc_s=calc_mesh + calc_tree + calc_kdk,
                      migrate_s=migrate_s, sample_s=sample_s,
                      let_s=let_s, mesh_s=mesh_s,
                      total_s=time.perf_counter() - t_start,
                      interactions=interactions)
    row.validate()
    rt.log_row(row)
    rt.step_index += 1
    return row


def _closing_kick(rt):
    """Final force pass to apply the deferred half-kick (phases 1-4 only)."""
    if rt.pending_kick == 0.0:
        return
    _labeled("sample", rt, _phase_sample)
    _labeled("migrate", rt, _phase_migrate)
    _, _, accel_long = _labeled("mesh", rt, _phase_mesh)
    _, _, accel_short, _ = _labeled("let", rt, _phase_let)
    rt.particles = cosmo_mod.kick(rt.particles, accel_short + accel_long,
                                  rt.pending_kick)
    rt.pending_kick = 0.0
    rt.step_index += 1


# -- whole-run driver -----------------------------------------------------------

def _load_ic(ic_source):
    if isinstance(ic_source, Particles):
        return ic_source, None
    parts, cosmo, a = read_snapshot(ic_source)
    return parts, (cosmo, a)


def _split_by_domains(particles, domains):
    return [particles.select(slab_contains(d, particles.pos[:, 0])) for d in domains]


def _census_ids(runtimes):
    return np.sort(np.concatenate([rt.particles.ids for rt in runtimes]))


def run_simulation(config, ic_source, z_stop, outdir=".", cosmo=None,
                   backend="emu", emu_cfg=None, channel_config=None,
                   snapshot_name="snapshot_final.tgsn", check_census=True):
    """Drive every site of an emulated run to z_stop; emit CSVs + snapshot.

    Returns a summary dict with per-definition interaction rates, per-site
    CSV paths, the snapshot path, and the gathered final particle state.
    For the real-socket backend use the CLI, which runs one site per
    process.
    """
    if backend != "emu":
        raise ValueError("run_simulation drives in-process emulated runs; "
                         "use the CLI for the net backend")
    particles0, from_snap = _load_ic(ic_source)
    if cosmo is None:
        cosmo = from_snap[0] if from_snap else CosmologyParams()
    if from_snap and from_snap[1] and not config.freeze_expansion:
        cosmo = CosmologyParams(omega0=cosmo.omega0, lambda0=cosmo.lambda0,
                                h0=cosmo.h0, sigma8=cosmo.sigma8,
                                box_mpc=cosmo.box_mpc,
                                softening_box=cosmo.softening_box,
                                a_initial=from_snap[1])
    a_start = cosmo.a_initial
    a_end = a_start if config.freeze_expansion else cosmo_mod.a_of_z(z_stop)
    if not config.freeze_expansion and a_end < a_start:
        raise ValueError("z_stop precedes the initial epoch")
    n_steps = config.n_steps if (config.freeze_expansion or a_end > a_start) else 0
    if config.freeze_expansion:
        edges = np.full(n_steps + 1, a_start)
    else:
        edges = cosmo_mod.lna_schedule(a_start, a_end, n_steps)
        n_steps = len(edges) - 1

    os.makedirs(outdir, exist_ok=True)
    domains = equal_domains(config.n_sites)
    shards = _split_by_domains(particles0, domains)
    network = EmuNetwork()
    if emu_cfg is not None:
        network.set_default_path(emu_cfg)
    ch_cfg = channel_config or SIM_CHANNEL_CONFIG

    runtimes = [SiteRuntime(site_id=i, config=config, cosmo=cosmo,
                            domains=list(domains), particles=shards[i])
                for i in range(config.n_sites)]
    for rt in runtimes:
        rt.open_csv(os.path.join(outdir, f"timings_site{rt.site_id}.csv"))

    # channel mesh: both ends of each pair connect through the rendezvous
    def connect(rt):
        for peer in rt.peers:
            rt.channels[peer] = open_channel(
                (f"site{rt.site_id}", f"site{peer}"), ch_cfg, "emu", network=network)
    _run_on_site_threads(runtimes, connect)

    ids0 = _census_ids(runtimes)
    t_wall0 = time.perf_counter()
    try:
        for k in range(n_steps):
            _run_on_site_threads(runtimes, lambda rt, k=k: run_step(
                rt, float(edges[k]), float(edges[k + 1])))
            if check_census:
                ids = _census_ids(runtimes)
                if not np.array_equal(ids, ids0):
                    raise PhaseError("census", -1,
                                     f"id multiset changed at step {k}")
        if n_steps > 0:
            _run_on_site_threads(runtimes, _closing_kick)
    finally:
        for rt in runtimes:
            rt.close_csv()
    wall_s = time.perf_counter() - t_wall0

    final = Particles.concat([rt.particles for rt in runtimes]).sorted_by_id()
    snap_path = os.path.join(outdir, snapshot_name)
    write_snapshot(snap_path, final, cosmo, float(edges[-1]))
    summary = summarize_rates([rt.timings for rt in runtimes])
    summary.update({
        "run_wall_s": wall_s,
        "csv_paths": [rt.csv_path for rt in runtimes],
        "snapshot_path": snap_path,
        "final_particles": final,
        "domains": [(d.lo, d.hi) for d in runtimes[0].domains],
        "force_walk_s": sum(rt.force_walk_s for rt in runtimes),
        "timings_per_site": [rt.timings for rt in runtimes],
    })
    for rt in runtimes:
        rt.close()
    return summary


def pair_port_base(i, j, n_sites, n_streams, port_base):
    """Deterministic port block for the channel between sites i and j."""
    lo, hi = min(i, j), max(i, j)
    index = 0
    for a in range(n_sites):
        for b in range(a + 1, n_sites):
            if (a, b) == (lo, hi):
                return port_base + index * n_streams
            index += 1
    raise ValueError(f"no such site pair ({i}, {j}) among {n_sites} sites")


def run_site_net(config, ic_source, z_stop, site_id, peer_hosts=None,
                 cosmo=None, outdir=".", channel_config=None,
                 snapshot_name=None):
    """One site of a real-socket run; every site process loads the same IC.

    The lower site id of each pair listens, the higher connects; stream k
    of a pair uses pair_port_base + k.  Returns the local summary.
    """
    from .transport import DEFAULT_PORT_BASE
    particles0, from_snap = _load_ic(ic_source)
    if cosmo is None:
        cosmo = from_snap[0] if from_snap else CosmologyParams()
    a_start = cosmo.a_initial
    a_end = a_start if config.freeze_expansion else cosmo_mod.a_of_z(z_stop)
    n_steps = config.n_steps
    if config.freeze_expansion:
        edges = np.full(n_steps + 1, a_start)
    else:
        edges = cosmo_mod.lna_schedule(a_start, a_end, n_steps)
        n_steps = len(edges) - 1
    os.makedirs(outdir, exist_ok=True)
    domains = equal_domains(config.n_sites)
    local = _split_by_domains(particles0, domains)[site_id]
    rt = SiteRuntime(site_id=site_id, config=config, cosmo=cosmo,
                     domains=list(domains), particles=local)
    rt.open_csv(os.path.join(outdir, f"timings_site{site_id}.csv"))
    ch_cfg = channel_config or SIM_CHANNEL_CONFIG
    base = int(os.environ.get("TREEGRID_PORT_BASE", DEFAULT_PORT_BASE))
    hosts = peer_hosts or ["127.0.0.1"] * config.n_sites
    try:
        for a in range(config.n_sites):
            for b in range(a + 1, config.n_sites):
                if site_id not in (a, b):
                    continue
                peer = b if site_id == a else a
                pb = pair_port_base(a, b, config.n_sites, ch_cfg.n_streams, base)
                if site_id == a:
                    rt.channels[peer] = open_channel(f":{pb}", ch_cfg, "net",
                                                     role="listen")
                else:
                    rt.channels[peer] = open_channel(f"{hosts[peer]}:{pb}",
                                                     ch_cfg, "net", role="connect")
        for k in range(n_steps):
            run_step(rt, float(edges[k]), float(edges[k + 1]))
        if n_steps > 0:
            _closing_kick(rt)
    finally:
        rt.close_csv()
    snap = snapshot_name or f"snapshot_site{site_id}.tgsn"
    snap_path = os.path.join(outdir, snap)
    write_snapshot(snap_path, rt.particles.sorted_by_id(), cosmo, float(edges[-1]))
    summary = summarize_rates([rt.timings])
    summary.update({"csv_paths": [rt.csv_path], "snapshot_path": snap_path,
                    "site_id": site_id, "force_walk_s": rt.force_walk_s,
                    "timings_per_site": [rt.timings]})
    rt.close()
    return summary


def _run_on_site_threads(runtimes, fn):
    """Run fn(rt) for every site concurrently; re-raise the first failure."""
    if len(runtimes) == 1:
        fn(runtimes[0])
        return
    errors = {}

    def wrap(rt):
        try:
            fn(rt)
        except BaseException as exc:  # noqa: BLE001 - surfaced below
            errors[rt.site_id] = exc

    threads = [threading.Thread(target=wrap, args=(rt,), daemon=True,
                                name=f"site{rt.site_id}")
               for rt in runtimes]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        site_id = sorted(errors)[0]
        raise errors[site_id]
