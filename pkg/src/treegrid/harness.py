"""Initial conditions, the brute-force Ewald force oracle, and scenarios.

The Ewald oracle evaluates the exact periodic gravitational acceleration
(neutralizing background implied by dropping the zero mode) by the classic
real-space + reciprocal-space split, with a minimum-image Plummer softening
correction.  It shares no code with the tree or mesh modules and is the
reference every force-accuracy check compares against.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .domain import Particles, wrap_position

__all__ = [
    "generate_ic",
    "ewald_force",
    "direct_softened_energy",
    "Scenario",
    "ScenarioError",
    "ScenarioReport",
    "run_scenario",
    "scenario_names",
    "treepm_accelerations",
]

_EWALD_NMAX_LIMIT = 2048


def generate_ic(kind, n, seed=0, amplitude=0.0):
    """Equal-mass particles totalling unit mass; deterministic per seed.

    kinds: ``uniform-random``, ``lattice`` (n must be a perfect cube),
    ``lattice-perturbed`` (sinusoidal x displacement of the lattice), and
    ``plummer`` (virialized sphere, scale radius = amplitude or 0.03 box).
    """
    if n < 1:
        raise ValueError("need at least one particle")
    rng = np.random.default_rng(seed)
    ids = np.arange(n, dtype=np.uint64)
    mass = np.full(n, 1.0 / n)
    mom = np.zeros((n, 3))
    if kind == "uniform-random":
        pos = rng.uniform(0.0, 1.0, (n, 3))
    elif kind in ("lattice", "lattice-perturbed"):
        k = round(n ** (1.0 / 3.0))
        if k**3 != n:
            raise ValueError(f"lattice needs a perfect cube, got {n}")
        g = (np.arange(k) + 0.5) / k
        pos = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3).copy()
        if kind == "lattice-perturbed":
            pos[:, 0] = pos[:, 0] + amplitude * np.sin(2.0 * math.pi * pos[:, 0])
            pos = wrap_position(pos)
    elif kind == "plummer":
        a = amplitude if amplitude > 0 else 0.03
        pos, vel = _plummer_sphere(n, a, rng)
        mom = vel  # p = a^2 dx/dt with a = 1 in the frozen-expansion tests
    else:
        raise ValueError(f"unknown initial-condition kind {kind!r}")
    return Particles(ids, wrap_position(pos), mom, mass)


def _plummer_sphere(n, a, rng, r_max_over_a=8.0):
    """Positions/velocities of a unit-mass virialized Plummer model (G=1)."""
    pos = np.empty((n, 3))
    vel = np.empty((n, 3))
    i = 0
    while i < n:
        m = rng.uniform(0.0, 1.0)
        r = a / np.sqrt(m ** (-2.0 / 3.0) - 1.0)
        if r > r_max_over_a * a:
            continue
        u = rng.uniform(-1.0, 1.0)
        phi = rng.uniform(0.0, 2.0 * math.pi)
        s = math.sqrt(1.0 - u * u)
        pos[i] = (r * s * math.cos(phi), r * s * math.sin(phi), r * u)
        # velocity magnitude by rejection from q^2 (1-q^2)^(7/2)
        while True:
            q = rng.uniform(0.0, 1.0)
            if rng.uniform(0.0, 0.1) < q * q * (1.0 - q * q) ** 3.5:
                break
        v_esc = math.sqrt(2.0) * (1.0 + (r / a) ** 2) ** (-0.25) / math.sqrt(a)
        v = q * v_esc
        u2 = rng.uniform(-1.0, 1.0)
        phi2 = rng.uniform(0.0, 2.0 * math.pi)
        s2 = math.sqrt(1.0 - u2 * u2)
        vel[i] = (v * s2 * math.cos(phi2), v * s2 * math.sin(phi2), v * u2)
        i += 1
    return pos + 0.5, vel


# -- Ewald oracle ---------------------------------------------------------------

@njit(cache=True, nogil=True)
def _ewald_real_space(pos, mass, eps, nmax, alpha, acc):
    n = pos.shape[0]
    sqrt_pi = 1.7724538509055159
    for i in range(n):
        ax = 0.0; ay = 0.0; az = 0.0
        for j in range(n):
            rx = pos[i, 0] - pos[j, 0]; rx -= round(rx)
            ry = pos[i, 1] - pos[j, 1]; ry -= round(ry)
            rz = pos[i, 2] - pos[j, 2]; rz -= round(rz)
            m = mass[j]
            for nx in range(-nmax, nmax + 1):
                for ny in range(-nmax, nmax + 1):
                    for nz in range(-nmax, nmax + 1):
                        if i == j and nx == 0 and ny == 0 and nz == 0:
                            continue
                        dx = rx + nx; dy = ry + ny; dz = rz + nz
                        r2 = dx * dx + dy * dy + dz * dz
                        ar2 = alpha * alpha * r2
                        if ar2 > 700.0:
                            continue  # erfc underflow, exact zero in doubles
                        r = math.sqrt(r2)
                        b = math.erfc(alpha * r) + (2.0 * alpha * r / sqrt_pi) * math.exp(-ar2)
                        f = m * b / (r2 * r)
                        ax -= f * dx; ay -= f * dy; az -= f * dz
            if i != j and eps > 0.0:
                # replace the minimum-image Newtonian pair by a Plummer pair
                r2 = rx * rx + ry * ry + rz * rz
                c = m * ((r2 + eps * eps) ** (-1.5) - r2 ** (-1.5))
                ax -= c * rx; ay -= c * ry; az -= c * rz
        acc[i, 0] += ax; acc[i, 1] += ay; acc[i, 2] += az


@njit(cache=True, nogil=True)
def _ewald_k_space(pos, mass, alpha, kmax, acc):
    n = pos.shape[0]
    two_pi = 2.0 * math.pi
    k2max = kmax * kmax
    # structure factor S_h = sum_j m_j exp(-i 2 pi h . x_j), then the force
    # on each target needs only one pass over the h grid
    nh = 0
    for hx in range(-kmax, kmax + 1):
        for hy in range(-kmax, kmax + 1):
            for hz in range(-kmax, kmax + 1):
                h2 = hx * hx + hy * hy + hz * hz
                if 0 < h2 <= k2max:
                    nh += 1
    hvec = np.empty((nh, 3), np.float64)
    coef = np.empty(nh, np.float64)
    idx = 0
    for hx in range(-kmax, kmax + 1):
        for hy in range(-kmax, kmax + 1):
            for hz in range(-kmax, kmax + 1):
                h2 = hx * hx + hy * hy + hz * hz
                if 0 < h2 <= k2max:
                    hvec[idx, 0] = hx; hvec[idx, 1] = hy; hvec[idx, 2] = hz
                    coef[idx] = (two_pi / (math.pi * h2)) * math.exp(
                        -math.pi * math.pi * h2 / (alpha * alpha))
                    idx += 1
    s_re = np.zeros(nh)
    s_im = np.zeros(nh)
    for j in range(n):
        for k in range(nh):
            ph = two_pi * (hvec[k, 0] * pos[j, 0] + hvec[k, 1] * pos[j, 1]
                           + hvec[k, 2] * pos[j, 2])
            s_re[k] += mass[j] * math.cos(ph)
            s_im[k] -= mass[j] * math.sin(ph)
    for i in range(n):
        ax = 0.0; ay = 0.0; az = 0.0
        for k in range(nh):
            ph = two_pi * (hvec[k, 0] * pos[i, 0] + hvec[k, 1] * pos[i, 1]
                           + hvec[k, 2] * pos[i, 2])
            s = math.cos(ph) * s_im[k] + math.sin(ph) * s_re[k]
            f = coef[k] * s
            ax -= f * hvec[k, 0]; ay -= f * hvec[k, 1]; az -= f * hvec[k, 2]
        acc[i, 0] += ax; acc[i, 1] += ay; acc[i, 2] += az


def ewald_force(particles, eps, replica_cutoff=3, k_cutoff=8, alpha=2.0):
    """Exact periodic accelerations by direct Ewald summation.

    Intended as an oracle for small N; refuses N > 2048 to guard against
    accidental O(N^2) blowups.  Raising ``replica_cutoff`` and ``k_cutoff``
    by one changes no component by more than ~1e-6 relative at the default
    alpha.
    """
    n = len(particles)
    if n > _EWALD_NMAX_LIMIT:
        raise ValueError(f"ewald_force is an oracle for N <= {_EWALD_NMAX_LIMIT}, got {n}")
    if replica_cutoff < 2:
        raise ValueError("replica_cutoff must be >= 2")
    acc = np.zeros((n, 3))
    if n == 0:
        return acc
    _ewald_real_space(particles.pos, particles.mass, float(eps),
                      int(replica_cutoff), float(alpha), acc)
    _ewald_k_space(particles.pos, particles.mass, float(alpha), int(k_cutoff), acc)
    return acc


@njit(cache=True, nogil=True)
def _direct_energy(pos, mass, mom, eps):
    n = pos.shape[0]
    kin = 0.0
    pot = 0.0
    for i in range(n):
        kin += 0.5 * mass[i] * (mom[i, 0] ** 2 + mom[i, 1] ** 2 + mom[i, 2] ** 2)
        for j in range(i + 1, n):
            rx = pos[i, 0] - pos[j, 0]; rx -= round(rx)
            ry = pos[i, 1] - pos[j, 1]; ry -= round(ry)
            rz = pos[i, 2] - pos[j, 2]; rz -= round(rz)
            r2 = rx * rx + ry * ry + rz * rz
            pot -= mass[i] * mass[j] / math.sqrt(r2 + eps * eps)
    return kin, pot


def direct_softened_energy(particles, eps):
    """Kinetic + minimum-image Plummer potential energy (frozen expansion)."""
    kin, pot = _direct_energy(particles.pos, particles.mass, particles.mom, float(eps))
    return kin + pot, kin, pot


# -- scenarios -------------------------------------------------------------------

class ScenarioError(RuntimeError):
    """Unknown scenario name or a scenario that cannot be evaluated."""


@dataclass
class Assertion:
    """One tolerance-tagged expectation inside a scenario."""

    name: str
    measured: float
    expected: float
    kind: str            # "le" | "lt" | "abs" (|m - e| <= tol) | "eq"
    tol: float = 0.0
    timing: bool = False  # excluded from byte-identity comparisons

    @property
    def passed(self):
        if self.kind == "le":
            return self.measured <= self.expected
        if self.kind == "lt":
            return self.measured < self.expected
        if self.kind == "abs":
            return abs(self.measured - self.expected) <= self.tol
        if self.kind == "eq":
            return self.measured == self.expected
        raise ScenarioError(f"unknown assertion kind {self.kind!r}")

    def line(self):
        tol = {"le": "<=", "lt": "<", "eq": "=="}.get(self.kind, repr(self.tol))
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name}\t{self.measured!r}\t{self.expected!r}\t{tol}\t{status}"


@dataclass
class ScenarioReport:
    name: str
    assertions: list
    artifacts: list = field(default_factory=list)

    @property
    def passed(self):
        return all(a.passed for a in self.assertions)

    def text(self, include_timing=True):
        lines = [a.line() for a in self.assertions if include_timing or not a.timing]
        return "\n".join(lines) + "\n"

    def failures(self):
        return [a for a in self.assertions if not a.passed]

    def write(self, outdir):
        os.makedirs(outdir, exist_ok=True)
        path = os.path.join(outdir, f"{self.name}-report.tsv")
        with open(path, "w") as fh:
            fh.write(self.text())
        self.artifacts.append(path)
        return path


@dataclass(frozen=True)
class Scenario:
    """A named, fully seeded experiment with tolerance-tagged expectations."""

    name: str
    runner: object
    description: str = ""


def treepm_accelerations(particles, theta, eps, mesh_size, r_split, r_cut,
                         deconvolve=False):
    """Single-site tree + mesh accelerations (helper shared by scenarios)."""
    from . import mesh as mesh_mod
    from . import tree as tree_mod
    t = tree_mod.build_tree(particles)
    acc_s, _ = tree_mod.tree_force_many(t, particles.pos, theta, eps, r_split, r_cut)
    dm = mesh_mod.cic_assign(particles, mesh_size)
    forces = mesh_mod.solve_long_range(dm, r_split, deconvolve=deconvolve)
    return acc_s + mesh_mod.cic_interpolate(forces, particles.pos)


def _scenario_force_accuracy(outdir):
    from .domain import CosmologyParams, RunConfig
    from . import figures
    cfg = RunConfig(n_particles=512)
    cosmo = CosmologyParams()
    parts = generate_ic("uniform-random", 512, seed=42)
    ref = ewald_force(parts, cosmo.softening_box)
    rn = np.linalg.norm(ref, axis=1)
    errors = {}
    rms = {}
    for theta in (0.5, 0.3):
        acc = treepm_accelerations(parts, theta, cosmo.softening_box,
                                   cfg.mesh_size, cfg.r_split, cfg.r_cut)
        per = np.linalg.norm(acc - ref, axis=1) / rn
        errors[theta] = per
        rms[theta] = float(np.sqrt(np.mean(per**2)))
    asserts = [
        Assertion("rms-error-theta-0.5", rms[0.5], 0.02, "le"),
        Assertion("rms-error-theta-0.3-below-0.5", rms[0.3], rms[0.5], "lt"),
    ]
    rep = ScenarioReport("force-accuracy", asserts)
    fig = figures.render_force_errors(errors, os.path.join(outdir, "force-accuracy.png"))
    rep.artifacts.append(fig)
    return rep


def _overhead_run(latency_ms, outdir):
    from .domain import CosmologyParams, RunConfig
    from .orchestrator import run_simulation
    from .transport import EmuNetConfig
    cosmo = CosmologyParams(a_initial=1.0 / 10.0, softening_box=0.002)
    cfg = RunConfig(n_particles=8**3, mesh_size=32, n_sites=3, n_steps=2,
                    seed=17, sampling_rate=8, boundary_move_limit=0.01)
    ic = generate_ic("uniform-random", cfg.n_particles, seed=17)
    summary = run_simulation(cfg, ic, z_stop=8.5, cosmo=cosmo,
                             outdir=os.path.join(outdir, f"lat{latency_ms:g}"),
                             emu_cfg=EmuNetConfig(one_way_latency_ms=latency_ms))
    comm = total = 0.0
    for rows in summary["timings_per_site"]:
        for r in rows:
            comm += r.migrate_s + r.sample_s + r.let_s + r.mesh_s
            total += r.total_s
    return comm, total, summary


def _scenario_three_site_overhead(outdir):
    from . import figures
    comm0, total0, s0 = _overhead_run(0.0, outdir)
    comm20, total20, s20 = _overhead_run(20.0, outdir)
    asserts = [
        Assertion("time:comm-fraction-latency0-below-latency20",
                  comm0 / total0, comm20 / total20, "lt", timing=True),
        Assertion("time:comm-seconds-monotone", comm0, comm20, "lt", timing=True),
    ]
    rep = ScenarioReport("three-site-overhead", asserts)
    fig = figures.render_step_timings(
        s20["timings_per_site"][0],
        os.path.join(outdir, "three-site-overhead.png"),
        title="site 0, 20 ms one-way latency")
    rep.artifacts.append(fig)
    return rep


def _scenario_distributed_equivalence(outdir):
    from .domain import CosmologyParams, RunConfig
    from .orchestrator import run_simulation
    cosmo = CosmologyParams(a_initial=1.0 / 10.0, softening_box=0.002)
    cfg = RunConfig(n_particles=16**3, mesh_size=32, n_sites=1, n_steps=5,
                    seed=5, sampling_rate=64, boundary_move_limit=0.001)
    ic = generate_ic("uniform-random", cfg.n_particles, seed=11)
    s1 = run_simulation(cfg, ic, z_stop=8.0, cosmo=cosmo,
                        outdir=os.path.join(outdir, "serial"))
    s3 = run_simulation(cfg.with_(n_sites=3), ic, z_stop=8.0, cosmo=cosmo,
                        outdir=os.path.join(outdir, "threesite"))
    p1, p3 = s1["final_particles"], s3["final_particles"]
    dp = np.abs(p1.pos - p3.pos)
    dp = np.minimum(dp, 1.0 - dp)
    asserts = [
        Assertion("max-position-deviation", float(dp.max()), 1e-10, "le"),
        Assertion("census-preserved", float(np.array_equal(p1.ids, p3.ids)), 1.0, "eq"),
    ]
    return ScenarioReport("distributed-equivalence", asserts)


def synthetic_balance_run(n_steps=60, move_limit=0.01, slow_factor=2.0,
                          samples_per_site=2000, alpha=0.5, seed=99):
    """Two-site balancing loop with one site twice as slow per particle.

    Returns (spreads, bounds_history): the per-step cost spread and the
    boundary trajectory, the measured halves of the convergence checks.
    """
    from . import balancer as bal_mod
    from .domain import SlabDomain
    rng = np.random.default_rng(seed)
    domains = [SlabDomain(0, 0.0, 0.5), SlabDomain(1, 0.5, 1.0)]
    n_total = 200_000
    spreads = []
    bounds_history = []
    for step in range(n_steps):
        reports = []
        costs = []
        for d in domains:
            count = int(round(n_total * d.width))
            per_particle = slow_factor if d.site_id == 0 else 1.0
            xs = np.sort(rng.uniform(d.lo, d.hi, samples_per_site))
            reports.append(bal_mod.SiteLoadReport(d.site_id, per_particle * count,
                                                  count, xs))
        costs = [bal_mod.site_cost(r, reports, alpha) for r in reports]
        spread = (max(costs) - min(costs)) / np.mean(costs)
        spreads.append(spread)
        bounds_history.append([d.lo for d in domains] + [1.0])
        domains = bal_mod.propose_boundaries(domains, reports, move_limit,
                                             alpha=alpha, min_width=2.0 / 64)
    return np.asarray(spreads), np.asarray(bounds_history)


def _scenario_balance_convergence(outdir):
    from . import figures
    spreads, hist = synthetic_balance_run()
    reached = np.nonzero(spreads <= 0.05)[0]
    first = int(reached[0]) if len(reached) else 10**9
    # monotone decrease until convergence (tiny sampling wiggle allowed)
    pre = spreads[:first + 1] if len(reached) else spreads
    max_rise = float(np.max(np.diff(pre))) if len(pre) > 1 else 0.0
    asserts = [
        Assertion("steps-to-5-percent-spread", first, 60, "le"),
        Assertion("spread-monotone-decrease-max-rise", max_rise, 1e-3, "le"),
    ]
    rep = ScenarioReport("balance-convergence", asserts)
    fig = figures.render_balance_history(
        spreads, hist, os.path.join(outdir, "balance-convergence.png"))
    rep.artifacts.append(fig)
    return rep


def _scenario_transport_pacing(outdir):
    import time as _time
    from .transport import ChannelConfig, EmuNetConfig, open_channel_pair
    cfg = ChannelConfig(n_streams=4, pace_bytes_per_s=10_000_000,
                        connect_timeout_ms=10_000)
    a, b = open_channel_pair(cfg, EmuNetConfig(one_way_latency_ms=50.0))
    try:
        payload = os.urandom(1 << 20) * 40  # 40 MB
        t0 = _time.perf_counter()
        a.send_message(payload)
        got = b.recv_message(timeout=60)
        elapsed = _time.perf_counter() - t0
    finally:
        a.close()
        b.close()
    rate = len(payload) / elapsed
    asserts = [
        Assertion("bit-exact-delivery", float(got == payload), 1.0, "eq"),
        Assertion("time:aggregate-throughput-bytes-per-s", rate,
                  4 * 10_000_000 * 1.10, "le", timing=True),
    ]
    return ScenarioReport("transport-pacing", asserts)


def _scenario_energy_drift(outdir):
    from .domain import CosmologyParams, RunConfig
    from .orchestrator import run_simulation
    eps = 0.004
    cosmo = CosmologyParams(softening_box=eps, a_initial=1.0)
    cfg = RunConfig(n_particles=1000, mesh_size=64, n_sites=1, n_steps=100,
                    seed=3, freeze_expansion=True, fixed_dt=1e-4,
                    sampling_rate=1000)
    ic = generate_ic("plummer", 1000, seed=3)
    e0, k0, p0 = direct_softened_energy(ic, eps)
    summary = run_simulation(cfg, ic, z_stop=0.0, cosmo=cosmo,
                             outdir=os.path.join(outdir, "energy"))
    e1, k1, p1 = direct_softened_energy(summary["final_particles"], eps)
    drift = abs(e1 - e0) / abs(e0)
    asserts = [Assertion("relative-energy-drift-100-steps", float(drift), 0.01, "le")]
    return ScenarioReport("energy-drift", asserts)


def _scenario_census_migration(outdir):
    from .domain import CosmologyParams, RunConfig
    from .orchestrator import run_simulation
    cosmo = CosmologyParams(a_initial=1.0 / 10.0, softening_box=0.002)
    cfg = RunConfig(n_particles=8**3, mesh_size=32, n_sites=3, n_steps=20,
                    seed=23, sampling_rate=8, boundary_move_limit=0.01)
    ic = generate_ic("uniform-random", cfg.n_particles, seed=23)
    summary = run_simulation(cfg, ic, z_stop=5.0, cosmo=cosmo,
                             outdir=os.path.join(outdir, "census"),
                             check_census=True)
    final = summary["final_particles"]
    ok = np.array_equal(np.sort(final.ids), np.arange(cfg.n_particles, dtype=np.uint64))
    asserts = [Assertion("census-id-multiset-exact", float(ok), 1.0, "eq"),
               Assertion("steps-completed", summary["steps"], 20, "eq")]
    return ScenarioReport("census-migration", asserts)


_SCENARIOS = {
    "force-accuracy": Scenario(
        "force-accuracy", _scenario_force_accuracy,
        "TreePM vs direct periodic summation at theta 0.3 and 0.5"),
    "three-site-overhead": Scenario(
        "three-site-overhead", _scenario_three_site_overhead,
        "communication share at zero vs 20 ms emulated latency"),
    "distributed-equivalence": Scenario(
        "distributed-equivalence", _scenario_distributed_equivalence,
        "three emulated sites reproduce the single-site trajectory"),
    "balance-convergence": Scenario(
        "balance-convergence", _scenario_balance_convergence,
        "synthetic 2:1 imbalance converges under the move clamp"),
    "transport-pacing": Scenario(
        "transport-pacing", _scenario_transport_pacing,
        "striped paced transfer stays bit-exact and under the rate cap"),
    "energy-drift": Scenario(
        "energy-drift", _scenario_energy_drift,
        "frozen-expansion energy conservation on a virialized sphere"),
    "census-migration": Scenario(
        "census-migration", _scenario_census_migration,
        "no particle lost or duplicated across 20 migrating steps"),
}


def scenario_names():
    return sorted(_SCENARIOS)


def run_scenario(name, outdir=None):
    """Execute a named scenario; report + artifacts land in outdir."""
    if name not in _SCENARIOS:
        raise ScenarioError(
            f"unknown scenario {name!r}; known: {', '.join(scenario_names())}")
    outdir = outdir or os.path.join(".", f"scenario-{name}")
    os.makedirs(outdir, exist_ok=True)
    report = _SCENARIOS[name].runner(outdir)
    report.write(outdir)
    return report
