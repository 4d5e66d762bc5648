"""Sampled-particle load balancing with clamped slab boundary moves.

Each site reports its last-step force time, particle count, and a random
sample of particle x-positions.  The coordinator blends time and count into
a per-site cost, targets a sample-mass share proportional to 1/cost, and
moves each boundary toward the target quantile of the merged sample
distribution by at most ``move_limit`` of the box length per step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import SlabDomain, validate_domains

__all__ = [
    "SiteLoadReport",
    "sample_particles",
    "site_cost",
    "propose_boundaries",
    "sample_size",
]


def sample_size(n_particles, sampling_rate):
    """floor(N / rate), floored up to 1 for any non-empty site."""
    if n_particles == 0:
        return 0
    return max(1, n_particles // sampling_rate)


@dataclass
class SiteLoadReport:
    """One site's balancing inputs for a step."""

    site_id: int
    force_time_s: float
    particle_count: int
    sample_positions: np.ndarray

    def __post_init__(self):
        self.sample_positions = np.asarray(self.sample_positions, dtype=np.float64)
        if self.force_time_s < 0 or self.particle_count < 0:
            raise ValueError("force time and particle count must be non-negative")

    def validate_sample_size(self, sampling_rate):
        want = sample_size(self.particle_count, sampling_rate)
        if len(self.sample_positions) != want:
            raise ValueError(
                f"site {self.site_id}: {len(self.sample_positions)} samples, "
                f"expected {want} at rate {sampling_rate}")

    def to_bytes(self):
        import struct
        head = struct.pack("<IdQQ", self.site_id, self.force_time_s,
                           self.particle_count, len(self.sample_positions))
        return head + self.sample_positions.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, buf):
        import struct
        site_id, ft, count, ns = struct.unpack_from("<IdQQ", buf, 0)
        pos = np.frombuffer(buf, dtype="<f8", offset=28, count=ns).copy()
        return cls(site_id, ft, count, pos)


def sample_particles(particles, sampling_rate, seed):
    """Uniform sample of x-positions without replacement, deterministic."""
    if sampling_rate < 1:
        raise ValueError("sampling_rate must be >= 1")
    n = len(particles)
    k = sample_size(n, sampling_rate)
    if k == 0:
        return np.zeros(0)
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=k, replace=False)
    return np.sort(particles.pos[idx, 0])


def site_cost(report, totals, alpha=0.5):
    """alpha * (time / mean time) + (1 - alpha) * (count / mean count).

    ``totals`` is the list of all sites' reports. All-zero inputs cost 1.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    mean_t = float(np.mean([r.force_time_s for r in totals]))
    mean_n = float(np.mean([r.particle_count for r in totals]))
    t_term = report.force_time_s / mean_t if mean_t > 0 else 1.0
    n_term = report.particle_count / mean_n if mean_n > 0 else 1.0
    return alpha * t_term + (1.0 - alpha) * n_term


def propose_boundaries(domains, reports, move_limit, alpha=0.5, min_width=0.0):
    """New slab partition: quantile targets, per-step move clamp, width floor.

    Target boundary i sits at the merged-sample quantile where the cumulative
    1/cost share of sites 0..i ends; each boundary moves toward its target by
    at most ``move_limit`` (box units).  The result is always a valid
    partition with every slab at least ``min_width`` wide.
    """
    ordered = validate_domains(domains)
    by_site = {r.site_id: r for r in reports}
    if set(by_site) != {d.site_id for d in ordered}:
        raise ValueError("need exactly one report per site")
    if not 0.0 <= move_limit <= 1.0:
        raise ValueError("move_limit must lie in [0, 1]")
    n = len(ordered)
    if n == 1:
        return list(ordered)
    merged = np.sort(np.concatenate(
        [by_site[d.site_id].sample_positions for d in ordered]))
    if len(merged) == 0 or move_limit == 0.0:
        return list(ordered)

    costs = np.array([site_cost(by_site[d.site_id], reports, alpha) for d in ordered])
    share = (1.0 / costs) / np.sum(1.0 / costs)
    cum = np.cumsum(share)[:-1]
    targets = np.quantile(merged, np.clip(cum, 0.0, 1.0))

    new_bounds = np.empty(n + 1)
    new_bounds[0] = 0.0
    new_bounds[n] = 1.0
    for i in range(1, n):
        old = ordered[i - 1].hi
        step = np.clip(targets[i - 1] - old, -move_limit, move_limit)
        new_bounds[i] = old + step
    # enforce the width floor left to right, then right to left
    for i in range(1, n):
        lo_min = new_bounds[i - 1] + min_width
        if new_bounds[i] < lo_min:
            new_bounds[i] = lo_min
    for i in range(n - 1, 0, -1):
        hi_max = new_bounds[i + 1] - min_width
        if new_bounds[i] > hi_max:
            new_bounds[i] = hi_max
    # the floor pass must not undo the per-step clamp
    for i in range(1, n):
        old = ordered[i - 1].hi
        new_bounds[i] = old + np.clip(new_bounds[i] - old, -move_limit, move_limit)
    if np.any(np.diff(new_bounds) <= 0):
        # clamp and width floor irreconcilable this step; hold the partition
        return list(ordered)
    out = [SlabDomain(d.site_id, float(new_bounds[i]), float(new_bounds[i + 1]))
           for i, d in enumerate(ordered)]
    return validate_domains(out)
