"""Short-range gravity: octree build, split kernel, tree walk, LET extraction.

The octree geometry is canonical: the root is always the unit box and nodes
are the recursive half-octants, identified by Morton key prefixes.  Walk
decisions (open / accept / out-of-range skip) depend only on that geometry
and on element counts, never on which site contributed the mass.  Essential
tree payloads carry, for every exported aggregate, its octant key, subtree
count and partial monopole, so a receiving site can rebuild a tree whose
walk-reachable structure and node monopoles match the serial tree over the
full particle set exactly (up to floating-point summation order).  Subtrees
entirely farther than r_cut from the destination slab are collapsed to a
single zero-force aggregate rather than dropped outright; this keeps every
ancestor monopole exact, which the serial-equivalence contract requires.

Kernel convention: the short-range pair acceleration on a target from a
source of mass m at periodic minimum-image separation vector dx (source
minus target, r = |dx|) is

    a = m * S(r) * (r^2 + eps^2)^(-3/2) * W(r) * dx

with the split truncation function

    S(r) = erfc(r / (2 r_split)) + (r / (r_split sqrt(pi))) exp(-r^2 / (4 r_split^2))

(the exact complement of the mesh module's long-range Gaussian filter
exp(-k^2 r_split^2)), Plummer softening eps, and W a C^1 taper that is 1
below 0.98 r_cut and falls smoothly to 0 at r_cut, so the kernel is exactly
zero for r >= r_cut and continuous there.  ``short_range_kernel`` exposes
the scalar force factor g(r) = r * S(r) * (r^2+eps^2)^(-3/2) * W(r), i.e.
|a| = m * g(r).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from .domain import Particles, SlabDomain

__all__ = [
    "MAX_DEPTH",
    "Octree",
    "OctreeNodeView",
    "LetPayload",
    "TreeElements",
    "build_tree",
    "build_walk_tree",
    "short_range_kernel",
    "tree_force",
    "tree_force_many",
    "extract_let",
    "TAPER_FRACTION",
]

MAX_DEPTH = 16
TAPER_FRACTION = 0.98  # kernel taper starts at this fraction of r_cut

_AGG_ID_BASE = np.uint64(1) << np.uint64(63)


# -- Morton keys --------------------------------------------------------------

def _part1by2(x):
    x = x.astype(np.uint64)
    x = (x | (x << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    x = (x | (x << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    x = (x | (x << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    x = (x | (x << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    x = (x | (x << np.uint64(2))) & np.uint64(0x1249249249249249)
    return x


def _compact1by2(x):
    x = x.astype(np.uint64) & np.uint64(0x1249249249249249)
    x = (x ^ (x >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    x = (x ^ (x >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    x = (x ^ (x >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    x = (x ^ (x >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    x = (x ^ (x >> np.uint64(32))) & np.uint64(0xFFFF)
    return x


def morton_keys(pos):
    """Full-depth Morton keys for wrapped positions in [0,1)^3."""
    scale = float(1 << MAX_DEPTH)
    cells = np.floor(pos * scale).astype(np.uint64)
    cells = np.minimum(cells, np.uint64((1 << MAX_DEPTH) - 1))
    return ((_part1by2(cells[:, 0]) << np.uint64(2))
            | (_part1by2(cells[:, 1]) << np.uint64(1))
            | _part1by2(cells[:, 2]))


def _key_to_center(keys, depths):
    """Cube centers from Morton key prefixes at the given depths."""
    keys = keys.astype(np.uint64)
    cx = _compact1by2(keys >> np.uint64(2)).astype(np.float64)
    cy = _compact1by2(keys >> np.uint64(1)).astype(np.float64)
    cz = _compact1by2(keys).astype(np.float64)
    # coordinates are full-depth cell indices of the cube's low corner
    width = 2.0 ** (-depths.astype(np.float64))
    cell = 2.0 ** (-MAX_DEPTH)
    out = np.empty((len(keys), 3))
    out[:, 0] = cx * cell + 0.5 * width
    out[:, 1] = cy * cell + 0.5 * width
    out[:, 2] = cz * cell + 0.5 * width
    return out


# -- element sets -------------------------------------------------------------

@dataclass
class TreeElements:
    """Point elements a walk tree is built from: raw particles and aggregates.

    ``count`` carries the number of underlying particles (1 for raws), so
    split decisions made from summed counts reproduce the full tree's
    structure.  ``pin_depth`` >= 0 marks an aggregate's own octant: the build
    never subdivides past it.  ``key`` is the full-depth Morton key (for
    aggregates: of their octant, zero-padded), the sole split criterion.
    """

    pos: np.ndarray
    mass: np.ndarray
    count: np.ndarray
    key: np.ndarray
    sort_id: np.ndarray
    pin_depth: np.ndarray

    @classmethod
    def from_particles(cls, particles):
        n = len(particles)
        return cls(
            pos=particles.pos,
            mass=particles.mass,
            count=np.ones(n, dtype=np.int64),
            key=morton_keys(particles.pos),
            sort_id=particles.ids.astype(np.uint64),
            pin_depth=np.full(n, -1, dtype=np.int8),
        )

    @classmethod
    def concat(cls, parts):
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("pos", "mass", "count", "key", "sort_id", "pin_depth")))


class OctreeNodeView:
    """Read-only view of one node, for tests and diagnostics."""

    def __init__(self, tree, i):
        self._t = tree
        self.index = i

    @property
    def center(self):
        return self._t.node_center[self.index]

    @property
    def half_width(self):
        return float(self._t.node_half[self.index])

    @property
    def total_mass(self):
        return float(self._t.node_mass[self.index])

    @property
    def com(self):
        return self._t.node_com[self.index]

    @property
    def count(self):
        return int(self._t.node_count[self.index])

    @property
    def is_leaf(self):
        return bool(self._t.node_leaf[self.index])

    @property
    def children(self):
        i = self.index
        if self._t.node_leaf[i]:
            return []
        f, n = self._t.node_child[i], self._t.node_nchild[i]
        return [OctreeNodeView(self._t, j) for j in range(f, f + n)]

    @property
    def element_slice(self):
        return slice(int(self._t.node_start[self.index]), int(self._t.node_end[self.index]))


class Octree:
    """Flat-array octree over a sorted element set (see module docstring)."""

    def __init__(self, elements, leaf_capacity=8):
        if leaf_capacity < 1:
            raise ValueError("leaf_capacity must be >= 1")
        self.leaf_capacity = leaf_capacity
        order = np.lexsort((elements.sort_id, elements.key))
        self.elem_pos = np.ascontiguousarray(elements.pos[order])
        self.elem_mass = np.ascontiguousarray(elements.mass[order])
        self.elem_count = np.ascontiguousarray(elements.count[order])
        self.elem_key = np.ascontiguousarray(elements.key[order])
        self.elem_sort_id = np.ascontiguousarray(elements.sort_id[order])
        self.elem_pin = np.ascontiguousarray(elements.pin_depth[order])
        self._sort_leaf_slices_by_id_pending = True
        self._build()
        self._reduce()

    # construction ------------------------------------------------------

    def _build(self):
        m = len(self.elem_key)
        starts, ends, depths, keys = [], [], [], []
        child0, nchild, leaf = [], [], []
        if m == 0:
            self._finalize_arrays(starts, ends, depths, keys, child0, nchild, leaf)
            return
        count_prefix = np.concatenate(([0], np.cumsum(self.elem_count)))  # exact (int)
        pin_idx = np.nonzero(self.elem_pin >= 0)[0]
        pin_at = self.elem_pin[pin_idx]
        starts.append(0); ends.append(m); depths.append(0); keys.append(np.uint64(0))
        child0.append(-1); nchild.append(0); leaf.append(True)
        level = [0]
        cap = self.leaf_capacity
        octant_range = np.arange(9)
        for depth in range(MAX_DEPTH):
            shift = np.uint64(3 * (MAX_DEPTH - depth - 1))
            oct_of = ((self.elem_key >> shift) & np.uint64(7)).astype(np.int8)
            nxt = []
            for ni in level:
                s, e = starts[ni], ends[ni]
                if len(pin_idx):
                    p0, p1 = np.searchsorted(pin_idx, (s, e))
                    if p0 < p1 and np.any(pin_at[p0:p1] == depth):
                        continue  # an aggregate is pinned at exactly this cube
                if count_prefix[e] - count_prefix[s] <= cap:
                    continue
                leaf[ni] = False
                child0[ni] = len(starts)
                bounds = s + np.searchsorted(oct_of[s:e], octant_range)
                created = 0
                for oct_i in range(8):
                    cs, ce = int(bounds[oct_i]), int(bounds[oct_i + 1])
                    if cs == ce:
                        continue
                    starts.append(cs); ends.append(ce); depths.append(depth + 1)
                    keys.append((self.elem_key[cs] >> shift) << shift)
                    child0.append(-1); nchild.append(0); leaf.append(True)
                    nxt.append(len(starts) - 1)
                    created += 1
                nchild[ni] = created
            level = nxt
            if not level:
                break
        self._finalize_arrays(starts, ends, depths, keys, child0, nchild, leaf)

    def _finalize_arrays(self, starts, ends, depths, keys, child0, nchild, leaf):
        self.node_start = np.asarray(starts, dtype=np.int64)
        self.node_end = np.asarray(ends, dtype=np.int64)
        self.node_depth = np.asarray(depths, dtype=np.int64)
        self.node_key = np.asarray(keys, dtype=np.uint64)
        self.node_child = np.asarray(child0, dtype=np.int64)
        self.node_nchild = np.asarray(nchild, dtype=np.int64)
        self.node_leaf = np.asarray(leaf, dtype=np.bool_)
        n = len(starts)
        if n:
            self.node_half = 0.5 * 2.0 ** (-self.node_depth.astype(np.float64))
            self.node_center = _key_to_center(self.node_key, self.node_depth)
            self.node_center[0] = 0.5  # root covers the whole box
            self.node_half[0] = 0.5
        else:
            self.node_half = np.zeros(0)
            self.node_center = np.zeros((0, 3))

    def _reduce(self):
        n = self.n_nodes
        self.node_mass = np.zeros(n)
        self.node_com = np.full((n, 3), 0.5)
        self.node_count = np.zeros(n, dtype=np.int64)
        if n == 0:
            return
        m = len(self.elem_mass)
        # leaf evaluation order is by particle id (deterministic across
        # equivalent trees); sort each leaf slice before the reductions
        if self._sort_leaf_slices_by_id_pending:
            for i in np.nonzero(self.node_leaf)[0]:
                s, e = self.node_start[i], self.node_end[i]
                if e - s > 1:
                    sub = np.argsort(self.elem_sort_id[s:e], kind="stable")
                    for arr in (self.elem_pos, self.elem_mass, self.elem_count,
                                self.elem_key, self.elem_sort_id, self.elem_pin):
                        arr[s:e] = arr[s:e][sub]
            self._sort_leaf_slices_by_id_pending = False
        # direct per-slice segment sums (never prefix differences): node
        # monopoles must agree across trees built from different element
        # supersets to near machine precision
        wpos = self.elem_pos * self.elem_mass[:, None]
        cum_c = np.concatenate(([0], np.cumsum(self.elem_count)))  # exact (int)
        self.node_count = cum_c[self.node_end] - cum_c[self.node_start]
        for depth in range(int(self.node_depth.max()) + 1):
            ids = np.nonzero(self.node_depth == depth)[0]
            if not len(ids):
                continue
            bounds = np.empty(2 * len(ids), dtype=np.int64)
            bounds[0::2] = self.node_start[ids]
            bounds[1::2] = self.node_end[ids]
            trailing = bounds[-1] == m
            idx = bounds[:-1] if trailing else bounds
            self.node_mass[ids] = np.add.reduceat(self.elem_mass, idx)[0::2]
            for ax in range(3):
                self.node_com[ids, ax] = np.add.reduceat(wpos[:, ax], idx)[0::2]
        self.node_com /= self.node_mass[:, None]

    # introspection ------------------------------------------------------

    @property
    def n_nodes(self):
        return len(self.node_start)

    @property
    def n_elements(self):
        return len(self.elem_mass)

    @property
    def total_mass(self):
        return float(self.node_mass[0]) if self.n_nodes else 0.0

    def node(self, i):
        return OctreeNodeView(self, i)

    @property
    def root(self):
        if self.n_nodes == 0:
            raise ValueError("tree is empty")
        return self.node(0)


def build_tree(particles, leaf_capacity=8):
    """Octree over particles; root is the unit box, positions must be wrapped."""
    if len(particles) and (np.any(particles.pos < 0.0) or np.any(particles.pos >= 1.0)):
        raise ValueError("particle positions outside the unit box; wrap first")
    return Octree(TreeElements.from_particles(particles), leaf_capacity)


def build_walk_tree(local_particles, payloads=(), leaf_capacity=8):
    """Tree over local particles plus received essential-tree payloads."""
    parts = [TreeElements.from_particles(local_particles)]
    for p in payloads:
        parts.append(p.to_elements())
    return Octree(TreeElements.concat(parts), leaf_capacity)


# -- split kernel -------------------------------------------------------------

@njit(cache=True, nogil=True, inline="always")
def _kernel_factor(r2, eps2, r_split, r_cut, taper_start):
    """S(r) * (r^2+eps^2)^(-3/2) * W(r); multiply by m * dx for the accel."""
    if r2 >= r_cut * r_cut:
        return 0.0
    r = math.sqrt(r2)
    x = r / (2.0 * r_split)
    s = math.erfc(x) + (r / (r_split * 1.7724538509055159)) * math.exp(-x * x)
    w = 1.0
    if r > taper_start:
        u = (r_cut - r) / (r_cut - taper_start)
        w = u * u * (3.0 - 2.0 * u)
    return s * (r2 + eps2) ** (-1.5) * w


@njit(cache=True, nogil=True)
def _kernel_g(r, eps, r_split, r_cut, taper_start):
    if r == 0.0:
        return 0.0
    return r * _kernel_factor(r * r, eps * eps, r_split, r_cut, taper_start)


def short_range_kernel(r, eps, r_split, r_cut):
    """Scalar force factor g(r): |accel| = m * g(r) for a pair at distance r.

    Exactly zero for r >= r_cut; continuous at r_cut through the taper
    window [0.98 r_cut, r_cut].  Vectorizes over r.
    """
    if r_split <= 0 or r_cut <= 0:
        raise ValueError("r_split and r_cut must be positive")
    taper_start = TAPER_FRACTION * r_cut
    r_arr = np.asarray(r, dtype=np.float64)
    if np.any(r_arr < 0):
        raise ValueError("separation must be non-negative")
    scalar = r_arr.ndim == 0
    flat = np.atleast_1d(r_arr)
    out = np.empty_like(flat)
    for i, ri in enumerate(flat):
        out[i] = _kernel_g(ri, eps, r_split, r_cut, taper_start)
    return float(out[0]) if scalar else out


# -- tree walk ----------------------------------------------------------------

@njit(cache=True, nogil=True)
def _walk_range(targets, i0, i1, out_acc, out_int,
                node_center, node_half, node_com, node_mass,
                node_child, node_nchild, node_start, node_end, node_leaf,
                elem_pos, elem_mass,
                theta, eps, r_split, r_cut):
    n_nodes = node_half.shape[0]
    if n_nodes == 0:
        return
    eps2 = eps * eps
    rc2 = r_cut * r_cut
    taper_start = TAPER_FRACTION * r_cut
    t2 = theta * theta
    stack = np.empty(2048, dtype=np.int64)
    for ti in range(i0, i1):
        tx = targets[ti, 0]; ty = targets[ti, 1]; tz = targets[ti, 2]
        ax = 0.0; ay = 0.0; az = 0.0
        inter = 0
        sp = 0
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            ni = stack[sp]
            h = node_half[ni]
            dx = node_center[ni, 0] - tx; dx -= round(dx)
            dy = node_center[ni, 1] - ty; dy -= round(dy)
            dz = node_center[ni, 2] - tz; dz -= round(dz)
            # whole cube beyond reach: zero contribution by construction
            ox = abs(dx) - h
            oy = abs(dy) - h
            oz = abs(dz) - h
            if ox < 0.0: ox = 0.0
            if oy < 0.0: oy = 0.0
            if oz < 0.0: oz = 0.0
            if ox * ox + oy * oy + oz * oz >= rc2:
                continue
            d2c = dx * dx + dy * dy + dz * dz
            width = 2.0 * h
            if width * width < t2 * d2c:
                # multipole accepted: single interaction with the node monopole
                cx = node_com[ni, 0] - tx; cx -= round(cx)
                cy = node_com[ni, 1] - ty; cy -= round(cy)
                cz = node_com[ni, 2] - tz; cz -= round(cz)
                r2 = cx * cx + cy * cy + cz * cz
                if r2 > 0.0:
                    f = node_mass[ni] * _kernel_factor(r2, eps2, r_split, r_cut, taper_start)
                    ax += f * cx; ay += f * cy; az += f * cz
                    inter += 1
            elif node_leaf[ni]:
                for ei in range(node_start[ni], node_end[ni]):
                    cx = elem_pos[ei, 0] - tx; cx -= round(cx)
                    cy = elem_pos[ei, 1] - ty; cy -= round(cy)
                    cz = elem_pos[ei, 2] - tz; cz -= round(cz)
                    r2 = cx * cx + cy * cy + cz * cz
                    if r2 > 0.0:
                        f = elem_mass[ei] * _kernel_factor(r2, eps2, r_split, r_cut, taper_start)
                        ax += f * cx; ay += f * cy; az += f * cz
                        inter += 1
            else:
                f = node_child[ni]
                for k in range(node_nchild[ni] - 1, -1, -1):
                    stack[sp] = f + k
                    sp += 1
        out_acc[ti, 0] = ax; out_acc[ti, 1] = ay; out_acc[ti, 2] = az
        out_int[ti] = inter


def tree_force_many(tree, targets, theta, eps, r_split, r_cut, workers=1):
    """Short-range accelerations and interaction counts for many targets.

    With ``workers`` > 1 the target range is split across that many threads;
    per-target results are bitwise independent of the worker count.
    """
    targets = np.ascontiguousarray(targets, dtype=np.float64).reshape(-1, 3)
    if theta < 0:
        raise ValueError("theta must be non-negative")
    n = targets.shape[0]
    acc = np.zeros((n, 3))
    inter = np.zeros(n, dtype=np.int64)
    if n == 0 or tree.n_nodes == 0:
        return acc, inter
    args = (tree.node_center, tree.node_half, tree.node_com, tree.node_mass,
            tree.node_child, tree.node_nchild, tree.node_start, tree.node_end,
            tree.node_leaf, tree.elem_pos, tree.elem_mass,
            float(theta), float(eps), float(r_split), float(r_cut))
    if workers <= 1 or n < 2 * workers:
        _walk_range(targets, 0, n, acc, inter, *args)
    else:
        bounds = np.linspace(0, n, workers + 1).astype(np.int64)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_walk_range, targets, int(bounds[w]), int(bounds[w + 1]),
                                acc, inter, *args)
                    for w in range(workers)]
            for f in futs:
                f.result()
    return acc, inter


def tree_force(tree, target, theta, eps, r_split, r_cut):
    """Single-target walk: (acceleration 3-vector, interaction count)."""
    acc, inter = tree_force_many(tree, np.asarray(target, dtype=np.float64).reshape(1, 3),
                                 theta, eps, r_split, r_cut)
    return acc[0], int(inter[0])


# -- local essential trees -----------------------------------------------------

@dataclass
class LetPayload:
    """Essential-tree fragment one site sends another.

    Aggregates are octant monopoles (key + depth pin the octant, count keeps
    the receiver's split decisions aligned with the full tree); raws are
    particles exported from leaves too close to the destination slab to
    summarize.
    """

    origin: int
    dest: int
    agg_key: np.ndarray
    agg_depth: np.ndarray
    agg_com: np.ndarray
    agg_mass: np.ndarray
    agg_count: np.ndarray
    raw_id: np.ndarray
    raw_pos: np.ndarray
    raw_mass: np.ndarray

    @classmethod
    def empty(cls, origin, dest):
        return cls(origin, dest,
                   np.zeros(0, np.uint64), np.zeros(0, np.uint8),
                   np.zeros((0, 3)), np.zeros(0), np.zeros(0, np.uint64),
                   np.zeros(0, np.uint64), np.zeros((0, 3)), np.zeros(0))

    @property
    def n_aggregates(self):
        return len(self.agg_mass)

    @property
    def n_raw(self):
        return len(self.raw_mass)

    def to_elements(self):
        na, nr = self.n_aggregates, self.n_raw
        return TreeElements(
            pos=np.concatenate([self.agg_com, self.raw_pos]),
            mass=np.concatenate([self.agg_mass, self.raw_mass]),
            count=np.concatenate([self.agg_count.astype(np.int64),
                                  np.ones(nr, dtype=np.int64)]),
            key=np.concatenate([self.agg_key,
                                morton_keys(self.raw_pos) if nr else np.zeros(0, np.uint64)]),
            sort_id=np.concatenate([
                _AGG_ID_BASE + np.uint64(self.origin) * np.uint64(1 << 40)
                + np.arange(na, dtype=np.uint64),
                self.raw_id]),
            pin_depth=np.concatenate([self.agg_depth.astype(np.int8),
                                      np.full(nr, -1, dtype=np.int8)]),
        )

    def to_bytes(self):
        import struct
        head = struct.pack("<IIQQ", self.origin, self.dest,
                           self.n_aggregates, self.n_raw)
        blobs = [head,
                 self.agg_key.astype("<u8").tobytes(),
                 self.agg_depth.astype("u1").tobytes(),
                 self.agg_com.astype("<f8").tobytes(),
                 self.agg_mass.astype("<f8").tobytes(),
                 self.agg_count.astype("<u8").tobytes(),
                 self.raw_id.astype("<u8").tobytes(),
                 self.raw_pos.astype("<f8").tobytes(),
                 self.raw_mass.astype("<f8").tobytes()]
        return b"".join(blobs)

    @classmethod
    def from_bytes(cls, buf):
        import struct
        origin, dest, na, nr = struct.unpack_from("<IIQQ", buf, 0)
        off = 24
        def take(dtype, shape, itembytes):
            nonlocal off
            count = int(np.prod(shape)) if shape else 0
            arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
            off += count * itembytes
            return arr.reshape(shape).copy()
        agg_key = take("<u8", (na,), 8)
        agg_depth = take("u1", (na,), 1)
        agg_com = take("<f8", (na, 3), 8)
        agg_mass = take("<f8", (na,), 8)
        agg_count = take("<u8", (na,), 8)
        raw_id = take("<u8", (nr,), 8)
        raw_pos = take("<f8", (nr, 3), 8)
        raw_mass = take("<f8", (nr,), 8)
        if off != len(buf):
            raise ValueError("essential-tree payload has trailing bytes")
        return cls(origin, dest, agg_key, agg_depth, agg_com, agg_mass,
                   agg_count, raw_id, raw_pos, raw_mass)


def _interval_gap(a0, a1, b0, b1):
    """Periodic distance between intervals [a0,a1] and [b0,b1] within [0,1]."""
    if a1 >= b0 and b1 >= a0:
        return 0.0
    if a1 < b0:
        return min(b0 - a1, a0 + 1.0 - b1)
    return min(a0 - b1, b0 + 1.0 - a1)


def _point_interval_gap(x, lo, hi):
    if lo <= x <= hi:
        return 0.0
    if x < lo:
        return min(lo - x, x + 1.0 - hi)
    return min(x - hi, lo + 1.0 - x)


def extract_let(tree, remote, theta, r_cut, origin=0):
    """Essential-tree payload for targets anywhere in the remote slab.

    A node is exported whole (aggregate) when the acceptance criterion holds
    even for the nearest possible target, or when its whole cube lies beyond
    r_cut from the slab (zero force for every target, but its monopole keeps
    ancestor bookkeeping exact).  Otherwise it is opened; leaves export
    their raw particles.
    """
    if not isinstance(remote, SlabDomain):
        raise TypeError("remote must be a SlabDomain")
    if theta < 0 or r_cut <= 0:
        raise ValueError("theta must be >= 0 and r_cut positive")
    agg_nodes = []
    raw_slices = []
    if tree.n_nodes and tree.node_count[0] > 0:
        lo, hi = remote.lo, remote.hi
        stack = [0]
        while stack:
            ni = stack.pop()
            h = tree.node_half[ni]
            cx = tree.node_center[ni, 0]
            if _interval_gap(cx - h, cx + h, lo, hi) >= r_cut:
                agg_nodes.append(ni)
                continue
            d_min = _point_interval_gap(cx, lo, hi)
            if 2.0 * h < theta * d_min:
                agg_nodes.append(ni)
                continue
            if tree.node_leaf[ni]:
                raw_slices.append((tree.node_start[ni], tree.node_end[ni]))
                continue
            f, n = tree.node_child[ni], tree.node_nchild[ni]
            stack.extend(range(f, f + n))
    if not agg_nodes and not raw_slices:
        return LetPayload.empty(origin, remote.site_id)
    ai = np.asarray(sorted(agg_nodes), dtype=np.int64)
    if len(ai):
        agg_key = tree.node_key[ai]
        agg_depth = tree.node_depth[ai].astype(np.uint8)
        agg_com = tree.node_com[ai]
        agg_mass = tree.node_mass[ai]
        agg_count = tree.node_count[ai].astype(np.uint64)
    else:
        agg_key = np.zeros(0, np.uint64); agg_depth = np.zeros(0, np.uint8)
        agg_com = np.zeros((0, 3)); agg_mass = np.zeros(0)
        agg_count = np.zeros(0, np.uint64)
    if raw_slices:
        idx = np.concatenate([np.arange(s, e) for s, e in sorted(raw_slices)])
        raw_id = tree.elem_sort_id[idx]
        raw_pos = tree.elem_pos[idx]
        raw_mass = tree.elem_mass[idx]
    else:
        raw_id = np.zeros(0, np.uint64); raw_pos = np.zeros((0, 3)); raw_mass = np.zeros(0)
    return LetPayload(origin, remote.site_id, agg_key, agg_depth, agg_com,
                      agg_mass, agg_count, raw_id, raw_pos, raw_mass)
