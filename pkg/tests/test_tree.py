import math

import numpy as np
import pytest

from treegrid.domain import Particles, SlabDomain
from treegrid.tree import (LetPayload, TAPER_FRACTION, build_tree,
                           build_walk_tree, extract_let, short_range_kernel,
                           tree_force, tree_force_many)

R_SPLIT = 3.5 / 64
R_CUT = 4.5 * R_SPLIT


def uniform_particles(n, seed=0):
    rng = np.random.default_rng(seed)
    return Particles(np.arange(n, dtype=np.uint64), rng.uniform(0, 1, (n, 3)),
                     np.zeros((n, 3)), np.full(n, 1.0 / n))


def min_image(v):
    return v - np.round(v)


def direct_short_range(particles, target, eps, r_split, r_cut):
    """Plain pair summation of the documented short-range kernel."""
    acc = np.zeros(3)
    for pos, m in zip(particles.pos, particles.mass):
        dv = min_image(pos - target)
        r = np.linalg.norm(dv)
        if r == 0.0:
            continue
        g = short_range_kernel(r, eps, r_split, r_cut)
        acc += m * g * dv / r
    return acc


class TestBuildTree:
    def test_single_particle_leaf(self):
        p = Particles(np.array([0], dtype=np.uint64), np.array([[0.3, 0.6, 0.9]]),
                      np.zeros((1, 3)), np.ones(1))
        t = build_tree(p)
        assert t.n_nodes == 1
        assert t.root.is_leaf
        assert np.allclose(t.root.com, [0.3, 0.6, 0.9])
        assert t.root.total_mass == 1.0

    def test_eight_octant_centers(self):
        g = np.array([0.25, 0.75])
        pos = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
        p = Particles(np.arange(8, dtype=np.uint64), pos, np.zeros((8, 3)),
                      np.full(8, 0.125))
        t = build_tree(p, leaf_capacity=1)
        root = t.root
        assert not root.is_leaf
        assert len(root.children) == 8
        assert all(c.is_leaf for c in root.children)
        assert np.allclose(root.com, 0.5, atol=1e-15)

    def test_mass_closure_every_node(self):
        p = uniform_particles(10_000, seed=4)
        t = build_tree(p)
        for i in range(t.n_nodes):
            node = t.node(i)
            if node.is_leaf:
                s = node.element_slice
                child_mass = float(np.sum(t.elem_mass[s]))
            else:
                child_mass = sum(c.total_mass for c in node.children)
            assert node.total_mass == pytest.approx(child_mass, rel=1e-12)

    def test_com_inside_node_cube(self):
        p = uniform_particles(2000, seed=5)
        t = build_tree(p)
        for i in range(t.n_nodes):
            node = t.node(i)
            assert np.all(node.com >= node.center - node.half_width - 1e-12)
            assert np.all(node.com <= node.center + node.half_width + 1e-12)

    def test_counts_accumulate(self):
        p = uniform_particles(500, seed=6)
        t = build_tree(p)
        assert t.node_count[0] == 500

    def test_outside_unit_box_rejected(self):
        p = Particles(np.array([0], dtype=np.uint64), np.array([[0.3, 0.6, 0.9]]),
                      np.zeros((1, 3)), np.ones(1))
        p.pos[0, 0] = 1.5
        with pytest.raises(ValueError):
            build_tree(p)

    def test_deterministic_for_fixed_input(self):
        p = uniform_particles(800, seed=7)
        t1 = build_tree(p)
        t2 = build_tree(p)
        assert np.array_equal(t1.node_key, t2.node_key)
        assert np.array_equal(t1.node_mass, t2.node_mass)


class TestShortRangeKernel:
    def test_zero_beyond_cutoff(self):
        r = np.array([R_CUT, R_CUT * 1.0001, 2 * R_CUT, 10.0])
        assert np.all(short_range_kernel(r, 1e-4, R_SPLIT, R_CUT) == 0.0)

    def test_finite_at_zero_with_softening(self):
        eps = 1e-3
        g = short_range_kernel(np.array([0.0, eps * 1e-3]), eps, R_SPLIT, R_CUT)
        assert np.all(np.isfinite(g))
        # force factor bounded by the Plummer peak ~ eps^-2 scaling
        r = np.linspace(0, R_CUT, 2000)
        gmax = short_range_kernel(r, eps, R_SPLIT, R_CUT).max()
        assert gmax <= 1.0 / eps**2

    def test_matches_high_precision_formula_at_r_split(self):
        import mpmath
        mpmath.mp.dps = 50
        r = mpmath.mpf(R_SPLIT)
        rs = mpmath.mpf(R_SPLIT)
        x = r / (2 * rs)
        s = mpmath.erfc(x) + (r / (rs * mpmath.sqrt(mpmath.pi))) * mpmath.exp(-x * x)
        expect = float(r * s / r**3)  # eps = 0, taper inactive at r_split
        got = short_range_kernel(R_SPLIT, 0.0, R_SPLIT, R_CUT)
        assert got == pytest.approx(expect, rel=1e-12)

    def test_continuous_at_cutoff(self):
        left = short_range_kernel(R_CUT * (1.0 - 1e-9), 0.0, R_SPLIT, R_CUT)
        inner = short_range_kernel(R_CUT * TAPER_FRACTION, 0.0, R_SPLIT, R_CUT)
        assert left <= 1e-6 * inner
        assert short_range_kernel(R_CUT, 0.0, R_SPLIT, R_CUT) == 0.0

    def test_negative_separation_rejected(self):
        with pytest.raises(ValueError):
            short_range_kernel(-0.1, 0.0, R_SPLIT, R_CUT)


class TestTreeForce:
    def test_theta_zero_equals_direct_summation(self):
        p = uniform_particles(300, seed=9)
        t = build_tree(p)
        eps = 1e-4
        for ti in (0, 17, 255):
            ref = direct_short_range(p, p.pos[ti], eps, R_SPLIT, R_CUT)
            acc, _ = tree_force(t, p.pos[ti], 0.0, eps, R_SPLIT, R_CUT)
            scale = max(np.linalg.norm(ref), 1e-300)
            assert np.linalg.norm(acc - ref) <= 1e-12 * scale

    def test_lattice_symmetry_cancels(self):
        k = 8
        g = (np.arange(k) + 0.5) / k
        pos = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
        p = Particles(np.arange(k**3, dtype=np.uint64), pos.copy(),
                      np.zeros((k**3, 3)), np.full(k**3, 1.0 / k**3))
        t = build_tree(p)
        acc, _ = tree_force(t, p.pos[0], 0.0, 1e-5, R_SPLIT, R_CUT)
        assert np.linalg.norm(acc) < 1e-10

    def test_smaller_theta_is_more_accurate(self):
        p = uniform_particles(512, seed=10)
        t = build_tree(p)
        eps = 1e-4
        ref, _ = tree_force_many(t, p.pos, 0.0, eps, R_SPLIT, R_CUT)
        scale = np.linalg.norm(ref, axis=1)
        keep = scale > np.percentile(scale, 5)

        def rms(theta):
            acc, _ = tree_force_many(t, p.pos, theta, eps, R_SPLIT, R_CUT)
            err = np.linalg.norm(acc - ref, axis=1)[keep] / scale[keep]
            return np.sqrt(np.mean(err**2))

        assert rms(0.3) < rms(0.5)

    def test_interaction_count_matches_reference_walk(self):
        p = uniform_particles(256, seed=11)
        t = build_tree(p)
        theta, eps = 0.6, 1e-4

        def reference_count(target):
            count = 0
            stack = [0]
            while stack:
                ni = stack.pop()
                h = t.node_half[ni]
                d = min_image(target - t.node_center[ni])
                off = np.maximum(np.abs(d) - h, 0.0)
                if np.dot(off, off) >= R_CUT**2:
                    continue
                d2 = np.dot(d, d)
                if (2 * h) ** 2 < theta**2 * d2:
                    dv = min_image(t.node_com[ni] - target)
                    if np.dot(dv, dv) > 0:
                        count += 1
                elif t.node_leaf[ni]:
                    for e in range(t.node_start[ni], t.node_end[ni]):
                        dv = min_image(t.elem_pos[e] - target)
                        if np.dot(dv, dv) > 0:
                            count += 1
                else:
                    f, n = t.node_child[ni], t.node_nchild[ni]
                    stack.extend(range(f, f + n))
            return count

        acc, inter = tree_force_many(t, p.pos[:20], theta, eps, R_SPLIT, R_CUT)
        for i in range(20):
            assert inter[i] == reference_count(p.pos[i])

    def test_isolated_pair_antisymmetry(self):
        pos = np.array([[0.45, 0.5, 0.5], [0.55, 0.5, 0.5]])
        p = Particles(np.array([0, 1], dtype=np.uint64), pos, np.zeros((2, 3)),
                      np.array([0.3, 0.7]))
        t = build_tree(p)
        # cutoff beyond the box diagonal, theta=0: symmetric direct evaluation
        big_cut = 2.0
        a0, _ = tree_force(t, pos[0], 0.0, 1e-3, 0.5, big_cut)
        a1, _ = tree_force(t, pos[1], 0.0, 1e-3, 0.5, big_cut)
        f0 = p.mass[0] * a0   # force on particle 0 (from particle 1)
        f1 = p.mass[1] * a1
        assert np.all(np.abs(f0 + f1) <= 1e-12 * np.linalg.norm(f0))

    def test_worker_split_is_bitwise_identical(self):
        p = uniform_particles(400, seed=12)
        t = build_tree(p)
        a1, i1 = tree_force_many(t, p.pos, 0.5, 1e-4, R_SPLIT, R_CUT, workers=1)
        a4, i4 = tree_force_many(t, p.pos, 0.5, 1e-4, R_SPLIT, R_CUT, workers=4)
        assert np.array_equal(a1, a4)
        assert np.array_equal(i1, i4)


class TestExtractLet:
    def test_empty_tree_empty_payload(self):
        t = build_tree(Particles.empty())
        pay = extract_let(t, SlabDomain(1, 0.5, 1.0), 0.5, R_CUT)
        assert pay.n_aggregates == 0 and pay.n_raw == 0

    def test_far_cluster_sends_no_raw_particles_and_zero_force(self):
        # compact cluster far (in x) from the destination slab: everything
        # beyond r_cut collapses to aggregates whose force contribution is
        # exactly zero for every target in the slab
        rng = np.random.default_rng(13)
        pos = 0.02 * rng.standard_normal((200, 3)) + np.array([0.85, 0.5, 0.5])
        pos = np.clip(pos, 0.75, 0.95)
        p = Particles(np.arange(200, dtype=np.uint64), pos, np.zeros((200, 3)),
                      np.full(200, 1.0 / 200))
        t = build_tree(p)
        slab = SlabDomain(0, 0.0, 0.25)
        r_cut = 0.1
        pay = extract_let(t, slab, 0.5, r_cut, origin=2)
        assert pay.n_raw == 0
        assert pay.n_aggregates > 0
        walk = build_walk_tree(Particles.empty(), [pay])
        targets = np.column_stack([rng.uniform(0.0, 0.25, 50),
                                   rng.uniform(0, 1, 50), rng.uniform(0, 1, 50)])
        acc, _ = tree_force_many(walk, targets, 0.5, 1e-4, r_cut / 4.5, r_cut)
        assert np.all(acc == 0.0)

    def test_distributed_assembly_matches_serial_walk(self):
        p = uniform_particles(4096, seed=14)
        theta, eps = 0.5, 1e-4
        full = build_tree(p)
        acc_ref, int_ref = tree_force_many(full, p.pos, theta, eps, R_SPLIT, R_CUT)
        slabs = [SlabDomain(0, 0.0, 1 / 3), SlabDomain(1, 1 / 3, 2 / 3),
                 SlabDomain(2, 2 / 3, 1.0)]
        locals_ = [p.select((p.pos[:, 0] >= s.lo) & (p.pos[:, 0] < s.hi))
                   for s in slabs]
        trees = [build_tree(q) for q in locals_]
        for i, slab in enumerate(slabs):
            pays = [extract_let(trees[j], slab, theta, R_CUT, origin=j)
                    for j in range(3) if j != i]
            merged = build_walk_tree(locals_[i], pays)
            acc, inter = tree_force_many(merged, locals_[i].pos, theta, eps,
                                         R_SPLIT, R_CUT)
            idx = np.searchsorted(p.ids, locals_[i].ids)
            ref = acc_ref[idx]
            scale = np.maximum(np.linalg.norm(ref, axis=1), 1e-300)
            err = np.linalg.norm(acc - ref, axis=1) / scale
            assert err.max() <= 1e-12
            assert np.array_equal(inter, int_ref[idx])

    def test_payload_round_trip_bytes(self):
        p = uniform_particles(600, seed=15)
        t = build_tree(p)
        pay = extract_let(t, SlabDomain(1, 0.4, 0.8), 0.5, R_CUT, origin=3)
        back = LetPayload.from_bytes(pay.to_bytes())
        assert back.origin == 3 and back.dest == 1
        assert np.array_equal(back.agg_key, pay.agg_key)
        assert np.array_equal(back.agg_com, pay.agg_com)
        assert np.array_equal(back.raw_pos, pay.raw_pos)
        assert np.array_equal(back.raw_id, pay.raw_id)

    def test_raw_exports_stay_near_slab(self):
        p = uniform_particles(3000, seed=16)
        t = build_tree(p)
        slab = SlabDomain(1, 0.4, 0.6)
        pay = extract_let(t, slab, 0.5, R_CUT, origin=0)
        # raws come from leaves whose cube touches the r_cut reach; a leaf
        # cube is at most its diagonal beyond that
        max_leaf_diag = math.sqrt(3.0) * 2.0 ** -(t.node_depth[t.node_leaf].min())
        for x in pay.raw_pos[:, 0]:
            gap = min(abs(x - slab.lo), abs(x - slab.hi),
                      1.0 - abs(x - slab.lo), 1.0 - abs(x - slab.hi))
            if slab.lo <= x < slab.hi:
                gap = 0.0
            assert gap <= R_CUT + max_leaf_diag
