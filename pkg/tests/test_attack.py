"""Candidate selection, boundary projection, semicircular search, and the
full pipeline, checked against analytic synthetic victims."""

import json
import math

import numpy as np
import pytest

from specwalk.attack import (
    AttackAborted,
    AttackConfig,
    ContractError,
    EstimationError,
    GenerationError,
    binary_project,
    bisect_direction,
    estimate_normal,
    initial_search_direction,
    normal_probe_count,
    point_on_semicircle,
    run_attack,
    select_best_candidate,
    walk_boundary,
)
from specwalk.cloud import PointCloud, combined_distance, d_norm
from specwalk.oracle import (
    CountingOracle,
    HardLabelOracle,
    OracleTransportError,
    QueryCounter,
)


class CentroidSignOracle(HardLabelOracle):
    """label 1 iff the cloud centroid's x-coordinate is positive."""

    def predict(self, cloud):
        return 1 if cloud.points[:, 0].mean() > 0 else 0


class HyperplaneOracle(HardLabelOracle):
    """label 1 iff <P - origin, g> > 0 in full displacement space."""

    def __init__(self, g, origin):
        self.g = g / np.linalg.norm(g)
        self.origin = origin

    def predict(self, cloud):
        return 1 if float(((cloud.points - self.origin) * self.g).sum()) > 0 else 0


def unit(arr):
    return arr / np.linalg.norm(arr)


class TestAttackConfig:
    def test_defaults(self):
        cfg = AttackConfig()
        assert (cfg.gamma1, cfg.gamma2, cfg.epsilon, cfg.k, cfg.rounds) == (2.0, 0.5, 0.2, 10, 100)
        assert cfg.query_cap == 30000

    def test_validation(self):
        with pytest.raises(ValueError):
            AttackConfig(gamma1=-1.0)
        with pytest.raises(ValueError):
            AttackConfig(epsilon=0.0)
        with pytest.raises(ValueError):
            AttackConfig(rounds=-1)

    def test_probe_schedule(self):
        assert normal_probe_count(1) == 30
        assert normal_probe_count(4) == 60
        assert normal_probe_count(10000) == 3000


class TestSelectBestCandidate:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.source = PointCloud(rng.standard_normal((16, 3)) * 0.01 - [1, 0, 0], label=0)
        self.cfg = AttackConfig(epsilon=5.0)

    def make(self, offset):
        return PointCloud(self.source.points + offset, label=None)

    def test_single_valid_candidate(self):
        cand = self.make([2.0, 0, 0])
        out = select_best_candidate(self.source, [cand], CentroidSignOracle(), self.cfg)
        assert out is cand

    def test_dominance(self):
        far = self.make([3.0, 0, 0])
        near = self.make([1.5, 0, 0])
        out = select_best_candidate(self.source, [far, near], CentroidSignOracle(), self.cfg)
        assert out is near

    def test_non_adversarial_dropped(self):
        benign = self.make([-1.0, 0, 0])
        adv = self.make([2.0, 0, 0])
        out = select_best_candidate(self.source, [benign, adv], CentroidSignOracle(), self.cfg)
        assert out is adv

    def test_outlier_cap_enforced(self):
        adv = self.make([2.0, 0, 0])
        spiky = PointCloud(adv.points + np.eye(16, 3) * 50.0)
        cfg = AttackConfig(epsilon=3.0)
        out = select_best_candidate(self.source, [spiky, adv], CentroidSignOracle(), cfg)
        assert out is adv

    def test_all_rejected_raises(self):
        benign = self.make([-2.0, 0, 0])
        with pytest.raises(GenerationError, match="larger target pool"):
            select_best_candidate(self.source, [benign], CentroidSignOracle(), self.cfg)

    def test_matches_exhaustive_reevaluation(self, victim, test_clouds, train_clouds,
                                             quick_bank, desk_config):
        from specwalk.fusion import fuse_spectra, sample_weights

        source = test_clouds[0]
        rng = np.random.default_rng(1)
        pool = [c for c in train_clouds if c.label != source.label][:8]
        cands = [
            fuse_spectra(source, t, sample_weights(quick_bank, source.label, rng))
            for t in pool
        ]
        got = select_best_candidate(source, cands, victim, desk_config)
        # exhaustive re-evaluation of the selection rule
        best, best_d = None, math.inf
        for cand in cands:
            if victim.predict(cand) == source.label:
                continue
            rep = combined_distance(source, cand, desk_config.gamma1, desk_config.gamma2)
            if rep.max_pointwise > desk_config.epsilon or rep.d_combined >= best_d:
                continue
            best, best_d = cand, rep.d_combined
        assert got is best


class TestBinaryProject:
    def setup_method(self):
        rng = np.random.default_rng(2)
        base = rng.standard_normal((16, 3)) * 0.05
        self.source = PointCloud(base - [1.0, 0, 0], label=0)
        self.adv = PointCloud(base + [1.0, 0, 0], label=0)
        self.oracle = CentroidSignOracle()

    def test_converges_to_boundary(self):
        out = binary_project(self.source, self.adv, 0, self.oracle, tolerance=1e-4)
        # decision boundary is centroid x == 0; the segment spans 2 units
        assert 0.0 < out.points[:, 0].mean() < 2e-4 * 2.0
        assert self.oracle.predict(out) == 1

    def test_one_step_further_is_benign(self):
        counter = QueryCounter()
        tol = 1e-3
        out = binary_project(self.source, self.adv, 0, self.oracle, tol, counter)
        toward = PointCloud(out.points * (1 - tol) + self.source.points * tol)
        assert self.oracle.predict(toward) == 0

    def test_tolerance_one_returns_input(self):
        out = binary_project(self.source, self.adv, 0, self.oracle, tolerance=1.0)
        assert out is self.adv

    def test_query_budget(self):
        counter = QueryCounter()
        binary_project(self.source, self.adv, 0, self.oracle, 2.0**-20, counter)
        assert counter.total <= 21

    def test_endpoint_contract(self):
        with pytest.raises(ContractError):
            binary_project(self.source, self.source, 0, self.oracle,
                           check_endpoints=True)


class TestEstimateNormal:
    def test_single_probe_is_normalized_probe(self):
        rng = np.random.default_rng(3)
        boundary = PointCloud(rng.standard_normal((8, 3)))
        expected_v = np.random.default_rng(7).standard_normal((1, 8, 3))[0] * 0.5

        class AlwaysAdv(HardLabelOracle):
            def predict(self, cloud):
                return 99

        cfg = AttackConfig(normal_budget=1.0)
        m = estimate_normal(boundary, 0, AlwaysAdv(), t=1, rng=np.random.default_rng(7),
                            radius=0.5, config=cfg)
        assert np.allclose(m, unit(expected_v), atol=1e-12)

    def test_all_adversarial_sums_probes(self):
        rng = np.random.default_rng(4)
        boundary = PointCloud(rng.standard_normal((8, 3)))

        class AlwaysAdv(HardLabelOracle):
            def predict(self, cloud):
                return 99

        cfg = AttackConfig(normal_budget=10.0)
        probes = np.random.default_rng(8).standard_normal((10, 8, 3)) * 0.3
        m = estimate_normal(boundary, 0, AlwaysAdv(), t=1, rng=np.random.default_rng(8),
                            radius=0.3, config=cfg)
        assert np.allclose(m, unit(probes.sum(axis=0)), atol=1e-12)

    def test_recovers_hidden_normal(self):
        rng = np.random.default_rng(5)
        base = rng.standard_normal((8, 3))
        g = unit(rng.standard_normal((8, 3)))
        oracle = HyperplaneOracle(g, base)
        boundary = PointCloud(base)
        cfg = AttackConfig(normal_budget=30.0)
        m = estimate_normal(boundary, 0, oracle, t=10000, rng=rng, radius=0.05, config=cfg)
        angle = np.degrees(np.arccos(np.clip((m * g).sum(), -1, 1)))
        assert angle < 10.0

    def test_spectral_domain_returns_coefficient_direction(self):
        from specwalk.spectral import build_basis

        rng = np.random.default_rng(6)
        boundary = PointCloud(rng.standard_normal((16, 3)))
        basis = build_basis(boundary, 4)
        g = unit(rng.standard_normal((16, 3)))
        oracle = HyperplaneOracle(g, boundary.points)
        m = estimate_normal(boundary, 0, oracle, t=2500, rng=rng, radius=0.05,
                            config=AttackConfig(normal_budget=30.0, k=4),
                            domain="spectral", basis=basis)
        assert m.shape == (16, 3)
        assert abs(np.linalg.norm(m) - 1.0) < 1e-12
        # coefficient-space direction maps to the hidden normal in cloud space
        mapped = basis.eigenvectors @ m
        angle = np.degrees(np.arccos(np.clip((unit(mapped) * g).sum(), -1, 1)))
        assert angle < 20.0

    def test_spectral_requires_basis(self):
        boundary = PointCloud(np.zeros((4, 3)))
        with pytest.raises(ValueError):
            estimate_normal(boundary, 0, CentroidSignOracle(), 1,
                            np.random.default_rng(0), 0.1, domain="spectral")

    def test_degenerate_probes_error(self):
        boundary = PointCloud(np.zeros((4, 3)))
        with pytest.raises(EstimationError):
            estimate_normal(boundary, 0, CentroidSignOracle(), 1,
                            np.random.default_rng(0), radius=0.0)

    def test_counter_tracks_budget(self):
        counter = QueryCounter()
        boundary = PointCloud(np.zeros((4, 3)) + 1.0)
        estimate_normal(boundary, 0, CentroidSignOracle(), t=4,
                        rng=np.random.default_rng(1), radius=0.1,
                        config=AttackConfig(normal_budget=30.0), counter=counter)
        assert counter.snapshot()["normal_estimation"] == 60


class TestSemicirclePoint:
    def test_chord_direction_returns_boundary(self):
        rng = np.random.default_rng(7)
        s = rng.standard_normal((8, 3))
        b = rng.standard_normal((8, 3))
        u = unit(b - s)
        pc = point_on_semicircle(s, b, u, u)
        assert np.abs(pc - b).max() < 1e-12

    def test_orthogonal_returns_source(self):
        rng = np.random.default_rng(8)
        s = rng.standard_normal((8, 3))
        b = rng.standard_normal((8, 3))
        u = unit(b - s)
        w = rng.standard_normal((8, 3))
        xi = unit(w - (w * u).sum() * u)
        pc = point_on_semicircle(s, b, xi, u)
        assert np.abs(pc - s).max() < 1e-12

    def test_sixty_degrees_halves_distance(self):
        rng = np.random.default_rng(9)
        s = rng.standard_normal((8, 3))
        b = rng.standard_normal((8, 3))
        u = unit(b - s)
        w = rng.standard_normal((8, 3))
        orth = unit(w - (w * u).sum() * u)
        xi = np.cos(np.pi / 3) * u + np.sin(np.pi / 3) * orth
        pc = point_on_semicircle(s, b, xi, u)
        ratio = np.linalg.norm(pc - s) / np.linalg.norm(b - s)
        assert abs(ratio - 0.5) < 1e-12

    def test_exactness_property(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            s, b = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
            u = unit(b - s)
            xi = unit(rng.standard_normal((6, 3)))
            pc = point_on_semicircle(s, b, xi, u)
            lhs = np.linalg.norm(pc - s) / np.linalg.norm(b - s)
            assert abs(lhs - abs((xi * u).sum())) < 1e-12


class TestInitialSearchDirection:
    def test_orthogonal_normal_gives_45_degrees(self):
        rng = np.random.default_rng(11)
        s = np.zeros((4, 3))
        b = np.zeros((4, 3)); b[0, 0] = 2.0
        u = unit(b - s)
        m = np.zeros((4, 3)); m[0, 1] = 1.0
        seen = []

        def query(pc):
            seen.append(pc.copy())
            return -1  # immediately non-adversarial

        xi, pc = initial_search_direction(u, m, query, s, b)
        assert np.allclose(xi, unit(u + m), atol=1e-12)
        assert abs((xi * u).sum() - np.cos(np.pi / 4)) < 1e-12
        assert len(seen) == 1

    def test_collinear_normal_keeps_chord(self):
        s = np.zeros((4, 3))
        b = np.zeros((4, 3)); b[0, 0] = 2.0
        u = unit(b - s)
        xi, _ = initial_search_direction(u, u.copy(), lambda pc: -1, s, b)
        assert np.allclose(xi, u, atol=1e-12)

    def test_probe_sequence_replay(self):
        rng = np.random.default_rng(12)
        s = rng.standard_normal((6, 3))
        b = s + np.array([3.0, 0, 0]) * np.ones((6, 1)) / np.sqrt(6)
        g = unit(b - s)  # boundary normal along the chord
        origin = 0.5 * (s + b)
        oracle = HyperplaneOracle(g, origin)
        u = unit(b - s)
        rngm = np.random.default_rng(13)
        m = unit(rngm.standard_normal((6, 3)))
        probes = []

        def query(pc):
            phi = 1 if oracle.predict(PointCloud(pc)) != 0 else -1
            probes.append(phi)
            return phi

        xi, pc = initial_search_direction(u, m, query, s, b)
        if xi is not None:
            assert probes[-1] == -1
            assert all(p == 1 for p in probes[:-1])

    def test_cap_returns_none(self):
        s = np.zeros((4, 3))
        b = np.zeros((4, 3)); b[0, 0] = 2.0
        u = unit(b - s)
        m = np.zeros((4, 3)); m[0, 1] = 1.0
        cfg = AttackConfig(max_halvings=3)
        xi, pc = initial_search_direction(u, m, lambda pc: 1, s, b, cfg)
        assert xi is None and pc is None


class TestBisectDirection:
    def make_problem(self, seed=14, d_star=1.0, d_start=2.4):
        rng = np.random.default_rng(seed)
        s = rng.standard_normal((6, 3))
        g = unit(rng.standard_normal((6, 3)))
        origin = s + d_star * g
        oracle = HyperplaneOracle(g, origin)
        # start on the hyperplane at distance d_start from the source
        w = unit(rng.standard_normal((6, 3)) - 0.0)
        w = unit(w - (w * g).sum() * g)
        b = origin + np.sqrt(d_start**2 - d_star**2) * w
        return s, b, g, oracle

    def test_linear_oracle_matches_scan_oracle(self):
        s, b, g, oracle = self.make_problem()
        u = unit(b - s)

        def query(pc):
            return 1 if oracle.predict(PointCloud(pc)) != 0 else -1

        # lower bound: blend of chord and true normal, adjusted until benign
        cfg = AttackConfig(angle_tolerance=1e-3)
        xi_lower, _ = initial_search_direction(u, -g, query, s, b, cfg)
        assert xi_lower is not None
        pc = bisect_direction(xi_lower, u, query, s, b, tolerance=1e-3)
        # independent oracle: dense scan over the bracket arc for the crossing
        thetas = np.linspace(0.0, np.arccos(np.clip((xi_lower * u).sum(), -1, 1)), 20001)
        axis = unit(xi_lower - (xi_lower * u).sum() * u)
        best = None
        for theta in thetas:
            xi = np.cos(theta) * u + np.sin(theta) * axis
            point = point_on_semicircle(s, b, xi, u)
            if query(point) == 1:
                best = point  # farthest-along adversarial point on the arc
        angle_got = np.arccos(np.clip((unit(pc - s) * u).sum(), -1, 1))
        angle_scan = np.arccos(np.clip((unit(best - s) * u).sum(), -1, 1))
        assert abs(angle_got - angle_scan) < 2e-3

    def test_tolerance_larger_than_bracket_returns_boundary(self):
        s, b, g, oracle = self.make_problem(seed=15)
        u = unit(b - s)
        xi_lower = unit(u + 0.001 * g)
        pc = bisect_direction(xi_lower, u, lambda pc: 1, s, b, tolerance=np.pi)
        assert np.array_equal(pc, b)

    def test_query_budget(self):
        s, b, g, oracle = self.make_problem(seed=16)
        u = unit(b - s)
        w = unit(np.random.default_rng(17).standard_normal((6, 3)))
        xi_lower = unit(w - (w * u).sum() * u)  # 90 degrees from the chord
        calls = []

        def query(pc):
            calls.append(1)
            return 1 if oracle.predict(PointCloud(pc)) != 0 else -1

        bisect_direction(xi_lower, u, query, s, b, tolerance=2.0**-10 * np.pi / 2)
        assert len(calls) <= 11

    def test_every_probe_obeys_semicircle_bound(self):
        s, b, g, oracle = self.make_problem(seed=18)
        u = unit(b - s)
        dist = np.linalg.norm(b - s)
        log = []

        def query(pc):
            return 1 if oracle.predict(PointCloud(pc)) != 0 else -1

        xi_lower, _ = initial_search_direction(u, -g, query, s, b, log=log)
        bisect_direction(xi_lower, u, query, s, b, log=log)
        assert log, "expected logged probes"
        assert all(d <= bound + 1e-9 for d, bound in log)


class TestWalkBoundary:
    def test_linear_victim_reaches_near_optimal(self):
        rng = np.random.default_rng(19)
        n = 8
        src_pts = rng.standard_normal((n, 3))
        g = unit(rng.standard_normal((n, 3)))
        d_star = 1.7
        oracle = HyperplaneOracle(g, src_pts + d_star * g)
        source = PointCloud(src_pts, label=0)
        adv = PointCloud(src_pts + 3.0 * d_star * g + 0.3 * rng.standard_normal((n, 3)))
        counter = QueryCounter()
        cfg = AttackConfig(k=4, rounds=40, seed=3, query_cap=100000)
        boundary = binary_project(source, adv, 0, oracle, cfg.beta_tolerance, counter)
        best, dnorms, trace, log, status = walk_boundary(
            source, boundary, 0, oracle, cfg, counter, np.random.default_rng(3))
        assert status == "converged"
        assert abs(dnorms[-1] - d_star) / d_star < 0.05
        assert all(a >= b for a, b in zip(dnorms, dnorms[1:]))

    def test_query_cap_flags_unconverged(self):
        rng = np.random.default_rng(20)
        src_pts = rng.standard_normal((8, 3))
        g = unit(rng.standard_normal((8, 3)))
        oracle = HyperplaneOracle(g, src_pts + 1.0 * g)
        source = PointCloud(src_pts, label=0)
        boundary = PointCloud(src_pts + 2.0 * g)
        counter = QueryCounter()
        cfg = AttackConfig(k=4, rounds=50, query_cap=200)
        best, dnorms, trace, log, status = walk_boundary(
            source, boundary, 0, oracle, cfg, counter, np.random.default_rng(0))
        assert status == "unconverged"
        assert counter.total <= 200 + normal_probe_count(50) + cfg.max_bisect_steps + 12


class TestRunAttack:
    def test_end_to_end_native(self, victim, test_clouds, train_clouds, quick_bank,
                               desk_config):
        source = test_clouds[1]
        targets = [c for c in train_clouds if c.label != source.label]
        wrapped = CountingOracle(victim)
        result = run_attack(source, targets, wrapped, quick_bank, desk_config)
        assert result.success and result.status == "converged"
        assert victim.predict(result.cloud) != source.label
        assert result.report.d_norm <= result.initial_candidate_dnorm
        assert result.queries["total"] == wrapped.calls
        assert result.queries["total"] == sum(
            result.queries[p] for p in
            ("generation", "projection", "normal_estimation", "semicircle_search"))

    def test_zero_rounds_returns_projection(self, victim, test_clouds, train_clouds,
                                            quick_bank, desk_config):
        from specwalk.fusion import fuse_spectra, sample_weights
        from specwalk.spectral import BandSplit, default_cutoff

        source = test_clouds[2]
        targets = [c for c in train_clouds if c.label != source.label]
        cfg = AttackConfig(**{**desk_config.__dict__, "rounds": 0})
        result = run_attack(source, targets, victim, quick_bank, cfg)
        assert result.iterations == 0

        # replay stage 1 with the same rng stream
        rng = np.random.default_rng(cfg.seed)
        split = BandSplit(default_cutoff(source.n), source.n)
        cands = []
        for t in targets[: cfg.target_pool]:
            w = sample_weights(quick_bank, source.label, rng)
            cands.append(fuse_spectra(source, t, w, split, cfg.k))
        best = select_best_candidate(source, cands, victim, cfg)
        projected = binary_project(source, best, source.label, victim, cfg.beta_tolerance)
        assert np.array_equal(result.cloud.points, projected.points)

    def test_bitwise_determinism(self, victim, test_clouds, train_clouds, quick_bank,
                                 desk_config):
        source = test_clouds[3]
        targets = [c for c in train_clouds if c.label != source.label]
        r1 = run_attack(source, targets, victim, quick_bank, desk_config)
        r2 = run_attack(source, targets, victim, quick_bank, desk_config)
        assert np.array_equal(r1.cloud.points, r2.cloud.points)
        assert json.dumps(r1.to_record("i"), sort_keys=True) == \
               json.dumps(r2.to_record("i"), sort_keys=True)

    def test_misclassified_source_rejected(self, victim, test_clouds, train_clouds,
                                           quick_bank, desk_config):
        source = test_clouds[0]
        wrong = PointCloud(source.points, label=(source.label + 1) % 6)
        targets = [c for c in train_clouds if c.label != wrong.label]
        result = run_attack(wrong, targets, victim, quick_bank, desk_config)
        assert result.status == "source_misclassified"
        assert not result.success

    def test_unlabeled_source_rejected(self, victim, train_clouds, quick_bank):
        source = PointCloud(np.zeros((8, 3)) + np.eye(8, 3))
        with pytest.raises(ValueError):
            run_attack(source, train_clouds, victim, quick_bank, AttackConfig())

    def test_no_targets_raises(self, victim, test_clouds, quick_bank, desk_config):
        source = test_clouds[0]
        same_class = [c for c in test_clouds if c.label == source.label]
        with pytest.raises(GenerationError):
            run_attack(source, same_class, victim, quick_bank, desk_config)

    def test_oracle_failure_aborts_with_partial(self, test_clouds, train_clouds,
                                                quick_bank, desk_config):
        class DyingOracle(HardLabelOracle):
            def __init__(self, correct_label):
                self.calls = 0
                self.correct = correct_label

            def predict(self, cloud):
                self.calls += 1
                if self.calls > 40:
                    raise OracleTransportError("victim went away")
                return self.correct if self.calls == 1 else (self.correct + 1) % 6

        source = test_clouds[0]
        targets = [c for c in train_clouds if c.label != source.label]
        with pytest.raises(AttackAborted) as err:
            run_attack(source, targets, DyingOracle(source.label), quick_bank, desk_config)
        assert err.value.partial is not None
        assert err.value.partial.status == "aborted"

    def test_record_shape(self, attack_batch):
        source, result = attack_batch[0]
        record = result.to_record(source.name)
        assert set(record) == {"instance", "success", "status", "metrics",
                               "queries", "iterations", "seed"}
        assert set(record["queries"]) == {"generation", "projection",
                                          "normal_estimation", "semicircle_search",
                                          "total"}
        assert record["metrics"]["initial_d_norm"] >= record["metrics"]["d_norm"]
