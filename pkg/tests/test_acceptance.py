"""Exit criteria. Each test is one numbered criterion; conftest prints a
PASS/FAIL line per test in the terminal summary."""

import itertools
import math
import os
import time

import numpy as np
import pytest

from maskedkrum.cli import main
from maskedkrum.codebook import NoiseCodebook, build_codebook, verify_codebook
from maskedkrum.codec import decode_distances, encode_client_gradient, worker_pairwise_distances
from maskedkrum.core import DistanceMatrix, GradientVector, ResilienceError, SystemConfig, pairwise_sq_dists
from maskedkrum.leakage import calibrate_sigma, mi_bound
from maskedkrum.multikrum import check_resilience_precondition, multikrum, score_clients
from maskedkrum.protocol import AuthenticationError, ProtocolSimulation, open_with_key, plaintext_pipeline
from maskedkrum.trainer import ATTACK_KINDS, AttackModel, ToyTask, apply_attack, run_experiment
from oracles import scalar_dist_matrix

pytestmark = pytest.mark.acceptance_criterion


def decoded(grads, cb, normalize=False):
    ids = list(range(1, len(grads) + 1))
    pairs = [encode_client_gradient(GradientVector(i, g), cb.row(i - 1)) for i, g in zip(ids, grads)]
    p1 = worker_pairwise_distances([p.share_plus for p in pairs], 1, ids=ids)
    p2 = worker_pairwise_distances([p.share_minus for p in pairs], 2, ids=ids)
    return decode_distances(p1, p2, cb.constant, normalize=normalize)


def test_c1_codebook_invariants():
    start = time.perf_counter()
    for (n, d, c), seed in itertools.product([(8, 64, 10.0), (16, 128, 1.0), (32, 512, 100.0)], range(1, 6)):
        v = build_codebook(n, d, c, seed).vectors
        tol = 1e-8 * c
        for i in range(n):
            assert abs(float(v[i] @ v[i]) - c / 2) <= tol
            for j in range(i + 1, n):
                diff = v[i] - v[j]
                assert abs(float(diff @ diff) - c) <= tol
                assert abs(float(v[i] @ v[j])) <= tol
    assert time.perf_counter() - start < 5.0


def test_c2_decode_matches_plaintext_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    for trial in range(100):
        c = float(10 ** rng.uniform(-2, 2))
        cb = build_codebook(10, 64, c, seed=trial)
        grads = rng.standard_normal((10, 64)) * 10 ** rng.uniform(-1, 1)
        oracle = scalar_dist_matrix(grads)
        np.testing.assert_allclose(decoded(grads, cb, normalize=True).entries, oracle, rtol=0, atol=1e-8)
        expected = 2 * oracle + 2 * c
        np.fill_diagonal(expected, 0.0)
        np.testing.assert_allclose(decoded(grads, cb).entries, expected, rtol=0, atol=1e-8 * c)
    assert time.perf_counter() - start < 5.0


def test_c3_selection_invariance():
    start = time.perf_counter()
    n, f, k, d = 15, 4, 9, 64
    scales = np.logspace(-3, 3, 200)
    matches = 0
    for trial, scale in enumerate(scales):
        rng = np.random.default_rng([3, trial])
        center = rng.standard_normal(d)
        grads = center + rng.standard_normal((n, d))
        grads[:f] = center + rng.uniform(2, 6) * rng.standard_normal((f, d))
        grads *= scale
        cb = build_codebook(n, d, 10.0, seed=trial)
        plain = DistanceMatrix(tuple(range(1, n + 1)), pairwise_sq_dists(grads))
        masked = set(multikrum(decoded(grads, cb), f, k).selected_ids)
        matches += masked == set(multikrum(plain, f, k).selected_ids)
    assert matches == 200
    assert time.perf_counter() - start < 30.0


def test_c4_resilience_precondition():
    assert check_resilience_precondition(9, 3)
    assert not check_resilience_precondition(8, 3)
    for n, f in itertools.product(range(1, 21), range(0, 9)):
        ok = n >= 2 * f + 3
        assert check_resilience_precondition(n, f) is ok
        if ok:
            SystemConfig(n_clients=n, n_byzantine=f, dim=n)
        else:
            with pytest.raises(ResilienceError, match=r"N >= 2f\+3 violated"):
                SystemConfig(n_clients=n, n_byzantine=f, dim=n)
            with pytest.raises(ResilienceError):
                score_clients(DistanceMatrix(tuple(range(1, n + 1)), np.zeros((n, n))), f)


def test_c5_leakage_bound():
    sigma = 1.7
    assert abs(mi_bound(np.full(10, sigma**2), sigma).per_client_bound - 5 * math.log(2)) <= 1e-12

    rng = np.random.default_rng(5)
    for _ in range(50):
        variances = 10 ** rng.uniform(-3, 3, size=int(rng.integers(1, 200)))
        budget = float(10 ** rng.uniform(-3, 2))
        cal = calibrate_sigma(variances, budget)
        achieved = mi_bound(variances, cal.sigma).per_client_bound
        assert abs(achieved - budget) <= 1e-6 * budget

    variances = rng.uniform(0.1, 5.0, size=32)
    bounds = [mi_bound(variances, s).per_client_bound for s in np.linspace(0.01, 10.0, 100)]
    assert all(b1 > b2 for b1, b2 in zip(bounds, bounds[1:]))


def _scenario_source(n, f, dim, kind, seed):
    attack = AttackModel(kind, scale=50.0 if kind == "constant" else 10.0)
    center = np.random.default_rng([seed, 0]).standard_normal(dim)

    def source(client_id, round_index):
        rng = np.random.default_rng([seed, round_index, client_id])
        g = GradientVector(client_id, center + rng.standard_normal(dim))
        if client_id <= f:
            g = apply_attack(g, attack, rng)
        return g.values

    return source


def test_c6_protocol_matches_plaintext():
    start = time.perf_counter()
    kinds = itertools.cycle(ATTACK_KINDS)
    for s in range(20):
        n = 9 + s % 7
        f = min(2 + s % 3, (n - 3) // 2)
        dim = 32
        cfg = SystemConfig(n_clients=n, n_byzantine=f, dim=dim, codebook_constant=4.0, seed=100 + s)
        source = _scenario_source(n, f, dim, next(kinds), seed=s)
        sim = ProtocolSimulation(cfg, source)
        out = sim.run_round(0)
        assert out.status == "ok"
        sel, agg = plaintext_pipeline({i: source(i, 0) for i in range(1, n + 1)}, f, cfg.select_k)
        assert set(out.selection.selected_ids) == set(sel.selected_ids)
        np.testing.assert_allclose(out.aggregate.values, agg.values, rtol=0, atol=1e-9)

        keys = list(sim.session.keys.values())
        for msg in sim.network.transcript:
            own = sim.session.key(msg.sender, msg.receiver)
            open_with_key(own, msg)
            for key in keys:
                if key != own:
                    with pytest.raises(AuthenticationError):
                        open_with_key(key, msg)
    assert time.perf_counter() - start < 60.0


def test_c7_robust_training():
    start = time.perf_counter()
    attack = AttackModel("sign_flip", 10.0)
    wins = 0
    for seed in range(1, 6):
        task = ToyTask.generate(15, 128, seed=seed, learning_rate=0.05)
        cfg = SystemConfig(n_clients=15, n_byzantine=4, dim=128, codebook_constant=100.0, seed=seed)
        mk = run_experiment(task, cfg, attack, "multikrum", rounds=200)
        pm = run_experiment(task, cfg, attack, "plain_mean", rounds=200)
        assert sum(mk.byz_selected) == 0
        wins += mk.losses[-1] < pm.losses[-1]
    assert wins == 5
    assert time.perf_counter() - start < 120.0


def test_c8_determinism_and_format(tmp_path, rng):
    paths = [tmp_path / "a.ncbk", tmp_path / "b.ncbk"]
    for p in paths:
        assert main(["gen-codebook", "--n", "16", "--dim", "128", "--c", "2.5", "--seed", "8", "--out", str(p)]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()

    cb = build_codebook(12, 40, 3.0, seed=1)
    cb.save(tmp_path / "rt.ncbk")
    back = NoiseCodebook.load(tmp_path / "rt.ncbk")
    assert np.array_equal(back.vectors, cb.vectors) and verify_codebook(back).passed
    assert main(["verify-codebook", str(tmp_path / "rt.ncbk")]) == 0

    x = rng.standard_normal((37, 513)) * 1e4
    most = max(os.cpu_count() or 1, 8)
    assert np.array_equal(pairwise_sq_dists(x, threads=1), pairwise_sq_dists(x, threads=most))
    serial = worker_pairwise_distances(list(x), 1, threads=1)
    threaded = worker_pairwise_distances(list(x), 1, threads=most)
    assert np.array_equal(serial.matrix.entries, threaded.matrix.entries)
