"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; criterion 7 trains two
desk-scale models and is marked slow.
"""

import dataclasses
import sys
import time

import numpy as np
import pytest
from oracles import exhaustive_ranking, lazy_quadruplet_enumerated, pruning_removal_order, two_pass_moments
from test_autodiff import BINARY, UNARY, weighted
from test_metric import dyadic_vectors
from test_model import SHIFT_INVARIANT, TINY, batch, exercised_model, loss_fn, random_maps

from ndtplace import autodiff as ad
from ndtplace.autodiff import Tensor, grad_check
from ndtplace.condenser import CondenserConfig, condense_many, prune_exhaustive, prune_mutual_information
from ndtplace.io import (
    read_cloud,
    read_descriptors,
    read_ndt,
    read_weights,
    write_cloud,
    write_descriptors,
    write_ndt,
    write_weights,
)
from ndtplace.metric import TrainSchedule, lazy_quadruplet_loss, train
from ndtplace.model import ModelConfig, PlaceNet, embed, stack_maps
from ndtplace.ndt import NdtMap, estimate_cell, regularize_cov
from ndtplace.places import SynthConfig, synth_dataset
from ndtplace.retrieval import DescriptorIndex, evaluate, recall_from_ranks


def verdict(capsys, number, ok, detail):
    with capsys.disabled():
        sys.stdout.write(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}\n")
    assert ok, detail


def rel_err(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def test_1_cell_moments_match_two_pass(capsys):
    rng = np.random.default_rng(1)
    sets = []
    for _ in range(1000):
        n = int(rng.integers(3, 501))
        scale = 10.0 ** rng.uniform(-2, 2)
        sets.append(rng.normal(size=3) * 100 + rng.normal(size=(n, 3)) * scale * rng.uniform(0.1, 1, 3))
    t0 = time.perf_counter()
    cells = [estimate_cell(p, regularize=False) for p in sets]
    seconds = time.perf_counter() - t0
    worst = 0.0
    for pts, cell in zip(sets, cells):
        mean, cov = two_pass_moments(pts.tolist())
        worst = max(worst, rel_err(cell.mean, mean), rel_err(cell.cov, cov))
    verdict(capsys, 1, worst < 1e-9 and seconds < 5.0, f"max rel err {worst:.2e} (< 1e-9), {seconds:.2f} s (< 5 s)")


def test_2_condensation_contract(capsys):
    ds = synth_dataset(config=SynthConfig(n_runs=2, route_len=600.0, density=20.0, ground_density=3.0))
    clouds = [c for c in ds.clouds if len(c) >= 20_000][:50]
    assert len(clouds) == 50
    cfg = CondenserConfig(k=2000)
    t0 = time.perf_counter()
    first = condense_many(clouds, cfg, workers=1)
    per_map = (time.perf_counter() - t0) / len(clouds)
    second = condense_many(clouds, cfg, workers=1)
    pooled = condense_many(clouds, cfg, workers=8)
    exact = all(len(m) == 2000 for m in first)
    repeat = all(a.equals(b) for a, b in zip(first, second))
    threads = all(a.equals(b) for a, b in zip(first, pooled))

    rng = np.random.default_rng(2)
    oracle_ok, cases = True, 0
    for n in range(2, 13):
        for _ in range(6):
            a = rng.normal(size=(n, 3, 3)) * 0.4
            cells = NdtMap(rng.normal(size=(n, 3)) * 3, regularize_cov(a @ np.swapaxes(a, -1, -2)), np.full(n, 5), 1.0)
            for m_nn in (3, 8):
                k = int(rng.integers(1, n + 1))
                order = pruning_removal_order(cells.means, cells.covs, k, m_nn)
                kept = cells.take(sorted(set(range(n)) - set(order)))
                oracle_ok &= order == prune_exhaustive(cells, k, m_nn)
                oracle_ok &= prune_mutual_information(cells, k, m_nn).equals(kept)
                cases += 1
    ok = exact and repeat and threads and oracle_ok and per_map < 2.0
    verdict(
        capsys,
        2,
        ok,
        f"50 submaps of {min(map(len, clouds))}+ points: exact k={exact}, repeatable={repeat}, "
        f"1 vs 8 workers={threads}, pruning oracle on {cases} cases={oracle_ok}, {per_map:.2f} s/submap (< 2 s)",
    )


def test_3_gradient_integrity(capsys):
    worst, checks = 0.0, 0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        for name, (fn, gen) in UNARY.items():
            x = gen(rng, (3, 4))
            worst = max(worst, grad_check(weighted(fn, fn(Tensor(x)).shape, seed), [x]))
            checks += 1
        for name, (fn, sa, sb) in BINARY.items():
            a = rng.normal(size=sa)
            b = rng.uniform(0.5, 2.0, sb) if name == "div" else rng.normal(size=sb)
            worst = max(worst, grad_check(weighted(fn, fn(Tensor(a), Tensor(b)).shape, seed), [a, b]))
            checks += 1
        x = rng.normal(size=(4, 5, 3))
        bn = lambda t: ad.batchnorm(t, np.zeros(3), np.ones(3), training=True)  # noqa: E731
        worst = max(worst, grad_check(weighted(bn, x.shape, seed), [x]))
        logits, target = rng.normal(size=(4, 6)), rng.integers(0, 6, 4)
        worst = max(worst, grad_check(lambda z: ad.cross_entropy(z, target), [logits]))
        q, pos, neg, hard = (rng.normal(size=s) for s in ((8,), (2, 8), (4, 8), (8,)))
        worst = max(worst, grad_check(lambda *xs: lazy_quadruplet_loss(*xs), [q, pos, neg, hard]))
        checks += 3

        model = exercised_model(seed)
        means, covs = batch(rng, n=4)
        w = np.random.default_rng(seed + 99).normal(size=(4, TINY.out_dim))
        worst = max(worst, grad_check(lambda m, c: (model(m, c) * w).sum(), [means, covs]))
        f = loss_fn(model, means, covs, seed)
        named = dict(model.named_parameters())
        trainable = [p for n, p in named.items() if n not in SHIFT_INVARIANT]
        worst = max(worst, grad_check(lambda *_: f(), trainable, max_elems=20, seed=seed))
        model.eval()
        worst = max(worst, grad_check(lambda *_: f(), [named[n] for n in sorted(SHIFT_INVARIANT)]))
        checks += 3
    verdict(capsys, 3, worst < 1e-4, f"{checks} checks over 5 seeds (every parameter tensor), max rel err {worst:.2e} (< 1e-4)")


def test_4_permutation_invariance(capsys):
    rng = np.random.default_rng(4)
    cfg = ModelConfig(k=256, d_model=64, heads=4, d_ff=128, vlad_clusters=16, vlad_in=128, out_dim=64,
                      tnet_point_widths=(32, 64, 128), tnet_fc_widths=(64, 32))
    model = exercised_model(4, cfg)
    # leave the running statistics off their defaults before switching to eval
    model(*stack_maps(random_maps(rng, 4, 256)))
    model.eval()
    (ndt,) = random_maps(rng, 1, 256)
    ref = embed(model, ndt)
    worst = max(float(np.abs(embed(model, ndt.take(rng.permutation(256))) - ref).max()) for _ in range(100))
    verdict(capsys, 4, worst < 1e-6, f"100 permutations of 256 cells, max |change| {worst:.2e} (< 1e-6)")


def test_5_loss_correctness(capsys):
    from hypothesis import given, settings
    from hypothesis import strategies as st

    mismatches = []

    @settings(max_examples=500)
    @given(
        st.integers(1, 6).flatmap(lambda d: st.tuples(
            dyadic_vectors(1, d), st.integers(1, 3).flatmap(lambda n: dyadic_vectors(n, d)),
            st.integers(1, 4).flatmap(lambda n: dyadic_vectors(n, d)), dyadic_vectors(1, d),
        ))
    )
    def enumerate_batches(vectors):
        q, pos, neg, hard = vectors
        got = float(lazy_quadruplet_loss(q[0], pos, neg, hard[0], 0.5, 0.2).data)
        if got != lazy_quadruplet_enumerated(q[0], pos, neg, hard[0], 0.5, 0.2):
            mismatches.append(vectors)

    enumerate_batches()
    q, pos, neg, hard = np.zeros(1), np.array([[1.0], [1.5]]), np.array([[0.6], [2.0], [-3.0]]), np.array([-0.9])
    example = float(lazy_quadruplet_loss(q, pos, neg, hard, alpha=0.5, beta=0.2).data)
    ok = not mismatches and abs(example - 1.2) <= 1e-12
    verdict(capsys, 5, ok, f"500 enumerated batches, {len(mismatches)} mismatches; worked example {example!r} (1.2 to 1e-12)")


def test_6_retrieval_oracle(capsys):
    rng = np.random.default_rng(6)
    db = rng.normal(size=(1000, 32))
    db /= np.linalg.norm(db, axis=1, keepdims=True)
    ids = rng.permutation(1000) * 3
    queries = db[rng.choice(1000, 100, replace=False)] + rng.normal(scale=0.05, size=(100, 32))
    mismatches = 0
    for method in ("tree", "exhaustive"):
        index = DescriptorIndex(ids, db, method=method)
        for q in queries:
            mismatches += [i for i, _ in index.query(q, 25)] != exhaustive_ranking(db, ids, q, 25)
    positions = rng.uniform(0, 500, (1000, 2))
    report = evaluate(np.arange(100) + 10_000, positions[:100] + 2.0, queries, DescriptorIndex(ids, db, positions))
    curve, _ = recall_from_ranks([int(r) if r else None for r in rng.integers(0, 40, 200)], 1000)
    monotone = bool(np.all(np.diff(report.recall_at_n) >= 0) and np.all(np.diff(curve) >= 0))
    verdict(capsys, 6, mismatches == 0 and monotone, f"200 top-25 queries (tree + exhaustive), {mismatches} mismatches; Recall@N monotone={monotone}")


DESK_MODEL = ModelConfig(k=256, d_model=64, heads=4, d_ff=128, vlad_clusters=16, vlad_in=128, out_dim=64,
                         tnet_point_widths=(32, 64, 128), tnet_fc_widths=(64, 32))
DESK_SCHEDULE = TrainSchedule(epochs=10, lr=1e-3, dtype="float32")


def recall_at_1(model, records, maps):
    db = [r for r in records if r.split == "train"]
    q = [r for r in records if r.split == "test"]
    dd = embed(model, [maps[r.id] for r in db], batch_size=64)
    qd = embed(model, [maps[r.id] for r in q], batch_size=64)
    index = DescriptorIndex([r.id for r in db], dd, [[r.x, r.y] for r in db])
    return evaluate([r.id for r in q], [[r.x, r.y] for r in q], qd, index).recall_at_1


@pytest.mark.slow
def test_7_desk_scale_learning_signal(capsys):
    ds = synth_dataset(config=SynthConfig(n_runs=4))
    maps = dict(zip((r.id for r in ds.records), condense_many(ds.clouds, CondenserConfig(k=256))))
    baseline = recall_at_1(PlaceNet(DESK_MODEL, seed=0, dtype=np.float32).eval(), ds.records, maps)
    full = train(maps, ds.records, DESK_MODEL, DESK_SCHEDULE, seed=0)
    points_cfg = dataclasses.replace(DESK_MODEL, use_points_only=True)
    points = train(maps, ds.records, points_cfg, DESK_SCHEDULE, seed=0)
    r_full = recall_at_1(full.model, ds.records, maps)
    r_points = recall_at_1(points.model, ds.records, maps)
    minutes = max(full.seconds, points.seconds) / 60
    ok = r_full >= baseline + 15 and r_full >= r_points + 1 and minutes < 30
    verdict(
        capsys,
        7,
        ok,
        f"{len(ds.records)} places; Recall@1 trained {r_full:.1f} vs random {baseline:.1f} (need +15) "
        f"vs points-only {r_points:.1f} (need +1); slowest run {minutes:.1f} min (< 30)",
    )


def test_8_ablation_flags(capsys):
    rng = np.random.default_rng(8)
    maps = random_maps(rng, 3, 8)
    means, covs = (Tensor(a) for a in stack_maps(maps))
    raw = np.stack([m.features() for m in maps])
    p = PlaceNet(dataclasses.replace(TINY, use_points_only=True), seed=0).features(means, covs).data
    c = PlaceNet(dataclasses.replace(TINY, use_cov_only=True), seed=0).features(means, covs).data
    no_t = exercised_model(8, dataclasses.replace(TINY, use_tnet=False))
    t_feats = no_t.features(means, covs).data
    default = exercised_model(8)
    ok = (
        np.all(p[..., 3:] == 0) and np.any(p[..., :3] != 0)
        and np.all(c[..., :3] == 0) and np.any(c[..., 3:] != 0)
        and no_t.tnet is None and np.array_equal(t_feats, raw)
        and not np.array_equal(default.features(means, covs).data, raw)
    )
    verdict(capsys, 8, bool(ok), "-P covariance features exactly 0, -C mean features exactly 0, -noT features equal untransformed cells")


def test_9_format_round_trips(capsys):
    rng = np.random.default_rng(9)
    failures = []
    for trial in range(50):
        n = int(rng.integers(0, 200))
        cloud = write_cloud(None, rng.normal(size=(n, 3)) * 50)
        a = rng.normal(size=(n, 3, 3)) * 0.3
        ndt = write_ndt(None, NdtMap(rng.normal(size=(n, 3)), regularize_cov(a @ np.swapaxes(a, -1, -2)),
                                     rng.integers(3, 1000, n), float(rng.uniform(0.1, 3))))
        state = {f"p{i}": rng.normal(size=tuple(rng.integers(1, 6, int(rng.integers(0, 4))))) for i in range(int(rng.integers(0, 8)))}
        weights = write_weights(None, state)
        dim = int(rng.integers(1, 64))
        desc = write_descriptors(None, rng.choice(2**50, n, replace=False), rng.normal(size=(n, 2)) * 1e4, rng.normal(size=(n, dim)))
        table = read_descriptors(desc)
        pairs = {
            "PCD1": (cloud, write_cloud(None, read_cloud(cloud))),
            "NDT1": (ndt, write_ndt(None, read_ndt(ndt))),
            "NDTW": (weights, write_weights(None, read_weights(weights))),
            "NDTD": (desc, write_descriptors(None, table.ids, table.positions, table.descriptors.reshape(n, dim))),
        }
        failures.extend(f"{fmt}#{trial}" for fmt, (x, y) in pairs.items() if x != y)
    verdict(capsys, 9, not failures, f"PCD1, NDT1, NDTW, NDTD on 50 random payloads each; failures: {failures or 'none'}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
