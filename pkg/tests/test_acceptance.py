"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 7 and 8 run the full desk-scale search (1,000 users, 2,000 items,
30,000 interactions, five seeds) and take several minutes together.
"""

import functools
import time

import numpy as np
import pytest

import acceptance_log
from betsearch.backbone import Backbone, TrainConfig, normalized_adjacency
from betsearch.cli import main
from betsearch.dataset import InteractionDataset, generate_synthetic
from betsearch.embedding import (HEADER, MaskedEmbeddingTable, apply_action, export_sparse,
                                 import_sparse, init_table)
from betsearch.metrics import eval_ensemble, evaluate_scores, fitness_ratio
from betsearch.predictor import FitnessPredictor
from betsearch.sampler import (KINDS, BETA_MAX, DistributionSpec, SizeAction, compute_budget,
                               generate_action)
from betsearch.search import (SearchConfig, pretrain, run_baseline, run_search,
                              selective_retrain)
from oracles import brute_metrics, brute_rank, dense_propagation, relative_error

SEEDS = range(5)


def verdict(capsys, number, ok, detail):
    line = acceptance_log.record(number, ok, detail)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# -- 1 -----------------------------------------------------------------------

def test_criterion_01_hard_budget_cap(capsys):
    rng = np.random.default_rng(2024)
    ds = generate_synthetic(1000, 2000, 30000, 1.0, seed=0)
    start = time.perf_counter()
    violations = 0
    n = 0
    for c in (0.8, 0.9, 0.95):
        budget = compute_budget(ds.num_entities, 32, c)
        for i in range(3334 if c != 0.95 else 3332):
            ku, kv = KINDS[i % 4], KINDS[(i // 4) % 4]
            spec_u = DistributionSpec(ku, float(rng.uniform(0.01, BETA_MAX[ku])))
            spec_v = DistributionSpec(kv, float(rng.uniform(0.01, BETA_MAX[kv])))
            a = generate_action(ds.user_freq, ds.item_freq, c, 32, rng, spec_u, spec_v)
            s = a.sizes
            violations += int(s.sum() > budget) + int(s.min() < 1) + int(s.max() > 32)
            n += 1
    elapsed = time.perf_counter() - start
    ok = n == 10000 and violations == 0 and elapsed < 60
    verdict(capsys, 1, ok, f"{n} actions, {violations} violations, {elapsed:.1f}s (< 60s)")


# -- 2 -----------------------------------------------------------------------

def test_criterion_02_budget_arithmetic(capsys):
    b = compute_budget(29858 + 40981, 128, 0.8)
    verdict(capsys, 2, b == 1813478, f"B = {b} (expected 1,813,478)")


# -- 3 -----------------------------------------------------------------------

def test_criterion_03_permutation_invariance(capsys):
    rng = np.random.default_rng(3)
    mismatches = 0
    for trial in range(100):
        nu, ni, d_max = int(rng.integers(5, 30)), int(rng.integers(5, 40)), int(rng.integers(2, 17))
        uf = rng.integers(0, 4, nu)  # few distinct values: many frequency ties
        vf = rng.integers(0, 4, ni)
        uf[0] = vf[0] = 4
        pred = FitnessPredictor(uf, vf, d_max, seed=trial)
        for v in pred.parameters().values():
            v[...] = rng.normal(scale=0.5, size=v.shape)
        sizes = rng.integers(1, d_max + 1, nu + ni)
        a = SizeAction(sizes[:nu], sizes[nu:], 10 ** 9, d_max)
        ref = pred.predict_fitness(a)
        # equal-frequency swaps inside each field
        swapped = sizes.copy()
        freq = np.concatenate([uf, vf + 100])  # offset keeps the fields apart
        for f in np.unique(freq):
            idx = np.flatnonzero(freq == f)
            swapped[idx] = swapped[rng.permutation(idx)]
        b = SizeAction(swapped[:nu], swapped[nu:], 10 ** 9, d_max)
        mismatches += pred.predict_fitness(b) != ref
        # within-set member order: the set encoder sees shuffled member lists
        q = pred.encode_entities()[0]
        for d in np.unique(sizes):
            members = np.flatnonzero(sizes == d)
            s1 = pred.encode_set(members, int(d), q)
            s2 = pred.encode_set(rng.permutation(members), int(d), q)
            mismatches += not np.array_equal(s1, s2)
    verdict(capsys, 3, mismatches == 0, f"100 (phi, action) pairs, {mismatches} non-identical outputs")


# -- 4 -----------------------------------------------------------------------

def _bpr_worst(seed):
    rng = np.random.default_rng(seed)
    nu, ni, d = 3, 4, 3
    table = MaskedEmbeddingTable(rng.normal(size=(nu + ni, d)))
    apply_action(table, rng.integers(1, d + 1, nu + ni))
    m = Backbone(table, nu, ni)
    u, p, n = rng.integers(0, nu, 5), rng.integers(0, ni, 5), rng.integers(0, ni, 5)
    _, grad = m.loss_and_grad(u, p, n, 0.01)
    worst = 0.0
    for idx in zip(*np.nonzero(table.mask())):
        orig = table.values[idx]
        table.values[idx] = orig + 1e-6
        up = m.bpr_loss(u, p, n, 0.01)
        table.values[idx] = orig - 1e-6
        down = m.bpr_loss(u, p, n, 0.01)
        table.values[idx] = orig
        worst = max(worst, float(relative_error(grad[idx], (up - down) / 2e-6)))
    return worst


def _predictor_worst(seed):
    rng = np.random.default_rng(seed)
    pred = FitnessPredictor(np.array([2.0]), np.array([1.0, 2.0]), 4, seed=seed)
    for v in pred.parameters().values():
        v[...] = rng.normal(scale=0.4, size=v.shape)
    action = SizeAction([3], [1, 3], 100, 4)
    _, grads = pred.loss_and_grad(action, 0.7)
    h = 1e-4
    worst = 0.0
    for k, v in pred.parameters().items():
        for idx in np.ndindex(v.shape):
            orig = v[idx]
            v[idx] = orig + h
            up = pred.loss_and_grad(action, 0.7)[0]
            v[idx] = orig - h
            down = pred.loss_and_grad(action, 0.7)[0]
            v[idx] = orig
            worst = max(worst, float(relative_error(grads[k][idx], (up - down) / (2 * h), 1e-7)))
    return worst


def test_criterion_04_gradient_checks(capsys):
    bpr = max(_bpr_worst(s) for s in range(3))
    pred = max(_predictor_worst(s) for s in range(2))
    ok = bpr <= 1e-4 and pred <= 1e-4
    verdict(capsys, 4, ok, f"max rel. error BPR-MF {bpr:.2e}, predictor MSE {pred:.2e} (<= 1e-4)")


# -- 5 -----------------------------------------------------------------------

def test_criterion_05_metric_oracles(capsys):
    worst = 0.0
    ks = (1, 3, 5, 10, 20)
    for seed in range(50):
        rng = np.random.default_rng(seed)
        nu, ni = int(rng.integers(1, 6)), int(rng.integers(3, 21))
        train, val = [], []
        for u in range(nu):
            perm = rng.permutation(ni)
            nt = int(rng.integers(0, ni - 1))
            nv = int(rng.integers(1, ni - nt + 1))
            train += [(u, int(i)) for i in perm[:nt]]
            val += [(u, int(i)) for i in perm[nt:nt + nv]]
        ds = InteractionDataset(nu, ni, np.array(train).reshape(-1, 2),
                                np.array(val).reshape(-1, 2), np.zeros((0, 2)))
        scores = rng.integers(0, 3, size=(nu, ni)).astype(float)
        res = evaluate_scores(lambda users: scores[users], ds, "val", ks)
        rel, tr = ds.relevant_by_user("val"), ds.relevant_by_user("train")
        ens = 0.0
        for k in ks:
            pairs = [brute_metrics(brute_rank(scores[u], set(tr.get(u, []))), set(rel[u].tolist()), k)
                     for u in sorted(rel)]
            r, n = np.mean([x[0] for x in pairs]), np.mean([x[1] for x in pairs])
            worst = max(worst, abs(res.recall[k] - r), abs(res.ndcg[k] - n))
            ens += sum(x[0] + x[1] for x in pairs)
        worst = max(worst, abs(res.ensemble - ens / (2 * len(ks) * len(rel))))
    ds = generate_synthetic(50, 80, 700, 1.0, seed=1)
    model = Backbone.for_dataset(ds, 8, seed=0)
    ratio = fitness_ratio(model.copy(), eval_ensemble(model, ds).ensemble, ds)
    ok = worst <= 1e-12 and ratio == 1.0
    verdict(capsys, 5, ok, f"50 instances, max abs. deviation {worst:.1e} (<= 1e-12); "
                           f"full-mask ratio {ratio!r}")


# -- 6 -----------------------------------------------------------------------

def test_criterion_06_lightgcn_oracle(capsys):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        nu = int(rng.integers(2, 20))
        ni = int(rng.integers(2, 50 - nu + 1))
        pairs = np.column_stack([rng.integers(0, nu, 3 * (nu + ni)), rng.integers(0, ni, 3 * (nu + ni))])
        adj = normalized_adjacency(nu, ni, pairs)
        x = rng.normal(size=(nu + ni, 5))
        for layers in (1, 2, 3, 4):
            m = Backbone(MaskedEmbeddingTable(x), nu, ni, "lightgcn", layers, adj)
            worst = max(worst, float(np.abs(m.propagate(x) - dense_propagation(adj, layers) @ x).max()))
    verdict(capsys, 6, worst <= 1e-10, f"20 graphs x 4 depths, max abs. deviation {worst:.1e} (<= 1e-10)")


# -- 7 / 8 ---------------------------------------------------------------------

DESK_TRAIN = TrainConfig()


@functools.lru_cache(maxsize=None)
def desk(seed):
    """Dataset, pretrained model and cached denominator for one seed."""
    start = time.perf_counter()
    ds = generate_synthetic(1000, 2000, 30000, 1.0, seed=seed)
    model, rep = pretrain(ds, 32, "mf", 0, DESK_TRAIN, seed)
    return ds, model, rep.best_val, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_07_end_to_end(capsys):
    total = 0.0
    rows = []
    finetunes_ok = True
    for seed in SEEDS:
        ds, model, den, t_pre = desk(seed)
        start = time.perf_counter()
        cfg = SearchConfig(T=10, m=20, c=0.9, d_max=32, seed=seed)
        res = run_search(ds, model, cfg, DESK_TRAIN, den)
        finetunes_ok &= res.finetunes == cfg.T
        bet = selective_retrain(res.population, ds, cfg, DESK_TRAIN).val_ensemble
        su = eval_ensemble(run_baseline("su", ds, cfg, DESK_TRAIN)[1], ds).ensemble
        sr = eval_ensemble(run_baseline("sr", ds, cfg, DESK_TRAIN)[1], ds).ensemble
        total += t_pre + time.perf_counter() - start
        rows.append((seed, bet, su, sr, res.finetunes))
        with capsys.disabled():
            print(f"\n  seed {seed}: BET {bet:.4f}  SU {su:.4f}  SR {sr:.4f}  finetunes {res.finetunes}")
    vs_sr = sum(b >= r for _, b, _, r, _ in rows)
    vs_su = sum(b >= u for _, b, u, _, _ in rows)
    ok = finetunes_ok and vs_sr >= 4 and vs_su >= 3 and total <= 900
    verdict(capsys, 7, ok, f"(a) T finetunes every seed: {finetunes_ok}; (b) BET >= SR in {vs_sr}/5 "
                           f"(need 4), >= SU in {vs_su}/5 (need 3); (c) {total:.0f}s (<= 900s)")


@pytest.mark.slow
def test_criterion_08_predictor_trend(capsys):
    wins = 0
    for seed in SEEDS:
        ds, model, den, _ = desk(seed)
        res = run_search(ds, model, SearchConfig(T=20, m=20, c=0.9, d_max=32, seed=seed),
                         DESK_TRAIN, den)
        losses = [r.predictor_loss for r in res.records]
        early, late = np.mean(losses[:5]), np.mean(losses[15:20])
        wins += late <= early
        with capsys.disabled():
            print(f"\n  seed {seed}: mean MSE iterations 1-5 {early:.4g}, 16-20 {late:.4g}")
    verdict(capsys, 8, wins >= 4, f"late MSE <= early MSE in {wins}/5 seeds (need 4)")


# -- 9 -----------------------------------------------------------------------

def test_criterion_09_determinism(capsys, tmp_path):
    sets = []
    for kv in ("data.num_users=80", "data.num_items=120", "data.interactions=1500", "search.d_max=8",
               "search.c=0.8", "search.T=5", "search.m=5", "search.retrain_top_k=2",
               "train.max_epochs=10", "train.batch_size=256", "train.finetune_epochs=2", "seed=5"):
        sets += ["--set", kv]
    for run in ("a", "b"):
        assert main(["pretrain", "--out", str(tmp_path / run / "pre")] + sets) == 0
        assert main(["search", "--model", str(tmp_path / run / "pre"), "--out", str(tmp_path / run / "s")]) == 0
    same = {f: (tmp_path / "a/s" / f).read_bytes() == (tmp_path / "b/s" / f).read_bytes()
            for f in ("population.json", "table.bets")}
    verdict(capsys, 9, all(same.values()),
            ", ".join(f"{f} {'identical' if v else 'DIFFERS'}" for f, v in same.items()))


# -- 10 ----------------------------------------------------------------------

def test_criterion_10_format_roundtrip(capsys, tmp_path):
    ok_bytes = ok_size = ok_values = True
    for seed in range(10):
        rng = np.random.default_rng(seed)
        rows, d = int(rng.integers(1, 50)), int(rng.integers(1, 33))
        table = init_table(rows, d, seed=seed)
        apply_action(table, rng.integers(1, d + 1, rows))
        a, b = tmp_path / f"{seed}a.bets", tmp_path / f"{seed}b.bets"
        export_sparse(table, a)
        back = import_sparse(a)
        export_sparse(back, b)
        ok_bytes &= a.read_bytes() == b.read_bytes()
        ok_size &= a.stat().st_size == HEADER.size + 4 * rows + 4 * table.retained
        ok_values &= bool(np.all(back.values[~back.mask()] == 0))
    ok = ok_bytes and ok_size and ok_values
    verdict(capsys, 10, ok, f"byte-identical re-export {ok_bytes}; size = 24 + 4*rows + 4*retained "
                            f"{ok_size}; masked values absent {ok_values}")
