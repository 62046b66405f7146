"""End-to-end acceptance criteria, each reported as one PASS/FAIL line.

The ablation world and schedule come from configs/acceptance.ini and
configs/patch.ini. Thresholds are the acceptance values; nothing is tuned here.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from cdelab.evalsuite import compute_prototypes, delta_variance, knn_classify, prototype_similarity_matrix
from cdelab.harness.config import build_encoder, read_config
from cdelab.harness.runner import AblationGrid, run_ablation
from cdelab.losses import DeltaBatch, LossConfig, ce_loss, l1_loss, supcon_loss, total_loss
from cdelab.model import _leaves, forward_batch, init_model
from cdelab.numerics import Tensor, finite_diff_grad, grad, gradients_agree, relative_error
from cdelab.world import WorldConfig, make_splits, oracle_delta, stack_pairs

from test_losses import supcon_oracle

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SPLITS = ("iid_test", "ood_compositional", "ood_systematic")


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    cfg = read_config(CONFIGS / "acceptance.ini")
    out = tmp_path_factory.mktemp("acceptance")
    start = time.perf_counter()
    res = run_ablation(cfg, AblationGrid("components"), out)
    return cfg, res, time.perf_counter() - start, out


@pytest.fixture(scope="module")
def topk_sweep(tmp_path_factory):
    cfg = read_config(CONFIGS / "patch.ini")
    return cfg, run_ablation(cfg, AblationGrid("top_k"), tmp_path_factory.mktemp("patch"))


def reports(res, point):
    return res.results[point].reports


# ---------------------------------------------------------------- 1. gradient fidelity


def test_criterion_1_gradient_fidelity(record):
    start = time.perf_counter()
    world = WorldConfig(pairs_per_split=4, observation_dim=24, hidden_dim=32)
    data = make_splits(world)
    x, xt, labels, _ = stack_pairs(data.train)
    # trainable featurizer so that every parameter of the model is checked
    model = init_model(build_encoder(world, embedding_dim=16, featurizer_trainable=True), 0)
    cfg = LossConfig(2.0, 1.0, 0.07)

    def loss_at(params):
        out = forward_batch(model, x, xt, params)
        return total_loss(out.logits, DeltaBatch(out.deltas, labels), cfg)[0]

    leaves = _leaves(model, train=True)
    loss = loss_at(leaves)
    grads = grad(loss, list(leaves.values()))
    worst, ok = 0.0, True
    for name, g in zip(leaves, grads):
        def f(v, name=name):
            p = {k: Tensor(model.params[k]) for k in model.params}
            p[name] = Tensor(v)
            return loss_at(p).item()

        fd = finite_diff_grad(f, model.params[name].copy(), h=1e-6)
        agree = gradients_agree(g, fd, loss.item(), 1e-6, tol=1e-4)
        ok &= agree
        if np.abs(g).max() > 1e-6:
            worst = max(worst, relative_error(g, fd))
    elapsed = time.perf_counter() - start
    ok &= elapsed < 10.0
    record(1, ok, f"{len(grads)} parameter arrays, worst relative error {worst:.2e}, {elapsed:.1f}s (< 1e-4, < 10s)")
    assert ok


# ---------------------------------------------------------------- 2. closed forms


def test_criterion_2_closed_form_losses(record):
    ce = ce_loss(np.zeros((1, 6)), [0]).item()
    batch = DeltaBatch(np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]]), [0, 0, 1])
    sc = supcon_loss(batch, 1.0).item()
    oracle = supcon_oracle(batch.deltas.data, batch.labels, 1.0)
    closed = 2 * math.log(1 + math.exp(-2))
    l1 = l1_loss(DeltaBatch(np.array([[1.0, -2.0, 0.0]]), [0])).item()
    ok = abs(ce - math.log(6)) < 1e-9 and abs(sc - closed) < 1e-9 and abs(sc - oracle) < 1e-9 and l1 == 3.0
    record(2, ok, f"ce={ce:.12f} supcon={sc:.12f} (oracle {oracle:.12f}) l1={l1}")
    assert ok


# ---------------------------------------------------------------- 3. ablation trend


def test_criterion_3_ablation_trend(ablation, record):
    cfg, res, elapsed, _ = ablation
    rows = {r["point"]: r for r in res.rows}
    full, ce, nocon = (rows[p]["ood_syst_mean"] for p in ("full", "ce_only", "no_contrast"))
    iid_min = min(r["iid_mean"] for r in res.rows)
    ok = full >= ce + 0.10 and full >= nocon and iid_min >= 0.95 and elapsed < 900
    summary = ", ".join(f"{p} {rows[p]['iid_mean']:.3f}/{rows[p]['ood_syst_mean']:.3f}" for p in rows)
    record(3, ok, f"IID/OOD-syst over seeds {list(cfg.seeds)}: {summary}; full-CE={full - ce:+.3f}; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 4-7. geometry of the full model


def test_criterion_4_anti_parallel(ablation, record):
    cfg, res, _, _ = ablation
    w = cfg.world
    worst = -1.0
    for rep in reports(res, "full").values():
        sim = rep["metrics"]["prototype_similarity"]
        for a, b in w.inverse_pairs:
            worst = max(worst, sim[w.action_index(a)][w.action_index(b)])
    ok = worst <= -0.9
    record(4, ok, f"max inverse-pair prototype cosine over seeds {worst:.4f} (<= -0.9)")
    assert ok


def test_criterion_5_prototype_transfer(ablation, record):
    _, res, _, _ = ablation
    iid = [r["metrics"]["transfer_similarity"]["iid_test"] for r in reports(res, "full").values()]
    syst = [r["metrics"]["transfer_similarity"]["ood_systematic"] for r in reports(res, "full").values()]
    ok = min(iid) >= 0.9 and min(syst) >= 0.8
    record(5, ok, f"min transfer similarity IID {min(iid):.4f} (>= 0.9), OOD-syst {min(syst):.4f} (>= 0.8)")
    assert ok


def test_criterion_6_invariance_direction(ablation, record):
    _, res, _, _ = ablation
    full, ce = reports(res, "full"), reports(res, "ce_only")
    counts = []
    for seed in full:
        vf = np.array(full[seed]["metrics"]["delta_variance"], dtype=float)
        vc = np.array(ce[seed]["metrics"]["delta_variance"], dtype=float)
        counts.append(int(np.sum(vf < vc)))
    ok = min(counts) >= 5
    record(6, ok, f"actions with lower variance than CE-only per seed {counts} (>= 5 of 6)")
    assert ok


def test_criterion_7_knn_comparability(ablation, record):
    _, res, _, _ = ablation
    gaps = [
        abs(r["metrics"]["knn_accuracy"]["iid_test"] - r["metrics"]["accuracy"]["iid_test"])
        for r in reports(res, "full").values()
    ]
    ok = max(gaps) <= 0.05
    record(7, ok, f"max |kNN - head| IID accuracy {max(gaps):.4f} (<= 0.05)")
    assert ok


# ---------------------------------------------------------------- 8. patch locality and top-k


def test_criterion_8_patch_locality_and_topk(topk_sweep, record):
    cfg, res = topk_sweep
    assert cfg.world.intervention_noise == 0.0
    worst = 1.0
    for point in res.results.values():
        for rep in point.reports.values():
            worst = min(worst, *rep["patch_top1_on_target"].values())
    complete = [r["point"] for r in res.rows if r["status"] == "ok"] == ["k=1", "k=2", "k=3", "k=4"]
    trend = " ".join(f"{r['point']}:{r['ood_syst_mean']:.3f}" for r in res.rows)
    ok = worst >= 0.95 and complete
    record(8, ok, f"min top-1-on-target {worst:.3f} (>= 0.95); OOD-syst per k (reported) {trend}")
    assert ok


# ---------------------------------------------------------------- 9. oracle ceiling


def test_criterion_9_oracle_ceiling(record):
    world = read_config(CONFIGS / "acceptance.ini").world
    cfg = WorldConfig.from_dict({**world.to_dict(), "intervention_noise": 0.0})
    data = make_splits(cfg)
    train = np.array([oracle_delta(p, cfg) for p in data.train])
    labels = stack_pairs(data.train)[2]
    sim = prototype_similarity_matrix(compute_prototypes(train, labels, cfg.num_actions))
    inv = [float(sim[cfg.action_index(a), cfg.action_index(b)]) for a, b in cfg.inverse_pairs]
    var, flagged = delta_variance(train, labels, cfg.num_actions)
    test = np.array([oracle_delta(p, cfg) for p in data.iid_test])
    _, acc = knn_classify(train, labels, test, 5, stack_pairs(data.iid_test)[2])
    ok = all(v == -1.0 for v in inv) and not flagged and np.all(var == 0.0) and acc == 1.0
    record(9, ok, f"inverse cosines {inv}, max variance {var.max()}, kNN accuracy {acc}")
    assert ok


# ---------------------------------------------------------------- 10. determinism


def test_criterion_10_determinism(ablation, tmp_path, record):
    cfg, _, _, first = ablation
    run_ablation(cfg, AblationGrid("components"), tmp_path)
    files = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
    differing = [str(f) for f in files if (first / f).read_bytes() != (tmp_path / f).read_bytes()]
    ok = bool(files) and not differing
    record(10, ok, f"{len(files)} report files compared, {len(differing)} differ")
    assert ok
