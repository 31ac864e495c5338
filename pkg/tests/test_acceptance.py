"""Acceptance criteria 1-9, one test each.

Every test tags itself with ``record_property("criterion", ...)``; conftest
prints one PASS/FAIL line per criterion at the end of the session.
"""

import math
import time
from pathlib import Path

import numpy as np
import torch

from cascade_sgg import runner
from cascade_sgg.config import RunConfig
from cascade_sgg.detection import hierarchical_cls_loss
from cascade_sgg.evaluation import EvalConfig, evaluate_task, hmr_at_k
from cascade_sgg.geometry import rotated_iou
from cascade_sgg.gradcheck import check_gradients
from cascade_sgg.pipeline import generate_corpus
from cascade_sgg.ppg import PpgModel, fit_ppg, pair_score_array, ppg_loss, ranking_auc, two_cluster_samples
from cascade_sgg.rpcm import (
    GraphInputs,
    GraphState,
    MessagingParams,
    RelationPredictor,
    RpcmConfig,
    attention,
    build_adjacency,
    build_samples,
    l2_normalize,
    loss_instance_contrastive,
    loss_instance_distance,
    loss_prototype_contrast,
    loss_prototype_distance,
    MESSAGE_TYPES,
    pba_run,
    predict_relation,
)
from oracles import brute_force_recall, fuzzed_box_pairs, monte_carlo_iou, noisy_prediction, oracle_image, \
    shapely_iou
from reference_tables import triples

RECIPES = ("harbor", "airport", "power_line")


def _tag(record_property, n, title):
    record_property("criterion", f"{n}. {title}")


def _budget(t0, seconds):
    took = time.perf_counter() - t0
    assert took < seconds, f"took {took:.1f} s, budget {seconds} s"


# 1 -----------------------------------------------------------------------------

def test_c1_hmr_identity_on_reference_tables(record_property):
    _tag(record_property, 1, "HMR identity on every reference (MR, mMR, HMR) triple within 0.01")
    t0 = time.perf_counter()
    bad = [(label, hmr, round(hmr_at_k(mr, mmr), 4)) for label, mr, mmr, hmr in triples()
           if abs(hmr_at_k(mr, mmr) - hmr) > 0.01]
    _budget(t0, 1)
    assert not bad, f"{len(bad)} of {len(triples())} reference HMR values disagree: {bad}"


# 2 -----------------------------------------------------------------------------

def test_c2_metrics_equal_brute_force(record_property, vocab):
    _tag(record_property, 2, "MR/mMR/HMR at K in {5, 20, 1500} equal a brute-force evaluator on 10 scenes")
    t0 = time.perf_counter()
    scenes = generate_corpus(RECIPES, 10, seed=2024, num_classes=vocab.num_objects)
    graphs = [sc.graph for sc in scenes]
    assert all(len(g.objects) <= 30 for g in graphs)
    rng = np.random.default_rng(2024)
    preds = [noisy_prediction(g, vocab.num_objects, vocab.num_relations, rng, extra=80) for g in graphs]
    ks = (5, 20, 1500)
    got = evaluate_task(preds, graphs, EvalConfig(ks=ks), num_relations=vocab.num_relations).metrics
    want = brute_force_recall([oracle_image(p, g) for p, g in zip(preds, graphs)], ks, vocab.num_relations)
    _budget(t0, 10)
    for k in ks:
        assert got[k] == want[k], k


# 3 -----------------------------------------------------------------------------

def test_c3_rotated_iou_against_oracles(record_property):
    _tag(record_property, 3, "rotated IoU vs Monte Carlo (1e-2) and polygon clipping (1e-9) on 200 pairs")
    t0 = time.perf_counter()
    sq = np.array([[0, 0], [0, 1], [1, 1], [1, 0]], dtype=float)
    assert abs(rotated_iou(sq, sq + [0.5, 0]) - 1 / 3) <= 1e-9
    rng = np.random.default_rng(3)
    worst_exact = worst_mc = 0.0
    for a, b in fuzzed_box_pairs(3, 200):
        got = rotated_iou(a, b)
        worst_exact = max(worst_exact, abs(got - shapely_iou(a, b)))
        worst_mc = max(worst_mc, abs(got - monte_carlo_iou(a, b, 10 ** 6, rng)))
    _budget(t0, 30)
    assert worst_exact <= 1e-9
    assert worst_mc <= 1e-2


# 4 -----------------------------------------------------------------------------

def _gen(seed):
    return torch.Generator().manual_seed(seed)


def _leaf(shape, seed, scale=1.0, shift=0.0):
    return (torch.randn(*shape, dtype=torch.float64, generator=_gen(seed)) * scale + shift).requires_grad_()


def _cls_case(seed):
    phi, w = _leaf((5,), seed), _leaf((5,), seed + 1, 0.2, 1.0)
    t = torch.eye(5, dtype=torch.float64)[seed % 5]
    return lambda: hierarchical_cls_loss(phi, w, t), [phi, w]


def _ped_case(seed):
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        m = PpgModel(6)
    x = torch.rand(8, 6, dtype=torch.float64, generator=_gen(seed))
    n = 1 + seed % 4
    return lambda: ppg_loss(m, x, n), list(m.parameters())


def _ic_case(seed):
    r, p = _leaf((6, 4), seed), _leaf((5, 4), seed + 1)
    t = torch.randint(0, 5, (6,), generator=_gen(seed))
    return lambda: loss_instance_contrastive(l2_normalize(r), l2_normalize(p), t, 0.3), [r, p]


def _id_case(seed):
    # gamma large enough that every hinge is active away from its kink
    r, n, p = _leaf((6, 4), seed, 0.5), _leaf((6, 4), seed + 1, 0.5), _leaf((6, 4), seed + 2, 0.5)
    return lambda: loss_instance_distance(r, n, p, 10.0), [r, n, p]


def _pc_case(seed):
    p = _leaf((5, 4), seed)
    return lambda: loss_prototype_contrast(l2_normalize(p)), [p]


def _pd_case(seed):
    p = _leaf((5, 4), seed)
    return lambda: loss_prototype_distance(l2_normalize(p), 4, 4.0), [p]


def _total_case(seed):
    rng = np.random.default_rng(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        m = RelationPredictor(6, 4, ["left of", "right of", "near"], rng.normal(size=(3, 5)),
                              RpcmConfig(dim=4, joint_dim=3, iterations=2, k=3))
    subj, obj = np.array([0, 1, 2, 0, 3]), np.array([1, 2, 3, 2, 0])
    inputs = GraphInputs(torch.as_tensor(rng.normal(size=(4, 6))), torch.as_tensor(rng.normal(size=(5, 4))),
                         build_adjacency(4, subj, obj))
    labels = rng.random((5, 3)) < 0.4
    pairs, targets = build_samples(labels, background=True)
    return lambda: m.losses(inputs, labels, pairs, targets)["total"], list(m.parameters())


LOSS_CASES = {"hierarchical_cls_loss": _cls_case, "ped": _ped_case, "ic": _ic_case, "id": _id_case,
              "pc": _pc_case, "pd": _pd_case, "rpcm_total_loss": _total_case}


def test_c4_gradient_checks(record_property):
    _tag(record_property, 4, "7 losses pass finite-difference checks (rel. error < 1e-4) at 20 seeded points")
    t0 = time.perf_counter()
    failures = []
    for name, case in LOSS_CASES.items():
        for seed in range(20):
            fn, params = case(seed)
            r = check_gradients(fn, params)
            if not r.passed(1e-4):
                failures.append((name, seed, r.relative_error))
    _budget(t0, 60)
    assert not failures, failures


# 5 -----------------------------------------------------------------------------

def _pba_state(seed, n, subj, obj, dim=6):
    g = _gen(seed)
    e = torch.randn(n, dim, dtype=torch.float64, generator=g)
    r = torch.randn(len(subj), dim, dtype=torch.float64, generator=g)
    return GraphState.initial(e, r, build_adjacency(n, subj, obj))


def _pba_params(seed, dim=6):
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        p = MessagingParams(dim)
    with torch.no_grad():
        p.gate_entity.normal_(generator=_gen(seed + 1))
        p.gate_relation.normal_(generator=_gen(seed + 2))
    return p


def test_c5_pba_structure(record_property):
    _tag(record_property, 5, "PBA permutation equivariance, attention normalization, iteration composition")
    t0 = time.perf_counter()
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n, R = 7, 12
        subj = rng.integers(0, n, R)
        obj = (subj + 1 + rng.integers(0, n - 1, R)) % n
        s, p = _pba_state(seed, n, subj, obj), _pba_params(seed)

        pe, pr = rng.permutation(n), rng.permutation(R)
        inv = np.argsort(pe)
        s2 = GraphState.initial(s.entity[pe], s.relation[pr], build_adjacency(n, inv[subj[pr]], inv[obj[pr]]))
        a, b = pba_run(s, p, 4), pba_run(s2, p, 4)
        assert torch.allclose(b.entity, a.entity[pe], atol=1e-6, rtol=0)
        assert torch.allclose(b.relation, a.relation[pr], atol=1e-6, rtol=0)

        for t in MESSAGE_TYPES:
            recv, _, alpha = attention(s, p, t)
            size = n if t in ("ee", "rs", "ro") else R
            sums = torch.zeros(size, dtype=torch.float64).index_add(0, recv, alpha.detach())
            assert torch.allclose(sums[torch.unique(recv)], torch.ones(1, dtype=torch.float64), atol=1e-6, rtol=0)

        l1, l2 = 1 + seed % 3, 1 + (seed // 3) % 3
        c, d = pba_run(pba_run(s, p, l1), p, l2), pba_run(s, p, l1 + l2)
        assert torch.equal(c.entity, d.entity) and torch.equal(c.relation, d.relation)
    _budget(t0, 10)


# 6 -----------------------------------------------------------------------------

def test_c6_ppg_separates_clusters(record_property):
    _tag(record_property, 6, "PPG trained on 500 positive samples ranks held-out positives over far cluster, AUC >= 0.9")
    t0 = time.perf_counter()
    train, test_pos, test_far = two_cluster_samples(6, n_train=500)
    with torch.random.fork_rng():
        torch.manual_seed(6)
        m = PpgModel(train.shape[1])
    m.fit_scaler(train)
    fit_ppg(m, m.prepare(train), epochs=30, lr=3e-3, seed=6)
    auc = ranking_auc(pair_score_array(m, m.prepare(test_pos)), pair_score_array(m, m.prepare(test_far)))
    _budget(t0, 120)
    assert auc >= 0.9, auc


# 7 -----------------------------------------------------------------------------

def _c7_config(root: Path, iterations: int) -> RunConfig:
    cfg = RunConfig(name=f"c7-L{iterations}")
    cfg.paths.data_dir = str(root / "data")
    cfg.paths.checkpoint_dir = str(root / f"ckpt-L{iterations}")
    cfg.paths.report_dir = str(root / "reports")
    cfg.data.num_scenes = 200
    cfg.rpcm.pair_mode = "gt"
    cfg.rpcm.iterations = iterations
    cfg.eval.ks = [20]
    return cfg


def test_c7_toy_predcls(record_property, tmp_path):
    _tag(record_property, 7, "toy PredCls: RPCM beats frequency by >= 10 MR@20, and L=4 >= L=1 on HMR@20")
    t0 = time.perf_counter()
    got = {}
    for L in (4, 1):
        cfg = _c7_config(tmp_path, L)
        if L == 4:
            runner.cmd_generate(cfg)
        runner.cmd_train(cfg, "rpcm")
        got[L] = runner.load_report(runner.cmd_evaluate(cfg, ["PredCls"], "rpcm")[0]).metrics[20]
    cfg = _c7_config(tmp_path, 4)
    cfg.name = "c7-frequency"
    freq = runner.load_report(runner.cmd_evaluate(cfg, ["PredCls"], "frequency")[0]).metrics[20]
    print(f"\nc7: RPCM L=4 {got[4]}, L=1 {got[1]}, frequency {freq}")
    _budget(t0, 600)
    assert got[4]["MR"] - freq["MR"] >= 10.0, (got[4]["MR"], freq["MR"])
    assert got[4]["HMR"] >= got[1]["HMR"], (got[4]["HMR"], got[1]["HMR"])


# 8 -----------------------------------------------------------------------------

def test_c8_prediction_invariances(record_property):
    _tag(record_property, 8, "relation argmax unchanged under positive rescaling of r and any tau > 0, 100 cases")
    rng = np.random.default_rng(8)
    for _ in range(100):
        c, d = int(rng.integers(2, 12)), int(rng.integers(2, 16))
        p_bar = l2_normalize(torch.as_tensor(rng.normal(size=(c, d))))
        r = rng.normal(size=d)
        base = predict_relation(r, p_bar, 0.1).relation_class
        scale = math.exp(rng.uniform(-8, 8))
        tau = math.exp(rng.uniform(-6, 4))
        assert predict_relation(scale * r, p_bar, 0.1).relation_class == base
        assert predict_relation(r, p_bar, tau).relation_class == base
        assert predict_relation(scale * r, p_bar, tau).relation_class == base


# 9 -----------------------------------------------------------------------------

def _tree(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c9_selftest_is_deterministic(record_property, tmp_path):
    _tag(record_property, 9, "two selftest runs produce byte-identical reports")
    runner.cmd_selftest(tmp_path / "a")
    runner.cmd_selftest(tmp_path / "b")
    a, b = _tree(tmp_path / "a" / "reports"), _tree(tmp_path / "b" / "reports")
    assert a and a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []
