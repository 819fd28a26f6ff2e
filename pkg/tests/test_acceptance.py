"""Acceptance gate: one test per release criterion, each printing a
single PASS/FAIL line.

Criteria (tolerances pinned here):
  1. Affine grid worked example maps target (-1,-1) to source (-0.9,-0.7)
     for theta ((0.8,0,-0.1),(0,0.7,0)), within 1e-12.
  2. Gradient suite: sampler/grid op-level finite-difference checks
     < 1e-6 over 50 seeds; miniature end-to-end network < 1e-4.
  3. Re-ranking pipeline equals a brute-force double-loop oracle on 100
     random joint sets (n <= 64): set membership identical, final
     distances within 1e-9.
  4. Metric fixtures: AP of [rel, irrel, rel] = 5/6 exactly; CMC hand
     counts; chance-level mAP within a 3-sigma Monte-Carlo band over 50
     seeds.
  5. Descriptor fusion: fuse((3,4),(0,5),0.5) = (0.3,0.4,0,0.5) within
     1e-12; per-branch scale invariance on 100 random pairs.
  6. Synthetic end-to-end over 5 seeds (16+16 ids x 40 images, scale
     [0.6,1.5], offset +/-0.25): (a) fused rank-1 >= base rank-1 on >= 4
     seeds; (b) Pearson correlation of predicted offsets vs corrective
     ground-truth offsets >= 0.5 on >= 4 seeds; (c) re-ranked mAP >=
     plain mAP on >= 4 seeds.
  7. Repeating a criterion-6 seed yields byte-identical eval reports.
  8. Before stage 2, predicted theta is exactly ((0.8,0,0),(0,0.8,0))
     for every input.
"""

from dataclasses import replace

import numpy as np
import pytest

from panalign import autodiff as ad
from panalign.autodiff import Tensor
from panalign.corpus import GenSpec, as_arrays, generate, split_samples
from panalign.descriptor import fuse
from panalign.metrics import EvalReport, average_precision, cmc, evaluate
from panalign.network import (
    INIT_THETA_BIAS,
    PanConfig,
    PanModel,
    embed,
    loss,
    train_stage1,
    train_stage2,
)
from panalign.retrieval import (
    RankList,
    k_reciprocal,
    pairwise_sqdist,
    rerank,
)
from panalign.spatial import AffineParams, bilinear_sample, make_grid, sample_backward

from helpers import max_rel_error, numeric_grad
from test_retrieval import brute_expand, brute_rerank, brute_k_reciprocal


def report(criterion, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {criterion}: {status}  {detail}")
    assert ok, f"criterion {criterion} failed: {detail}"


# ---------------------------------------------------------------------------
# criterion 6/7 pipeline (shared across tests via module fixture)

# Training hyperparameters sized for a from-scratch run at desk scale;
# the corpus parameters are the pinned defaults (16+16 ids x 40 images,
# scale [0.6, 1.5], offset +/-0.25).
E2E_CONFIG = dict(
    base_channels=(8, 16, 32),
    align_channels=(16,),
    grid_channels=16,
    lr_main=0.01,
    lr_theta_layer=5e-4,
    grad_clip=1.0,
    total_epochs=20,
    lr_decay_epoch=15,
)
# stage 1 runs longer: the identification base needs the extra epochs to
# train from scratch reliably, while a longer stage 2 destabilizes the
# predicted-transform layer on some seeds
E2E_STAGE1 = dict(total_epochs=30, lr_decay_epoch=22)
E2E_SEEDS = (0, 1, 2, 3, 4)


def run_e2e_seed(seed):
    """gen -> two-stage train -> embed -> eval for one seed."""
    spec = GenSpec(seed=seed)
    samples = generate(spec)
    images, labels, idm = as_arrays(split_samples(samples, "train"))
    cfg = PanConfig(num_classes=len(idm), seed=seed, **E2E_CONFIG)
    model = PanModel(cfg)
    train_stage1(model, images, labels, replace(cfg, **E2E_STAGE1))
    train_stage2(model, images, labels, cfg)

    test = [s for s in samples if s.split in ("query", "gallery")]
    timgs = np.stack([s.image for s in test])
    base, align, theta = [], [], []
    for i in range(0, len(timgs), 64):
        b, a, t = embed(model, timgs[i:i + 64])
        base.append(b), align.append(a), theta.append(t)
    base, align, theta = map(np.vstack, (base, align, theta))

    # predicted offsets vs the corrective offsets (-t/s) that undo the
    # injected perturbation
    gts = np.array([np.asarray(s.gt_perturb.theta).ravel() for s in test])
    r_tx = np.corrcoef(theta[:, 2], -gts[:, 2] / gts[:, 0])[0, 1]
    r_ty = np.corrcoef(theta[:, 5], -gts[:, 5] / gts[:, 4])[0, 1]

    qi = [i for i, s in enumerate(test) if s.split == "query"]
    gi = [i for i, s in enumerate(test) if s.split == "gallery"]
    qmeta = [(test[i].identity, test[i].camera) for i in qi]
    gmeta = [(test[i].identity, test[i].camera) for i in gi]

    def dist_at(alpha):
        vecs = np.stack([fuse(base[i], align[i], alpha).vector
                         for i in range(len(test))])
        return pairwise_sqdist(vecs[qi], vecs[gi]), vecs

    d_base, _ = dist_at(1.0)      # base branch only
    d_fused, vecs = dist_at(0.5)  # fused descriptor
    rep_base = evaluate(d_base, qmeta, gmeta)
    rep_fused = evaluate(d_fused, qmeta, gmeta)
    joint = pairwise_sqdist(np.vstack([vecs[qi], vecs[gi]]),
                            np.vstack([vecs[qi], vecs[gi]]))
    d_rr = rerank(joint, k=20, lam=1.0)[:len(qi), len(qi):]
    rep_rr = evaluate(d_rr, qmeta, gmeta)
    return {
        "rank1_base": rep_base.rank_accuracy[1],
        "rank1_fused": rep_fused.rank_accuracy[1],
        "map_plain": rep_fused.mean_ap,
        "map_rerank": rep_rr.mean_ap,
        "corr_tx": float(r_tx),
        "corr_ty": float(r_ty),
        "report_plain": rep_fused.to_json(),
        "report_rerank": rep_rr.to_json(),
    }


@pytest.fixture(scope="module")
def e2e_results():
    return {seed: run_e2e_seed(seed) for seed in E2E_SEEDS}


# ---------------------------------------------------------------------------


def test_criterion_1_worked_example():
    g = make_grid(AffineParams(((0.8, 0.0, -0.1), (0.0, 0.7, 0.0))), 2, 2)
    err = max(abs(g.xs[0, 0] - (-0.9)), abs(g.ys[0, 0] - (-0.7)))
    report(1, err <= 1e-12, f"corner maps to ({g.xs[0,0]}, {g.ys[0,0]})")


def test_criterion_2_gradient_suite():
    # op level: bilinear sampler + affine grid, 50 seeds, < 1e-6
    worst_op = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        img = rng.uniform(-1, 1, size=(2, 6, 6))
        for _ in range(100):
            th = rng.uniform(-1, 1, size=(2, 3)) * np.array([1, 0.3, 0.4])
            grid = make_grid(th, 5, 5)
            px = (grid.xs + 1) / 2 * 5
            py = (grid.ys + 1) / 2 * 5
            frac = np.concatenate([px, py]) % 1.0
            if np.all((frac > 0.01) & (frac < 0.99)):
                break
        up = rng.normal(size=(2, 5, 5))
        gi, (gxs, gys) = sample_backward(img, grid, up)
        num_gi = numeric_grad(
            lambda a: float((bilinear_sample(a, grid) * up).sum()), img)
        worst_op = max(worst_op, max_rel_error(gi, num_gi))

        def loss_theta(flat):
            g2 = make_grid(flat.reshape(2, 3), 5, 5)
            return float((bilinear_sample(img, g2) * up).sum())

        xt = np.linspace(-1, 1, 5)[None, :]
        yt = np.linspace(-1, 1, 5)[:, None]
        gth = np.array([(gxs * xt).sum(), (gxs * yt).sum(), gxs.sum(),
                        (gys * xt).sum(), (gys * yt).sum(), gys.sum()])
        worst_op = max(worst_op,
                       max_rel_error(gth, numeric_grad(loss_theta, th.ravel().copy())))

    # end to end: miniature network, every parameter tensor, < 1e-4
    worst_e2e = 0.0
    for seed in range(10):
        cfg = PanConfig(num_classes=3, input_h=8, input_w=8,
                        base_channels=(2, 2), align_channels=(2,),
                        grid_channels=2, seed=seed)
        model = PanModel(cfg)
        rng = np.random.default_rng(seed + 500)
        model.params["grid_fc.w"].data[:] = rng.normal(size=(2, 6)) * 0.1
        images = rng.uniform(size=(2, 3, 8, 8))
        labels = np.array([seed % 3, (seed + 2) % 3])

        def total():
            out = model.forward(images)
            return loss(out.base_logits, out.align_logits, labels, 2)[2]

        t = total()
        ad.backward(t)
        for name, p in model.params.items():
            analytic = p.grad.copy()
            orig = p.data.copy()

            def f(a, p=p, orig=orig):
                p.data[...] = a
                v = float(total().data)
                p.data[...] = orig
                return v

            worst_e2e = max(worst_e2e,
                            max_rel_error(analytic, numeric_grad(f, orig.copy())))

    ok = worst_op < 1e-6 and worst_e2e < 1e-4
    report(2, ok, f"op-level max rel err {worst_op:.2e}, end-to-end {worst_e2e:.2e}")


def test_criterion_3_reranking_oracle():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(8, 65))
        k = int(rng.integers(2, min(n, 21)))
        lam = float(rng.uniform(0.2, 2.0))
        pts = rng.normal(size=(n, 4))
        dist = pairwise_sqdist(pts, pts)
        anchor = int(rng.integers(0, n))
        assert k_reciprocal(anchor, k, dist).members == frozenset(
            brute_k_reciprocal(anchor, k, dist)), f"seed {seed}: R mismatch"
        from panalign.retrieval import expand_set
        got_star = expand_set(k_reciprocal(anchor, k, dist), k, dist).members
        assert got_star == frozenset(brute_expand(anchor, k, dist)), \
            f"seed {seed}: R* mismatch"
        worst = max(worst, float(np.abs(
            rerank(dist, k=k, lam=lam) - brute_rerank(dist, k, lam)).max()))
    report(3, worst <= 1e-9, f"max |final - oracle| = {worst:.2e} over 100 sets")


def test_criterion_4_metric_fixtures():
    def rl(rel):
        rel = np.asarray(rel, dtype=bool)
        return RankList(0, np.arange(len(rel)), np.arange(len(rel), dtype=float), rel)

    ap_ok = average_precision(rl([1, 0, 1])) == pytest.approx(5 / 6, abs=1e-12)
    curve = cmc([rl([0, 0, 1]), rl([1, 0, 0])])
    cmc_ok = curve == {1: 0.5, 5: 1.0, 10: 1.0, 20: 1.0}

    # chance level: random descriptors vs a direct random-permutation
    # oracle of the same protocol, 50 seeds each, 3-sigma band
    n_ids, per_id, dim = 10, 4, 8
    observed = []
    oracle = []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        q = rng.normal(size=(n_ids, dim))
        g = rng.normal(size=(n_ids * per_id, dim))
        qmeta = [(i, 0) for i in range(n_ids)]
        gmeta = [(i % n_ids, 1) for i in range(n_ids * per_id)]
        observed.append(evaluate(pairwise_sqdist(q, g), qmeta, gmeta).mean_ap)
        rel = np.zeros(n_ids * per_id, dtype=bool)
        rel[:per_id] = True
        oracle.append(np.mean([
            average_precision(rl(rng.permutation(rel))) for _ in range(n_ids)
        ]))
    diff = abs(np.mean(observed) - np.mean(oracle))
    sigma = np.sqrt(np.var(observed) / 50 + np.var(oracle) / 50)
    chance_ok = diff <= 3 * sigma
    ok = ap_ok and cmc_ok and chance_ok
    report(4, ok, f"AP fixture {'ok' if ap_ok else 'BAD'}, "
                  f"CMC {'ok' if cmc_ok else 'BAD'}, "
                  f"chance mAP diff {diff:.4f} vs 3sigma {3 * sigma:.4f}")


def test_criterion_5_fusion():
    vec = fuse([3.0, 4.0], [0.0, 5.0], 0.5).vector
    exact = np.abs(vec - np.array([0.3, 0.4, 0.0, 0.5])).max()
    worst = 0.0
    rng = np.random.default_rng(0)
    for _ in range(100):
        f1, f2 = rng.normal(size=(2, 6))
        s1, s2 = rng.uniform(0.1, 10.0, size=2)
        worst = max(worst, float(np.abs(
            fuse(f1, f2, 0.4).vector - fuse(s1 * f1, s2 * f2, 0.4).vector).max()))
    ok = exact <= 1e-12 and worst <= 1e-9
    report(5, ok, f"fixture err {exact:.1e}, scale-invariance err {worst:.1e}")


def test_criterion_6_synthetic_end_to_end(e2e_results):
    a = sum(r["rank1_fused"] >= r["rank1_base"] for r in e2e_results.values())
    b = sum(r["corr_tx"] >= 0.5 and r["corr_ty"] >= 0.5
            for r in e2e_results.values())
    c = sum(r["map_rerank"] >= r["map_plain"] for r in e2e_results.values())
    detail = (f"(a) fused>=base rank-1 on {a}/5, "
              f"(b) offset corr >= 0.5 on {b}/5, "
              f"(c) rerank>=plain mAP on {c}/5; per-seed: " +
              "; ".join(
                  f"s{s}: r1 {r['rank1_base']:.2f}->{r['rank1_fused']:.2f}, "
                  f"mAP {r['map_plain']:.3f}->{r['map_rerank']:.3f}, "
                  f"corr ({r['corr_tx']:.2f},{r['corr_ty']:.2f})"
                  for s, r in e2e_results.items()))
    report(6, a >= 4 and b >= 4 and c >= 4, detail)


def test_criterion_7_determinism(e2e_results):
    again = run_e2e_seed(E2E_SEEDS[0])
    first = e2e_results[E2E_SEEDS[0]]
    ok = (again["report_plain"].encode() == first["report_plain"].encode()
          and again["report_rerank"].encode() == first["report_rerank"].encode())
    report(7, ok, "repeated seed produces byte-identical eval reports")


def test_criterion_8_initial_theta_contract():
    cfg = PanConfig(num_classes=5, input_h=32, input_w=16,
                    base_channels=(4, 8), align_channels=(4,), grid_channels=4)
    model = PanModel(cfg)
    images = np.random.default_rng(3).uniform(size=(7, 3, 32, 16))
    theta = model.forward(images).theta.data
    ok = bool((theta == INIT_THETA_BIAS).all())
    report(8, ok, f"theta rows all exactly {INIT_THETA_BIAS.tolist()}")
