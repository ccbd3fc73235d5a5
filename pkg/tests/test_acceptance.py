"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` or ``python tests/test_acceptance.py``.
Criteria 7 and 11 share a session fixture that trains six toy models (about half an hour on one core).
"""

import sys
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from ggnn_iml.data import distort
from ggnn_iml.gnn import GGNNBlock, build_knn_graph, guidance_shaping_trial, level_triplet_loss, partition_pnh
from ggnn_iml.layers import BayarConv, DetectionHead, FuseLevels, LocalizationHead, PPM
from ggnn_iml.metrics import image_f1, pixel_f1, roc_auc
from ggnn_iml.model import DICE_EPS, IMLModel, bce_loss, composite_loss, dice_loss
from ggnn_iml.tensor import PRIMITIVES, Tape, Tensor, backward, conv2d, grad_check, grad_check_params
from ggnn_iml.train import (
    OptimizerState, PlateauState, TrainConfig, TrainState, adamw_step, evaluate_model, load_checkpoint,
    model_from_checkpoint, run_toy_experiment, toy_datasets, train_loop,
)
from ggnn_iml.vssd import (
    BackboneConfig, SsdTokenParams, VSSDBackbone, VSSDBlock, compute_erf, nc_ssd_aggregate, nc_ssd_naive,
)

from test_gnn import brute_knn
from test_metrics import confusion_f1, pairwise_auc
from test_tensor import _rand_case

TOL = 1e-4


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance] criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {n}: {detail}"
    return emit


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def readout(shape, seed):
    return t64(np.random.default_rng(seed).normal(size=shape))


# --- 1 ---------------------------------------------------------------------------------------

def _layer_cases(rng):
    w = lambda shape: readout(shape, int(rng.integers(2**31)))
    bayar = BayarConv(3, 2, 3, rng=rng, dtype=np.float64)
    fuse = FuseLevels((2,), rng=rng, dtype=np.float64)
    ppm = PPM(3, 4, scales=(1, 2, 3), rng=rng, dtype=np.float64)
    det = DetectionHead(3, rng=rng, dtype=np.float64)
    loc = LocalizationHead(3, mid=(3, 2), rng=rng, dtype=np.float64)
    blk = VSSDBlock(4, 3, rng=rng, dtype=np.float64)
    for lin in (blk.out, blk.fc2):
        lin.weight.data = rng.normal(size=lin.weight.shape)
    gg = GGNNBlock(4, k=3, rng=rng, dtype=np.float64)
    other = t64(rng.normal(size=(1, 2, 4, 4)))
    wb, wf, wp, wd, wl, wv, wg = (w((1, 2, 5, 5)), w((1, 2, 4, 4)), w((1, 4, 4, 4)), w((2,)), w((1, 1, 8, 8)),
                                  w((8, 4)), w((1, 4, 3, 3)))
    labels = np.array([[0, 1, 0], [1, 1, 0], [0, 0, 1]])
    for m in (fuse, ppm, det, loc, blk, gg):
        # zero-initialised biases can park a relu input exactly on its kink; check at a generic point instead
        for name, prm in m.named_parameters():
            if name.endswith("bias"):
                prm.data = rng.normal(size=prm.shape) * 0.1
    return {
        "BayarConv": (bayar, lambda x: (bayar(x) * wb).sum(), rng.normal(size=(1, 3, 5, 5))),
        "FPN fuse": (fuse, lambda x: (fuse([x], [other])[0] * wf).sum(), rng.normal(size=(1, 2, 4, 4))),
        "PPM": (ppm, lambda x: (ppm(x) * wp).sum(), rng.normal(size=(1, 3, 4, 4))),
        "detection head": (det, lambda x: (det(x) * wd).sum(), rng.normal(size=(2, 3, 3, 3))),
        "localization head": (loc, lambda x: (loc(x) * wl).sum(), rng.normal(size=(1, 3, 2, 2))),
        "VSSD block": (blk, lambda x: (blk(x) * wv).sum(), rng.normal(size=(8, 4))),
        "G-GNN block": (gg, lambda x: (gg(x, labels)[0] * wg).sum() + gg(x, labels)[1],
                        rng.normal(size=(1, 4, 3, 3)) * 2),
    }


def test_criterion_01_gradient_fidelity(verdict):
    t0 = time.perf_counter()
    worst = {}
    rng = np.random.default_rng(0)
    for name in sorted(PRIMITIVES):
        prng = np.random.default_rng(abs(hash(name)) % 2**32)
        worst[f"primitive {name}"] = max(grad_check(*_rand_case(name, prng)).max_rel_error for _ in range(20))
    for name, (module, f, x0) in _layer_cases(rng).items():
        errs = [grad_check(f, x0).max_rel_error]
        errs += [r.max_rel_error for r in grad_check_params(lambda: f(t64(x0)), dict(module.named_parameters())).values()]
        worst[name] = max(errs)

    model = IMLModel(seed=0, dtype=np.float64)
    x0 = rng.uniform(size=(2, 3, 32, 32))
    mask = np.zeros((2, 32, 32), np.uint8)
    mask[1, 8:20, 6:18] = 1
    labels = np.array([0, 1])
    rep = grad_check(lambda x: composite_loss(model(x, mask), mask, labels), x0, step=1e-5, max_coords=600, seed=1)
    worst["full model (600 input coords)"] = rep.max_rel_error

    seconds = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < TOL and seconds < 300
    verdict(1, ok, f"worst rel err {err:.2e} ({name}); {len(worst)} checks; {seconds:.0f}s")


# --- 2 ---------------------------------------------------------------------------------------

def test_criterion_02_scan_order_invariance(verdict):
    rng = np.random.default_rng(2)
    perm_err = naive_err = 0.0
    for _ in range(100):
        L, N, d = int(rng.integers(1, 65)), int(rng.integers(1, 9)), int(rng.integers(1, 7))
        a, b, c = rng.uniform(0.3, 3.0, L), rng.normal(size=(L, N)), rng.normal(size=(L, N))
        x = rng.normal(size=(L, d))
        agg = lambda x, a, b, c: nc_ssd_aggregate(t64(x), SsdTokenParams(t64(a), t64(b), t64(c))).data
        y = agg(x, a, b, c)
        p = rng.permutation(L)
        perm_err = max(perm_err, np.abs(agg(x[p], a[p], b[p], c[p]) - y[p]).max())
        naive_err = max(naive_err, np.abs(y - nc_ssd_naive(x, a, b, c)).max())
    ok = perm_err < 1e-9 and naive_err < 1e-10
    verdict(2, ok, f"permutation err {perm_err:.1e} (< 1e-9), naive err {naive_err:.1e} (< 1e-10)")


# --- 3 ---------------------------------------------------------------------------------------

def test_criterion_03_erf_full_support(verdict):
    t0 = time.perf_counter()
    probes = [np.random.default_rng(100 + i).uniform(size=(3, 32, 32)) for i in range(4)]
    ratios = []
    for seed in range(20):
        bb = VSSDBackbone(BackboneConfig(), rng=np.random.default_rng(seed), dtype=np.float64)
        erf = compute_erf(lambda x: bb(x)[0], probes)
        ratios.append(erf.min() / erf.max())
    rng = np.random.default_rng(3)
    kernels = [t64(rng.normal(size=(3, 3, 3, 3))) for _ in range(3)]

    def cnn(x):
        for k in kernels:
            x = conv2d(x, k, padding=1).relu()
        return x

    cnn_erf = compute_erf(cnn, probes)
    window = np.zeros((32, 32), bool)
    window[13:20, 13:20] = True
    outside_zero = bool(np.all(cnn_erf[~window] == 0))
    seconds = time.perf_counter() - t0
    ok = min(ratios) > 1e-12 and outside_zero and seconds < 120
    verdict(3, ok, f"min ERF/max over 20 inits {min(ratios):.2e} (> 1e-12); "
                   f"3x3 CNN zero outside 7x7: {outside_zero}; {seconds:.0f}s")


# --- 4 ---------------------------------------------------------------------------------------

def test_criterion_04_knn_oracle(verdict):
    rng = np.random.default_rng(4)
    mismatches = 0
    for i in range(200):
        M, D = int(rng.integers(2, 129)), int(rng.integers(1, 33))
        k = int(rng.integers(1, min(M - 1, 12) + 1))
        x = rng.normal(size=(M, D))
        if i % 4 == 0:
            x = np.round(x)  # integer lattice: plenty of distance ties
        mismatches += not np.array_equal(build_knn_graph(x, k).neighbors, brute_knn(x, k))
    verdict(4, mismatches == 0, f"{200 - mismatches}/200 instances equal to the full-sort oracle")


# --- 5 ---------------------------------------------------------------------------------------

def test_criterion_05_triplet_hand_values(verdict):
    # anchor (0,0): positive at squared distance 4, negative at 1 (hard) -> 4 + 9 + 9 = 22.
    # The other anchors add 4 + 5 (positive 4, negative 5, no hard) and 0 + 7 (no positive, mean negative 3).
    x = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    level = level_triplet_loss(t64(x), np.array([0, 0, 1]), 10.0).item()
    worked = 3 * level - 9.0 - 7.0
    far = np.array([[0.0, 0.0], [0.0, 0.0], [20.0, 0.0], [20.0, 0.0]])
    zero = level_triplet_loss(t64(far), np.array([0, 0, 1, 1]), 10.0).item()
    rng = np.random.default_rng(5)
    decreased = checked = switched = 0
    for _ in range(200):
        M = int(rng.integers(3, 20))
        x0 = rng.normal(size=(M, 4))
        labels = rng.integers(0, 2, M)
        leaf = Tensor(x0, requires_grad=True)
        with Tape():
            loss = level_triplet_loss(leaf, labels, 10.0)
            g = backward(loss)[id(leaf)]
        if loss.item() > 0:
            checked += 1
            x1 = x0 - 1e-3 * g
            down = level_triplet_loss(t64(x1), labels, 10.0).item() < loss.item()
            decreased += down
            if not down:
                hard = lambda x: [tuple(partition_pnh(x, labels, a)[2]) for a in range(M)]
                switched += hard(x0) != hard(x1)
    ok = abs(worked - 22.0) <= 1e-12 and abs(zero) <= 1e-12 and decreased == checked > 0
    verdict(5, ok, f"worked example {worked!r} (22), zero case {zero!r}, descent {decreased}/{checked} "
                   f"({switched} of {checked - decreased} misses change a hard-negative set)")


# --- 6 ---------------------------------------------------------------------------------------

def test_criterion_06_guidance_shaping(verdict):
    trials = [guidance_shaping_trial(seed) for seed in range(50)]
    raised = sum(t.edge_fraction_after > t.edge_fraction_before for t in trials)
    halved = sum(t.distance_ratio_after <= 0.5 * t.distance_ratio_before for t in trials)
    drop = np.mean([1 - t.distance_ratio_after / t.distance_ratio_before for t in trials])
    ok = raised >= 48 and halved == 50
    verdict(6, ok, f"edge fraction raised in {raised}/50 (need 48), ratio halved in {halved}/50 "
                   f"(mean drop {drop:.0%})")


# --- 7 and 11 --------------------------------------------------------------------------------

@pytest.fixture(scope="session")
def toy_runs():
    data = toy_datasets()
    runs = {(seed, gamma): run_toy_experiment(seed, gamma, data=data) for seed in (0, 1, 2) for gamma in (0.001, 0.0)}
    return data, runs


def test_criterion_07_toy_training(verdict, toy_runs):
    data, runs = toy_runs
    main = runs[(0, 0.001)]
    margin = main.pixel_f1 - main.baseline_pixel_f1
    full = np.mean([runs[(s, 0.001)].pixel_f1 for s in (0, 1, 2)])
    ablation = np.mean([runs[(s, 0.0)].pixel_f1 for s in (0, 1, 2)])
    slowest = max(r.seconds for r in runs.values())
    epochs = max(len(r.log) for r in runs.values())
    a, b, c = margin >= 0.15, (main.image_auc or 0) >= 0.85, full >= ablation
    ok = a and b and c and epochs <= 30 and slowest <= 1800
    verdict(7, ok, f"(a) pixel-F1 {main.pixel_f1:.3f} vs all-positive {main.baseline_pixel_f1:.3f} "
                   f"(+{margin:.3f}, need 0.15): {a}; (b) AUC {main.image_auc:.3f}: {b}; "
                   f"(c) mean pixel-F1 gamma=0.001 {full:.3f} vs gamma=0 {ablation:.3f}: {c}; "
                   f"{epochs} epochs, slowest run {slowest:.0f}s")


# --- 8 ---------------------------------------------------------------------------------------

def test_criterion_08_loss_and_metric_oracles(verdict):
    rng = np.random.default_rng(8)
    errs = {"dice": 0.0, "bce": 0.0, "pixel_f1": 0.0, "image_f1": 0.0, "auc": 0.0}
    for _ in range(500):
        h, w = (int(v) for v in rng.integers(1, 10, 2))
        p = rng.random((h, w))
        g = rng.random((h, w)) < 0.4
        g.flat[0] = True
        eps = DICE_EPS
        dice_want = 1 - (2 * (p * g).sum() + eps) / (p.sum() + g.sum() + eps)
        errs["dice"] = max(errs["dice"], abs(dice_loss(p, g).item() - dice_want))
        z, y = rng.normal(size=20) * 5, rng.integers(0, 2, 20)
        bce_want = np.mean(np.logaddexp(0.0, z) - y * z)
        errs["bce"] = max(errs["bce"], abs(bce_loss(z, y).item() - bce_want))
        errs["pixel_f1"] = max(errs["pixel_f1"], abs(pixel_f1(p, g) - confusion_f1(p >= 0.5, g)))
        n = int(rng.integers(2, 40))
        s, lab = np.round(rng.random(n), 2), rng.integers(0, 2, n)
        errs["image_f1"] = max(errs["image_f1"], abs(image_f1(s, lab) - confusion_f1(s >= 0.5, lab)))
        lab[0], lab[1] = 0, 1
        errs["auc"] = max(errs["auc"], abs(roc_auc(s, lab) - pairwise_auc(s, lab)))
    hand = roc_auc([0.8, 0.6, 0.4], [1, 0, 1])
    ok = max(errs.values()) <= 1e-12 and hand == 0.5
    worst = max(errs, key=errs.get)
    verdict(8, ok, f"worst oracle gap {errs[worst]:.1e} ({worst}) over 500 instances each; AUC hand case {hand}")


# --- 9 ---------------------------------------------------------------------------------------

def test_criterion_09_hyperparameter_defaults(verdict):
    cfg, opt = TrainConfig(), OptimizerState()
    got = (cfg.loss.alpha, cfg.loss.beta, cfg.loss.gamma, cfg.loss.margin, cfg.model.k, cfg.lr_init,
           cfg.plateau_factor, cfg.plateau_patience, opt.beta1, opt.beta2, cfg.epochs, cfg.batch_size)
    want = (0.04, 0.16, 0.001, 10, 9, 1e-4, 0.9, 5, 0.9, 0.999, 100, 32)
    verdict(9, got == want, f"defaults {got}")


# --- 10 --------------------------------------------------------------------------------------

def test_criterion_10_optimizer_and_checkpoints(verdict, tmp_path):
    from test_train import small_cfg
    from ggnn_iml.data import make_samples

    p = {"w": Tensor(np.array([0.0]))}
    adamw_step(p, {"w": np.array([1.0])}, OptimizerState(lr=0.1, weight_decay=0.0))
    step_err = abs(p["w"].data[0] + 0.1 / (1 + 1e-8))

    train, val = make_samples(8, 32, 0.5, 11), make_samples(4, 32, 0.5, 12)
    full = train_loop(small_cfg(epochs=4), train, val)
    train_loop(small_cfg(epochs=2), train, val, last_ckpt_path=tmp_path / "e2.ckpt")
    state, cfg = TrainState.from_checkpoint(load_checkpoint(tmp_path / "e2.ckpt"))
    state.to_checkpoint(cfg).save(tmp_path / "again.ckpt")
    identical = (tmp_path / "e2.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    rest = train_loop(small_cfg(epochs=4), train, val, state=state)
    same_log = [(r.train_loss, r.val_loss) for r in rest.log] == [(r.train_loss, r.val_loss) for r in full.log[2:]]
    same_params = all(np.array_equal(a.data, b.data) for (_, a), (_, b) in
                      zip(full.state.model.named_parameters(), rest.state.model.named_parameters()))
    ok = step_err <= 1e-12 and identical and same_log and same_params
    verdict(10, ok, f"AdamW first-step err {step_err:.1e}; save/load/save identical: {identical}; "
                    f"resume from epoch 2 equals 4-epoch run: {same_log and same_params}")


# --- 11 --------------------------------------------------------------------------------------

def test_criterion_11_robustness_trend(verdict, toy_runs):
    data, runs = toy_runs
    model, _ = model_from_checkpoint(runs[(0, 0.001)].checkpoint)
    test = data["test"]
    results = {}
    for kind, params in (("gauss_noise", range(0, 24, 3)), ("gauss_blur", range(1, 24, 2))):
        scores = []
        for param in params:
            distorted = [type(s)(distort(s.image, kind, param, seed=i).astype(np.float32), s.mask, s.label)
                         for i, s in enumerate(test)]
            scores.append(evaluate_model(model, distorted).pixel_f1)
        results[kind] = (list(params), scores, spearmanr(list(params), scores).statistic)
    ok = all(rho <= 0 for _, _, rho in results.values())
    detail = "; ".join(f"{k} rho {rho:+.3f} (F1 {s[0]:.3f} -> {s[-1]:.3f})" for k, (_, s, rho) in results.items())
    verdict(11, ok, detail)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
