"""Acceptance criteria 1-10.  Each criterion prints one PASS/FAIL line.

The desk-scale runs (criteria 6, 7 and 10) train on a 200-scan 32x512
procedural dataset.  Set ``DESNOW_MODEL_CACHE=<dir>`` to reuse trained
checkpoints between sessions; without it every model is trained fresh.
"""
import filecmp
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from acceptance_report import verdict
from desnow.cli import labeled_subset, main as cli_main
from desnow.engine import Tensor, numerical_grad, relative_error, sum_all
from desnow.filters import DrorConfig, RorConfig, dror, dror_radii, neighbor_counts, ror
from desnow.geom import CLEAN, NOISE, PointCloud, RangeImage, SensorConfig
from desnow.losses import SQRT2, blank, loss_self, loss_self_mhl, min_hypothesis_error, sample_blank_mask
from desnow.metrics import evaluate_many, pooled_auc
from desnow.model import DesnowModel, ModelConfig, load_checkpoint, save_checkpoint
from desnow.pipeline import filter_labels, score_scan, split_dataset
from desnow.postprocess import ShiftConfig, classify, counts_over_grid, percentile_shift, select_threshold
from desnow.synth import SynthConfig, extract_noise_labels, inject_noise, max_detectable_range, synthesize_dataset
from desnow.training import TrainConfig, reconstruction_error, train
from test_filters import walls

pytestmark = pytest.mark.acceptance

# desk-budget architecture and optimizer shared by every acceptance training run
DESK = dict(width=16, n_blocks=4, n_encoder_blocks=3, range_scale=10.0, lr=3e-3, steps=800, log_every=100)
N_SCANS = 200
DATA_SEED = 0
P20 = ShiftConfig(percentile=20)
PMIN = ShiftConfig(percentile=0)


# ---------------------------------------------------------------------------
# 1. gradient integrity

def test_c1_gradient_integrity():
    t0 = time.time()
    scans = synthesize_dataset(2, SensorConfig.with_cols(16, 64), seed=1)
    imgs = [s.noisy for s in scans]
    model = DesnowModel(ModelConfig(width=4, n_blocks=2, n_encoder_blocks=1, hypotheses=3, range_scale=10.0,
                                    input_shape=(16, 64), seed=3))
    gen = np.random.default_rng(5)
    # zero biases put the stem exactly on the leaky-relu kink wherever the input window is empty;
    # a small offset moves the check to a differentiable point
    for _, p in model.named_parameters():
        p.data += gen.normal(0.0, 0.01, p.data.shape)
    masks = np.stack([sample_blank_mask(im.valid, 0.5, gen) for im in imgs])
    blanked = [blank(im, m) for im, m in zip(imgs, masks)]
    x = model.encode_input(np.stack([im.rng for im in imgs]), np.stack([im.valid for im in imgs]))
    x_tilde = model.encode_input(np.stack([b.rng for b in blanked]), np.stack([b.valid for b in blanked]))
    target = np.stack([im.rng for im in imgs]) / model.cfg.range_scale

    def loss():
        return loss_self_mhl(model.reconstruct(x_tilde), target, model.difficulty_map(x), masks)

    model.zero_grad()
    loss().backward()
    worst, worst_name = 0.0, ""
    for name, p in model.named_parameters():
        num = numerical_grad(loss, p, eps=1e-6)
        err = relative_error(p.grad.ravel(), num)
        if err > worst:
            worst, worst_name = err, name
    elapsed = time.time() - t0
    ok = worst < 1e-5 and elapsed < 60
    verdict("1", "gradient integrity of the multi-hypothesis loss through both networks", ok,
            f"max rel err {worst:.2e} ({worst_name}), {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. loss arithmetic

def _one_pixel_loss(err, phi, k=1):
    thetas = np.full((1, k, 1, 1), 5.0)
    thetas[0, 0, 0, 0] = err  # first hypothesis carries the smallest error
    target = np.zeros((1, 1, 1))
    mask = np.ones((1, 1, 1), bool)
    phi_t = Tensor(np.full((1, 1, 1), phi))
    if k == 1:
        return loss_self(Tensor(thetas), target, phi_t, mask).item()
    return loss_self_mhl(Tensor(thetas), target, phi_t, mask).item()


def test_c2_loss_arithmetic():
    cases = [
        (_one_pixel_loss(1.0, 0.0), SQRT2),
        (_one_pixel_loss(1.0, math.log(2)), SQRT2 / 2 + math.log(2)),
        (_one_pixel_loss(1.0, 0.0, k=3), SQRT2),
        (_one_pixel_loss(1.0, math.log(2), k=3), SQRT2 / 2 + math.log(2)),
    ]
    worst = max(abs(a - b) for a, b in cases)
    ok = worst <= 1e-12
    verdict("2", "loss arithmetic (phi=0 -> sqrt2, phi=ln2 -> sqrt2/2+ln2)", ok,
            f"max abs diff {worst:.1e}; phi=ln2 value {cases[1][0]:.10f}")
    assert ok


# ---------------------------------------------------------------------------
# 3. winner-takes-all

def test_c3_winner_takes_all():
    gen = np.random.default_rng(7)
    mismatches = 0
    for trial in range(40):
        k = int(gen.integers(1, 5))
        # coarse grid values make ties frequent
        th = gen.integers(-4, 5, size=(2, k, 5, 7)).astype(float) / 2
        target = gen.integers(-4, 5, size=(2, 5, 7)).astype(float) / 2
        t = Tensor(th, requires_grad=True)
        c, arg = min_hypothesis_error(t, target)
        sum_all(c).backward()
        exp_c, exp_arg = oracles.min_hypothesis(th, target)
        routed = np.zeros_like(th)
        for b, i, j in np.ndindex(2, 5, 7):
            kk = exp_arg[b, i, j]
            routed[b, kk, i, j] = np.sign(th[b, kk, i, j] - target[b, i, j])
        if not (np.array_equal(c.data, exp_c) and np.array_equal(arg, exp_arg) and np.array_equal(t.grad, routed)):
            mismatches += 1
    ok = mismatches == 0
    verdict("3", "min-hypothesis selection and gradient routing vs brute force", ok, f"{mismatches}/40 trials mismatched")
    assert ok


# ---------------------------------------------------------------------------
# 4. synthesis oracle

def test_c4_synthesis_oracle():
    gen = np.random.default_rng(11)
    cfg = SynthConfig()
    bad5 = bad6 = 0
    worst7 = 0.0
    for _ in range(100):
        shape = (4, 16)
        rn = gen.uniform(0.5, 80, shape) * (gen.random(shape) > 0.3)
        rf = gen.uniform(0.5, 80, shape) * (gen.random(shape) > 0.3)
        ib = gen.random(shape)
        tau = float(gen.uniform(0, 3))
        lab = extract_noise_labels(RangeImage(rn), RangeImage(rf), tau)
        bad5 += not np.array_equal(lab, oracles.noise_labels(rn, rf, tau))
        out, gt = inject_noise(RangeImage(rf, intensity=ib), RangeImage(rn), lab, cfg)
        exp_r, exp_l = oracles.inject(rf, ib, rn, lab, cfg.gain, cfg.extinction, cfg.noise_floor)
        bad6 += not (np.array_equal(out.rng, exp_r) and np.array_equal(gt, exp_l))
        got7, _ = max_detectable_range(ib, np.where(rf > 0, rf, 100.0), cfg)
        for idx in np.ndindex(shape):
            ref = oracles.detectable_range(ib[idx], rf[idx] if rf[idx] > 0 else 100.0,
                                           cfg.gain, cfg.extinction, cfg.noise_floor)
            worst7 = max(worst7, abs(got7[idx] - ref))

    # monotonicity on 10^4 parameter draws
    n = 10_000
    i = gen.uniform(0, 2, n)
    g = gen.uniform(0, 1, n)
    beta = gen.uniform(1e-3, 0.2, n)
    floor = gen.uniform(1e-3, 0.5, n)
    rb = gen.uniform(1, 150, n)
    di, db, dn = gen.uniform(0, 1, n), gen.uniform(0, 0.1, n), gen.uniform(0, 0.2, n)

    def rmax(i_, b_, n_):
        return np.array([oracles_free_rmax(a, gg, bb, nn, r) for a, gg, bb, nn, r in zip(i_, g, b_, n_, rb)])

    base = rmax(i, beta, floor)
    mono = (
        np.all(rmax(i + di, beta, floor) >= base)
        and np.all(rmax(i, beta + db, floor) <= base)
        and np.all(rmax(i, beta, floor + dn) <= base)
        and np.all(base <= rb)
    )
    ok = bad5 == 0 and bad6 == 0 and worst7 <= 1e-12 and mono
    verdict("4", "synthesis oracle (labels, injection, detectable range)", ok,
            f"label mismatches {bad5}/100, injection mismatches {bad6}/100, range max err {worst7:.1e}, "
            f"monotone on {n} draws: {mono}")
    assert ok


def oracles_free_rmax(i, g, beta, n, rb):
    return max_detectable_range(i, rb, SynthConfig(gain=g, extinction=beta, noise_floor=n))[0]


# ---------------------------------------------------------------------------
# 5. filter fidelity

def test_c5_filter_fidelity():
    gen = np.random.default_rng(13)
    sensor = SensorConfig()
    bad = 0
    sizes = (1, 10, 500, 2000, 5000)
    for n in sizes:
        xyz = np.concatenate([gen.uniform(-30, 30, (n // 2, 3)), gen.normal(0, 1.0, (n - n // 2, 3))])
        ror_cfg = RorConfig(search_radius=0.5, min_neighbors=3)
        brute_fixed = oracles.neighbor_counts(xyz, ror_cfg.search_radius)
        radii = dror_radii(np.linalg.norm(xyz, axis=1), DrorConfig(), sensor)
        brute_dyn = oracles.neighbor_counts(xyz, radii)
        cloud = PointCloud(xyz)
        bad += not np.array_equal(neighbor_counts(xyz, ror_cfg.search_radius), brute_fixed)
        bad += not np.array_equal(ror(cloud, ror_cfg), brute_fixed < 3)
        bad += not np.array_equal(dror(cloud, DrorConfig(), sensor), brute_dyn < 3)

    cloud = walls(sensor, [10.0, 40.0])
    near = cloud.xyz[:, 0] < 20
    runs = [(ror(cloud, RorConfig(0.3, 3)), dror(cloud, DrorConfig(), sensor)) for _ in range(2)]
    ror_out, dror_out = runs[0]
    deterministic = all(np.array_equal(a, runs[0][0]) and np.array_equal(b, runs[0][1]) for a, b in runs)
    far_killed = bool(ror_out[~near].all())
    near_kept = float(1 - ror_out[near].mean())
    dror_kept = bool(not dror_out.any())
    ok = bad == 0 and far_killed and near_kept > 0.99 and dror_kept and deterministic
    verdict("5", "filter fidelity (ROR/DROR vs O(n^2); two-wall scenario)", ok,
            f"oracle mismatches {bad}; ROR removes 40 m wall: {far_killed}, keeps {near_kept:.1%} of 10 m wall; "
            f"DROR keeps both: {dror_kept}")
    assert ok


# ---------------------------------------------------------------------------
# shared desk-scale fixtures for criteria 6, 7 and 10

def _cache_dir():
    d = os.environ.get("DESNOW_MODEL_CACHE")
    if d:
        Path(d).mkdir(parents=True, exist_ok=True)
    return Path(d) if d else None


class Desk:
    def __init__(self):
        self.sensor = SensorConfig()
        scans = synthesize_dataset(N_SCANS, self.sensor, seed=DATA_SEED)
        parts = split_dataset(list(range(N_SCANS)), seed=DATA_SEED)
        self.train = [scans[i] for i in parts["train"]]
        self.val = [scans[i] for i in parts["val"]]
        self.test = [scans[i] for i in parts["test"]]
        self.models = {}
        self.seconds = {}
        self._dror = None

    def model(self, key, cfg: TrainConfig, labels=None):
        if key in self.models:
            return self.models[key]
        cache = _cache_dir()
        path = cache / f"{key}.ckpt" if cache else None
        if path is not None and path.exists():
            model, header = load_checkpoint(path)
            self.seconds[key] = header.get("extra", {}).get("seconds", float("nan"))
        else:
            t0 = time.time()
            model, _ = train([s.noisy for s in self.train], cfg, labels)
            self.seconds[key] = time.time() - t0
            if path is not None:
                save_checkpoint(path, model, step=cfg.steps, extra={"seconds": self.seconds[key]})
        self.models[key] = model
        return model

    def self_model(self, seed=0, k=3, ratio=0.5):
        key = f"self_k{k}_r{ratio}_s{seed}"
        return self.model(key, TrainConfig(hypotheses=k, blank_ratio=ratio, seed=seed, **DESK))

    def dror_metrics(self):
        if self._dror is None:
            preds = [filter_labels(s.noisy, self.sensor, "dror") for s in self.test]
            self._dror = evaluate_many(preds, [s.labels for s in self.test])
        return self._dror


@pytest.fixture(scope="module")
def desk():
    return Desk()


def shifted_scores(model, scans, shift):
    return [score_scan(model, s.noisy, shift) for s in scans]


def detector_metrics(model, desk, shift=P20, source="difficulty"):
    """Validation-selected threshold, then pooled test metrics and test AUC."""
    val_scores = [score_scan(model, s.noisy, shift, source) for s in desk.val]
    thr = select_threshold(val_scores, [s.labels for s in desk.val])
    test_scores = [score_scan(model, s.noisy, shift, source) for s in desk.test]
    m = evaluate_many([classify(x, thr) for x in test_scores], [s.labels for s in desk.test])
    auc = pooled_auc(test_scores, [s.labels for s in desk.test])
    return m, auc, thr


def depth_edges(clean: RangeImage, jump: float = 1.0) -> np.ndarray:
    """Pixels of the clean scan with a range jump above ``jump`` to a row neighbor (azimuth wraps)."""
    r, v = clean.rng, clean.valid
    edge = np.zeros(r.shape, bool)
    for shift in (1, -1):
        nr, nv = np.roll(r, shift, axis=1), np.roll(v, shift, axis=1)
        edge |= v & (~nv | (np.abs(r - nr) > jump))
    return edge


# ---------------------------------------------------------------------------
# 6. end-to-end desk-scale run

def test_c6a_shifted_auc(desk):
    model = desk.self_model()
    steps, seconds = DESK["steps"], desk.seconds["self_k3_r0.5_s0"]
    _, auc, _ = detector_metrics(model, desk, P20)
    raw_auc = pooled_auc(shifted_scores(model, desk.test, None), [s.labels for s in desk.test])
    budget = steps <= 2000 and (math.isnan(seconds) or seconds <= 1800)
    ok = auc > 0.90 and budget
    verdict("6a", "ROC-AUC of p20-shifted difficulty > 0.90", ok,
            f"AUC {auc:.4f} (unshifted {raw_auc:.4f}); {steps} steps in {seconds:.0f}s")
    assert budget, "training exceeded the desk budget"
    assert auc > 0.90


def test_c6b_iou_beats_dror(desk):
    model = desk.self_model()
    m, _, thr = detector_metrics(model, desk, P20)
    d = desk.dror_metrics()
    ok = m.iou > d.iou
    verdict("6b", "IoU at validation threshold > DROR IoU", ok,
            f"model IoU {m.iou:.4f} (P {m.precision:.3f}, R {m.recall:.3f}, thr {thr:.3f}) "
            f"vs DROR {d.iou:.4f} (P {d.precision:.3f}, R {d.recall:.3f})")
    assert ok


def test_c6c_hypotheses_reduce_boundary_error(desk):
    k3 = desk.self_model(k=3)
    k1 = desk.self_model(k=1)
    imgs = [s.noisy for s in desk.test]
    sel = [depth_edges(s.clean) & (s.labels == CLEAN) for s in desk.test]
    c3 = reconstruction_error(k3, imgs, seed=21, pixel_filter=sel)
    c1 = reconstruction_error(k1, imgs, seed=21, pixel_filter=sel)
    n_px = int(sum(m.sum() for m in sel))
    ok = c3 <= c1
    verdict("6c", "K=3 masked error C <= K=1 on depth-boundary pixels", ok,
            f"C(K=3) {c3:.3f} m vs C(K=1) {c1:.3f} m over ~{n_px // 2} blanked boundary pixels")
    assert ok


# ---------------------------------------------------------------------------
# 7. ablation orderings

def test_c7_ablation_orderings(desk):
    def ratio_pair(seed):
        a = detector_metrics(desk.self_model(seed=seed, ratio=0.5), desk, P20)[1]
        b = detector_metrics(desk.self_model(seed=seed, ratio=0.1), desk, P20)[1]
        return a, b

    def shift_pair(seed):
        model = desk.self_model(seed=seed)
        return detector_metrics(model, desk, P20)[0].iou, detector_metrics(model, desk, PMIN)[0].iou

    def ordering(pair_fn):
        first = pair_fn(0)
        if first[0] >= first[1]:
            return True, f"seed 0: {first[0]:.4f} vs {first[1]:.4f}"
        pairs = [first] + [pair_fn(s) for s in (1, 2)]
        med = np.median([p[0] for p in pairs]), np.median([p[1] for p in pairs])
        listing = ", ".join(f"{a:.4f}/{b:.4f}" for a, b in pairs)
        return bool(med[0] >= med[1]), f"seed 0 failed; 3-seed medians {med[0]:.4f} vs {med[1]:.4f} ({listing})"

    ratio_ok, ratio_detail = ordering(ratio_pair)
    shift_ok, shift_detail = ordering(shift_pair)
    verdict("7a", "blank ratio 0.5 >= 0.1 in test AUC", ratio_ok, ratio_detail)
    verdict("7b", "p20 shift >= min shift in test IoU", shift_ok, shift_detail)
    assert ratio_ok and shift_ok


# ---------------------------------------------------------------------------
# 8. post-processing properties

def test_c8_postprocessing_properties():
    gen = np.random.default_rng(17)
    shift_bad = 0
    for _ in range(10_000):
        n = int(gen.integers(1, 120))
        scores = gen.normal(size=n) * gen.uniform(0.1, 5)
        ranges = gen.uniform(0, gen.uniform(1, 12), n)
        out = percentile_shift(scores, ranges, P20)
        bins = np.floor(ranges).astype(int)
        for b in np.unique(bins):
            sel = bins == b
            if sel.sum() >= 5:
                vals = out[sel]
                if not ((vals < 0).mean() < 0.2 and oracles.nearest_rank(vals.tolist(), 20) == 0.0):
                    shift_bad += 1
    mono_bad = 0
    for _ in range(1_000):
        s = gen.normal(size=int(gen.integers(2, 400)))
        noise = gen.random(len(s)) < gen.uniform(0.01, 0.5)
        grid = np.sort(gen.normal(size=25) * 2)
        tp, fp, fn = counts_over_grid(s, noise, grid)
        mono_bad += not (np.all(np.diff(tp) <= 0) and np.all(np.diff(fp) <= 0))
    ok = shift_bad == 0 and mono_bad == 0
    verdict("8", "per-bin p20 property and threshold monotonicity", ok,
            f"shift violations {shift_bad} over 1e4 draws; monotonicity violations {mono_bad} over 1e3 fields")
    assert ok


# ---------------------------------------------------------------------------
# 9. determinism of the command-line pipeline

def _cli_run(root: Path) -> Path:
    d = root / "data"
    cli_main(["synth", "--scenes", "10", "--rows", "16", "--cols", "64", "--seed", "5", "--out", str(d)])
    cli_main(["train", "--data", str(d), "--out", str(root / "m.ckpt"), "--steps", "15", "--width", "6",
              "--blocks", "2", "--encoder-blocks", "1", "--range-scale", "10", "--seed", "5"])
    cli_main(["infer", "--model", str(root / "m.ckpt"), "--data", str(d), "--out", str(root / "pred")])
    cli_main(["eval", "--pred", str(root / "pred"), "--gt", str(d), "--by-noise-level",
              "--csv", str(root / "metrics.csv")])
    return root / "metrics.csv"


def test_c9_determinism(tmp_path):
    a = _cli_run(tmp_path / "a")
    b = _cli_run(tmp_path / "b")
    same = filecmp.cmp(a, b, shallow=False)
    verdict("9", "synth+train+infer+eval twice -> identical metric CSV", same,
            f"{a.stat().st_size} bytes, identical: {same}")
    assert same


# ---------------------------------------------------------------------------
# 10. semi-supervised schedules vs supervised-only baseline

def test_c10_semi_supervised(desk):
    ids = list(range(len(desk.train)))
    keep = set(labeled_subset(ids, 0.1, 0))
    labels = [s.labels if i in keep else None for i, s in enumerate(desk.train)]
    results = {}
    for mode, sched in (("sup", "smooth"), ("semi", "ramp"), ("semi", "pretrain"), ("semi", "smooth")):
        key = f"{mode}_{sched}" if mode == "semi" else "sup"
        model = desk.model(key, TrainConfig(mode=mode, schedule=sched, **DESK), labels)
        results[key] = detector_metrics(model, desk, None, source="classifier")[0].iou
    base = results["sup"]
    ok = all(results[k] >= base for k in ("semi_ramp", "semi_pretrain", "semi_smooth"))
    verdict("10", f"semi-supervised (10% labels = {len(keep)} scans) IoU >= supervised-only", ok,
            ", ".join(f"{k} {v:.4f}" for k, v in results.items()))
    assert ok
