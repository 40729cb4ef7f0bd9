"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the classifier
criterion trains a model on 16 synthetic volumes (about two minutes).
"""

import json
import time

import numpy as np
import pytest

from overseg import classifier as clf
from overseg.cli import main
from overseg.features import classify_profile, feature_matrix, screen_candidates
from overseg.interpolate import MERGE, CorrectionDecision, apply_corrections
from overseg.metrics import MAP_THRESHOLDS, jaccard_scores, mean_ap, stack_metrics
from overseg.ot import PointDistribution, exact_emd, mask_to_distribution, sliced_wasserstein
from overseg.testkit import (SynthSpec, generate_voronoi_volume, inject_gaps, random_unit_vector,
                             split_ellipsoid_phantom, tangent_spheres_phantom)
from overseg.tilted import evaluate_tilted_pair, fit_plane_pca
from overseg.volume import Mask2D, build_cell_index, write_volume

from oracles import (brute_force_screen, dense_grid_sliced, exhaustive_jaccard, exhaustive_matching,
                     lp_emd, normal_equations_r2, random_blob)

# geometry of the held-out classifier benchmark
ACC_DIMS = (40, 96, 96)
ACC_CELLS = 40


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


# --- 1 -----------------------------------------------------------------------

def test_criterion_1_exact_emd(capsys):
    rng = np.random.default_rng(2024)
    exact_emd(PointDistribution.uniform(np.zeros((2, 2))), PointDistribution.uniform(np.ones((3, 2))))
    pairs = []
    for _ in range(50):
        n, m = rng.integers(1, 16, 2)
        pairs.append((PointDistribution(rng.uniform(0, 10, (n, 2)), rng.dirichlet(np.ones(n))),
                      PointDistribution(rng.uniform(0, 10, (m, 2)), rng.dirichlet(np.ones(m)))))
    shifts = []
    for _ in range(20):
        P = PointDistribution.uniform(rng.uniform(0, 10, (int(rng.integers(1, 16)), 2)))
        v = rng.uniform(-5, 5, 2)
        shifts.append((P, PointDistribution(P.points + v, P.weights), np.linalg.norm(v)))
    t0 = time.perf_counter()
    got = [exact_emd(P, Q)[0] for P, Q in pairs]
    got_shift = [exact_emd(P, Q)[0] for P, Q, _ in shifts]
    elapsed = time.perf_counter() - t0
    err = max(abs(g - lp_emd(P.points, P.weights, Q.points, Q.weights)) for g, (P, Q) in zip(got, pairs))
    err_shift = max(abs(g - d) for g, (_, _, d) in zip(got_shift, shifts))
    ok = err <= 1e-6 and err_shift <= 1e-6 and elapsed < 1.0
    report(capsys, 1, ok, f"max |emd - LP| {err:.2e}, max translation error {err_shift:.2e}, "
                          f"{elapsed:.3f} s for 70 solves")


# --- 2 -----------------------------------------------------------------------

def test_criterion_2_sliced(capsys):
    rng = np.random.default_rng(7)
    worst, monotone = 0.0, 0
    for _ in range(20):
        a = Mask2D(0, random_blob(rng, 400, box=30), 1)
        b = Mask2D(0, random_blob(rng, 400, box=30) + rng.integers(-8, 9, 2), 1)
        P, Q = mask_to_distribution(a), mask_to_distribution(b)
        oracle = dense_grid_sliced(P.points, P.weights, Q.points, Q.weights)
        est = sliced_wasserstein(P, Q, 1000, seed=0)
        worst = max(worst, abs(est - oracle) / oracle)
        var = [np.var([sliced_wasserstein(P, Q, n, seed=s) for s in range(10)]) for n in (10, 100, 1000)]
        monotone += var[0] > var[1] > var[2]
    ok = worst <= 0.05 and monotone == 20
    report(capsys, 2, ok, f"worst relative error {worst:.4f} (1000 projections), "
                          f"variance decreasing on {monotone}/20 pairs")


# --- 3 -----------------------------------------------------------------------

def test_criterion_3_screening(capsys):
    agree = 0
    for s in range(25):
        n_cells = 20 + (s * 7) % 41
        spec = SynthSpec(dims=(16, 48, 48), n_cells=n_cells, seed=300 + s, shrink=1.0 if s % 2 else 0.9)
        vol = generate_voronoi_volume(spec)
        vol, _ = inject_gaps(vol, 5, np.random.default_rng(s))
        idx = build_cell_index(vol)
        agree += {p.key for p in screen_candidates(idx)} == brute_force_screen(idx)
    report(capsys, 3, agree == 25, f"screening equals the brute-force oracle on {agree}/25 volumes")


# --- 4 -----------------------------------------------------------------------

def test_criterion_4_shape(capsys):
    rng = np.random.default_rng(4)
    ones = 0
    for _ in range(100):
        y = np.cumsum(rng.uniform(0.1, 50, int(rng.integers(3, 30))))
        ones += classify_profile(y if rng.random() < 0.5 else y[::-1]).shape_index == 1.0
    err = 0.0
    for _ in range(100):
        y = rng.uniform(0, 500, int(rng.integers(4, 30)))
        r = classify_profile(y)
        err = max(err, abs(r.r2_linear - normal_equations_r2(y, 1)),
                  abs(r.r2_quadratic - normal_equations_r2(y, 2)))
    ok = ones == 100 and err <= 1e-9
    report(capsys, 4, ok, f"{ones}/100 monotone arrays score 1, max R^2 error {err:.2e}")


# --- 5 -----------------------------------------------------------------------

def test_criterion_5_classifier_integrity(capsys, tmp_path):
    rng = np.random.default_rng(5)
    model = clf.init_model([14, 128, 64, 32, 1], rng)
    for b in model.biases:
        b[:] = rng.normal(0, 0.1, b.shape)
    X, y = rng.normal(size=(10, 14)), (rng.random(10) < 0.5).astype(float)
    _, gW, gb = clf.loss_and_grads(model, X, y)
    worst, eps = 0.0, 1e-5
    for P, G in zip(model.weights + model.biases, gW + gb):
        for i in np.ndindex(P.shape):
            old = P[i]
            P[i] = old + eps
            lp = clf.loss_and_grads(model, X, y)[0]
            P[i] = old - eps
            lm = clf.loss_and_grads(model, X, y)[0]
            P[i] = old
            num = (lp - lm) / (2 * eps)
            worst = max(worst, abs(num - G[i]) / max(abs(num), abs(G[i]), 1e-7))
    Xt = rng.normal(size=(150, 14))
    yt = (Xt[:, 0] > 0).astype(float)
    m1 = clf.train((Xt, yt), clf.Hyperparams(max_epochs=20), seed=3, variant=None)
    m2 = clf.train((Xt, yt), clf.Hyperparams(max_epochs=20), seed=3, variant=None)
    det = all(a.tobytes() == b.tobytes() for a, b in zip(m1.weights + m1.biases, m2.weights + m2.biases))
    clf.save_model(m1, tmp_path / "a.json")
    clf.save_model(clf.load_model(tmp_path / "a.json"), tmp_path / "b.json")
    rt = (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    ok = worst <= 1e-4 and det and rt
    report(capsys, 5, ok, f"worst gradient relative error {worst:.2e}, deterministic training {det}, "
                          f"byte-identical round trip {rt}")


# --- 6, 7, 8 -----------------------------------------------------------------

@pytest.fixture(scope="module")
def held_out():
    stacks = []
    for s in range(10):
        gt = generate_voronoi_volume(SynthSpec(dims=ACC_DIMS, n_cells=ACC_CELLS, seed=500 + s))
        inj, recs = inject_gaps(gt, 20, np.random.default_rng(900 + s))
        stacks.append((gt, inj, recs))
    return stacks


@pytest.fixture(scope="module")
def trained():
    t0 = time.perf_counter()
    vols = [generate_voronoi_volume(SynthSpec(dims=ACC_DIMS, n_cells=ACC_CELLS, seed=100 + s))
            for s in range(16)]
    examples = clf.synthesize_training_set(vols, clf.SynthesisConfig(n_true=20), seed=1)
    model = clf.train(examples, seed=0)
    return model, time.perf_counter() - t0


def test_criterion_6_synthesized_cases(capsys, trained, held_out):
    model, t_train = trained
    t0 = time.perf_counter()
    tp = fp = fn = 0
    n_gaps = 0
    for _, inj, recs in held_out:
        truth = {(r.cell, r.fresh_label) for r in recs}
        n_gaps += len(truth)
        idx = build_cell_index(inj)
        cands = screen_candidates(idx)
        merge = clf.predict_proba(model, feature_matrix(cands, idx)) >= model.threshold
        is_gap = np.array([c.key in truth for c in cands])
        tp += int((merge & is_gap).sum())
        fp += int((merge & ~is_gap).sum())
        fn += len(truth) - int((merge & is_gap).sum())  # screening misses count too
    elapsed = t_train + time.perf_counter() - t0
    f1 = 2 * tp / (2 * tp + fp + fn)
    ok = f1 >= 0.90 and elapsed < 300 and n_gaps == 200
    report(capsys, 6, ok, f"F1 {f1:.3f} (tp {tp}, fp {fp}, fn {fn}, {n_gaps} gaps), "
                          f"{elapsed:.0f} s including training")


def test_criterion_7_correction_round_trip(capsys, held_out):
    recovered, improved = [], 0
    for gt, inj, recs in held_out:
        decs = [CorrectionDecision(r.cell, r.fresh_label, MERGE, 1.0, (r.layer,)) for r in recs]
        out, _ = apply_corrections(inj, decs)
        recovered += [np.mean(out.data[r.layer][r.pixels[:, 0], r.pixels[:, 1]] == r.cell) for r in recs]
        before, after = stack_metrics(inj, gt), stack_metrics(out, gt)
        improved += (after["mAP"] > before["mAP"]
                     and after["jaccard_penalized"] > before["jaccard_penalized"])
    rec = np.array(recovered)
    n_low = int((rec < 0.99).sum())
    ok = n_low == 0 and improved == len(held_out)
    report(capsys, 7, ok, f"{len(rec) - n_low}/{len(rec)} masks recovered >= 99% "
                          f"(min {rec.min():.4f}, mean {rec.mean():.4f}); "
                          f"mAP and Jaccard improved on {improved}/{len(held_out)} stacks")


def test_criterion_8_tilted(capsys, trained):
    model, _ = trained
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(10):
        n = random_unit_vector(rng)
        raw = rng.uniform(-10, 10, (500, 3))
        pts = raw - np.outer(raw @ n, n) + rng.normal(0, 0.01, (500, 1)) * n
        worst = max(worst, np.degrees(np.arccos(min(1.0, abs(fit_plane_pca(pts).normal @ n)))))
    merged = sum(evaluate_tilted_pair(split_ellipsoid_phantom(s)[0], 1, 2, model).verdict == MERGE
                 for s in range(10))
    kept = sum(evaluate_tilted_pair(tangent_spheres_phantom(s)[0], 1, 2, model).verdict != MERGE
               for s in range(10))
    ok = worst < 1.0 and merged >= 9 and kept >= 9
    report(capsys, 8, ok, f"worst plane error {worst:.3f} deg; split ellipsoids merged {merged}/10, "
                          f"tangent spheres kept {kept}/10")


# --- 9 -----------------------------------------------------------------------

def test_criterion_9_metrics(capsys):
    rng = np.random.default_rng(9)
    agree = 0
    n_cases = 40
    for s in range(n_cases):
        gt = generate_voronoi_volume(SynthSpec(dims=(8, 24, 24), n_cells=int(rng.integers(2, 11)), seed=s))
        pred = gt.copy()
        sel = rng.random(gt.dims) < rng.uniform(0.05, 0.7)
        shifted = np.roll(gt.data, int(rng.integers(1, 4)), axis=int(rng.integers(3)))
        pred.data[sel] = shifted[sel]
        want = []
        for t in MAP_THRESHOLDS:
            k, _, pl, gl = exhaustive_matching(pred.data, gt.data, t)
            want.append(k / (len(pl) + len(gl) - k))
        jm, jp = exhaustive_jaccard(pred.data, gt.data)
        got = jaccard_scores(pred, gt)
        agree += (mean_ap(pred, gt) == np.mean(want)
                  and abs(got["jaccard_matched"] - jm) < 1e-12
                  and abs(got["jaccard_penalized"] - jp) < 1e-12)
    gt = generate_voronoi_volume(SynthSpec(dims=(8, 24, 24), n_cells=10, seed=99))
    ident = mean_ap(gt, gt) == 1.0 and jaccard_scores(gt, gt)["jaccard_penalized"] == 1.0
    ok = agree == n_cases and ident
    report(capsys, 9, ok, f"mAP and Jaccard equal the exhaustive oracle on {agree}/{n_cases} volumes; "
                          f"pred == gt gives 1: {ident}")


# --- 10 ----------------------------------------------------------------------

def _run_pipeline(root, data):
    out = str(root)
    gts = [str(data / f"gt{s}.lbl") for s in range(2)]
    injs = [str(data / f"inj{s}.lbl") for s in range(2)]
    codes = [
        main(["screen", "--input", *injs, "--out", f"{out}/screen", "--seed", "3"]),
        main(["train", "--input", *gts, "--out", f"{out}/train", "--seed", "3", "--n-true", "6"]),
        main(["correct", "--input", *injs, "--model", f"{out}/train/model.json",
              "--out", f"{out}/correct", "--seed", "3"]),
        main(["correct", "--input", injs[0], "--model", f"{out}/train/model.json",
              "--out", f"{out}/tilted", "--seed", "3", "--tilted"]),
        main(["evaluate", "--input", f"{out}/correct/inj0.corrected.lbl", f"{out}/correct/inj1.corrected.lbl",
              "--gt", *gts, "--out", f"{out}/eval", "--seed", "3",
              "--changes", f"{out}/correct/inj0.changes.json", f"{out}/correct/inj1.changes.json",
              "--gap-records", str(data / "gaps0.json"), str(data / "gaps1.json")]),
    ]
    files = {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
    return codes, files


def test_criterion_10_cli_determinism(capsys, tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    for s in range(2):
        gt = generate_voronoi_volume(SynthSpec(dims=(16, 48, 48), n_cells=20, seed=40 + s))
        inj, recs = inject_gaps(gt, 5, np.random.default_rng(s))
        write_volume(gt, data / f"gt{s}.lbl")
        write_volume(inj, data / f"inj{s}.lbl")
        (data / f"gaps{s}.json").write_text(json.dumps([r.to_json() for r in recs]))
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    codes_a, files_a = _run_pipeline(tmp_path / "a", data)
    codes_b, files_b = _run_pipeline(tmp_path / "b", data)
    same = files_a.keys() == files_b.keys() and all(files_a[k] == files_b[k] for k in files_a)
    ok = codes_a == codes_b == [0] * 5 and same and len(files_a) > 10
    report(capsys, 10, ok, f"exit codes {codes_a}; {len(files_a)} output files, byte-identical: {same}")
