"""Acceptance criteria 1-8.

Each test records one PASS/FAIL line (printed in the terminal summary) and
then asserts. The benchmark datasets of criteria 5 and 6 are generated once
per session from the published seed in ``palmpipe.synth``.
"""

import json
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

import conftest
from oracles import brute_eer, random_tps_field

from palmpipe import synth
from palmpipe.cli import main
from palmpipe.errors import ParseError, SchemaViolation
from palmpipe.evaluation import compute_roc, eer, generate_pairs, roc_from_scores, summarize, tar_at_far
from palmpipe.features import Embedding, embed_roi, read_embedding, write_embedding
from palmpipe.fusion import contingency, sum_fuse
from palmpipe.gallery import Gallery, GalleryEntry, load_gallery, save_gallery
from palmpipe.geometry import TEMPLATE_POINTS, KeypointSet, estimate_homography, extract_roi, load_keypoints, reprojection_errors
from palmpipe.imaging import Image, enhance_baseline, sample
from palmpipe.manifest import read_manifest
from palmpipe.pipeline import PipelineConfig, prepare_manifest, score_pairs_views
from palmpipe.tps import Correspondences, apply_tps, bending_energy, find_correspondences, fit_tps
from palmpipe._homog import apply_h

FIXTURES = Path(__file__).parent / "fixtures"


def record(n: int, ok: bool, detail: str) -> None:
    conftest.ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, detail


def well_conditioned_h(rng):
    c = np.array([[1, 0, -160], [0, 1, -160], [0, 0, 1.0]])
    A = np.eye(3)
    A[:2, :2] += rng.uniform(-0.2, 0.2, (2, 2))
    A[2, :2] = rng.uniform(-0.2, 0.2, 2) / 320
    A[:2, 2] = rng.uniform(-30, 30, 2)
    H = np.linalg.inv(c) @ A @ c
    return H / H[2, 2]


# ------------------------------------------------------------------ 1

def test_criterion_1_homography_recovery():
    rng = np.random.default_rng(2024)
    clean_max, noisy = 0.0, []
    t0 = time.perf_counter()
    for _ in range(100):
        H0 = well_conditioned_h(rng)
        k = apply_h(np.linalg.inv(H0), TEMPLATE_POINTS)
        H = estimate_homography(KeypointSet(k)).matrix
        clean_max = max(clean_max, reprojection_errors(H, k, TEMPLATE_POINTS).max())
        kn = k + rng.normal(0, 0.5, k.shape)
        Hn = estimate_homography(KeypointSet(kn)).matrix
        noisy.append(reprojection_errors(Hn, kn, TEMPLATE_POINTS).mean())
    dt = time.perf_counter() - t0
    ok = clean_max < 1e-6 and np.mean(noisy) < 1.5 and dt < 1.0
    record(1, ok, f"noise-free max {clean_max:.2e} px, sigma 0.5 mean {np.mean(noisy):.3f} px, {dt:.2f} s")


# ------------------------------------------------------------------ 2

def test_criterion_2_tps_exactness():
    rng = np.random.default_rng(7)
    interp, affine_e, monotone = 0.0, 0.0, True
    for _ in range(20):
        src = rng.uniform(0, 224, (int(rng.integers(6, 40)), 2))
        tgt = src + rng.normal(0, 4, src.shape)
        w = fit_tps(Correspondences.exact(src, tgt), 0.0)
        interp = max(interp, np.abs(w(src) - tgt).max())
        A = np.eye(2) + rng.uniform(-0.1, 0.1, (2, 2))
        wa = fit_tps(Correspondences.exact(src, src @ A.T + rng.uniform(-5, 5, 2)), 0.0)
        affine_e = max(affine_e, bending_energy(wa))
        corr = Correspondences.exact(src, tgt)
        e = [bending_energy(fit_tps(corr, lam)) for lam in (0.0, 0.01, 0.1, 1.0, 10.0, 100.0)]
        monotone &= all(b <= a * (1 + 1e-9) + 1e-12 for a, b in zip(e, e[1:]))
    ok = interp < 1e-8 and affine_e < 1e-10 and monotone
    record(2, ok, f"interpolation {interp:.1e} px, affine energy {affine_e:.1e}, energy non-increasing in lambda: {monotone}")


# ------------------------------------------------------------------ 3

@pytest.fixture(scope="module")
def roi_pairs():
    """50 (reference, probe, ground-truth probe->reference map) tuples; max displacement 4-8 px."""
    out = []
    for seed in range(50):
        rng = np.random.default_rng(5000 + seed)
        cap = synth.sample_capture(rng, synth.CaptureRanges(tps_jitter_px=0.0, noise_sigma=(0.0, 0.02), shading=0.0))
        r = synth.render_palm(synth.PalmIdentity.from_seed(5000 + seed), cap)
        ref = enhance_baseline(extract_roi(r.image, r.keypoints))
        d = random_tps_field(rng, 224, rng.uniform(4.0, 8.0))
        ys, xs = np.mgrid[0:224, 0:224].astype(np.float64)
        gx, gy = xs + d[0], ys + d[1]  # probe pixel q shows reference point g(q)
        probe = Image.from_array(sample(ref.pixels, gx, gy, 0.0))
        out.append((ref, probe, gx, gy))
    return out


def test_criterion_3_realignment_recovery(roi_pairs):
    ys, xs = np.mgrid[0:224, 0:224].astype(np.float64)
    inner = (slice(20, 204), slice(20, 204))  # region covered by the correspondence grid
    before, after, photo = [], [], []
    t0 = time.perf_counter()
    for ref, probe, gx, gy in roi_pairs:
        warp = fit_tps(find_correspondences(probe, ref))
        realigned = apply_tps(probe, warp)
        pts = np.column_stack([xs[inner].ravel(), ys[inner].ravel()])
        mapped = warp(pts)
        truth = np.column_stack([gx[inner].ravel(), gy[inner].ravel()])
        before.append(np.hypot(*(truth - pts).T).mean())
        after.append(np.hypot(*(truth - mapped).T).mean())
        photo.append((np.abs(probe.pixels - ref.pixels)[inner].mean(), np.abs(realigned.pixels - ref.pixels)[inner].mean()))
    dt = time.perf_counter() - t0
    reduction = 1.0 - np.mean(after) / np.mean(before)
    closer = np.mean([b < a for a, b in photo])
    ok = reduction >= 0.8 and dt < 30.0
    record(3, ok, f"mean displacement error {np.mean(before):.2f} -> {np.mean(after):.2f} px ({100 * reduction:.1f}% reduction, worst pair {100 * min(1 - a / b for a, b in zip(after, before)):.1f}%), re-aligned image closer to reference in {100 * closer:.0f}% of pairs, stage {dt:.1f} s")


# ------------------------------------------------------------------ 4

def _counting_oracle(genuine, impostor, thresholds, chunk=1000):
    tar, far = [], []
    for k in range(0, len(thresholds), chunk):
        t = thresholds[k : k + chunk, None]
        tar.append((genuine[None, :] >= t).sum(1) / genuine.size)
        far.append((impostor[None, :] >= t).sum(1) / impostor.size)
    return np.concatenate(tar), np.concatenate(far)


def test_criterion_4_roc_oracle_equivalence():
    rng = np.random.default_rng(44)
    g = np.round(rng.normal(0.7, 0.1, 5000), 4)
    i = np.round(rng.normal(0.45, 0.1, 5000), 4)
    roc = roc_from_scores(g, i)
    tar, far = _counting_oracle(g, i, roc.thresholds)
    roc_exact = np.array_equal(tar, roc.tar) and np.array_equal(far, roc.far)

    op_exact = True
    for target in (0.001, 0.01, 0.1):
        # impostor-calibrated operating point: lowest impostor score (or the first score above all impostors) meeting the target
        cand = np.unique(np.append(i, g[g > i.max()].min() if np.any(g > i.max()) else []))
        ct, cf = _counting_oracle(g, i, cand)
        k = np.flatnonzero(cf <= target)[0]
        op_exact &= tar_at_far(roc, target) == (ct[k], cand[k])

    gs, isc = rng.normal(0.7, 0.1, 10_000), rng.normal(0.3, 0.1, 10_000)
    e_gap = abs(eer(roc_from_scores(gs, isc)) - brute_eer(gs, isc))
    e_gap2 = abs(eer(roc) - brute_eer(g, i))
    ok = roc_exact and op_exact and e_gap < 0.005 and e_gap2 < 0.005
    record(4, ok, f"TAR/FAR identical at all {roc.thresholds.size} thresholds: {roc_exact}; TAR@FAR operating points exact: {op_exact}; EER gap {max(e_gap, e_gap2):.4f}")


# ------------------------------------------------------------- 5 and 6

@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    root = tmp_path_factory.mktemp("benchmark")
    cache = {}

    def get(variant):
        if variant not in cache:
            t0 = time.perf_counter()
            m = synth.generate_dataset(
                synth.BENCHMARK_SUBJECTS, synth.BENCHMARK_CAPTURES, synth.BENCHMARK_SEED, root / variant, synth.benchmark_config(variant)
            )
            man = read_manifest(m)
            cache[variant] = (man, generate_pairs(man.rows), time.perf_counter() - t0)
        return cache[variant]

    return get


def evaluate(benchmark, variant, **cfg):
    man, pairs, gen_time = benchmark(variant)
    c = PipelineConfig(**cfg)
    t0 = time.perf_counter()
    prep = prepare_manifest(man, c)
    views = score_pairs_views(pairs, prep, c)
    return {k: summarize(v) for k, v in views.items()}, gen_time + time.perf_counter() - t0, len(prep.failures)


@pytest.fixture(scope="session")
def base_full(benchmark):
    return evaluate(benchmark, "base")


@pytest.mark.slow
def test_criterion_5_end_to_end_separation(base_full):
    views, dt, failed = base_full
    s = views["fused"]
    ok = s["eer"] <= 0.05 and s["tar_at_far_1%"] >= 0.90 and dt < 600 and failed == 0
    record(5, ok, f"{synth.BENCHMARK_SUBJECTS}x{synth.BENCHMARK_CAPTURES} seed {synth.BENCHMARK_SEED}: EER {100 * s['eer']:.2f}%, TAR@FAR=1% {100 * s['tar_at_far_1%']:.2f}%, TAR@FAR=0.1% {100 * s['tar_at_far_0.1%']:.2f}%, {dt:.0f} s")


@pytest.mark.slow
def test_criterion_6_ablation_direction(benchmark, base_full):
    tar = lambda v: v["fused"]["tar_at_far_1%"]  # noqa: E731
    full_d, _, _ = evaluate(benchmark, "distorted")
    notps_d, _, _ = evaluate(benchmark, "distorted", tps=False)
    full_b, _, _ = evaluate(benchmark, "blurred")
    noenh_b, _, _ = evaluate(benchmark, "blurred", enhance=False)
    ens = [(v["fused"]["tar_at_far_1%"], v["whole"]["tar_at_far_1%"]) for v in (base_full[0], full_d, full_b)]
    tps_ok = tar(full_d) > tar(notps_d)
    enh_ok = tar(full_b) > tar(noenh_b)
    ens_ok = all(f >= w for f, w in ens)
    detail = (
        f"TPS (jitter 6): {100 * tar(full_d):.2f}% vs no-tps {100 * tar(notps_d):.2f}% [{'ok' if tps_ok else 'FAIL'}]; "
        f"enhancement (blur 1.5): {100 * tar(full_b):.2f}% vs no-enhance {100 * tar(noenh_b):.2f}% [{'ok' if enh_ok else 'FAIL'}]; "
        f"ensemble vs whole (base/distorted/blurred): {', '.join(f'{100 * f:.2f}/{100 * w:.2f}' for f, w in ens)} [{'ok' if ens_ok else 'FAIL'}]"
    )
    record(6, tps_ok and enh_ok and ens_ok, detail)


# ------------------------------------------------------------------ 7

def test_criterion_7_fusion_arithmetic():
    rng = np.random.default_rng(77)
    p, e = rng.random(10_000), rng.random(10_000) * 100
    fused = np.array([sum_fuse(a, b) for a, b in zip(p, e)])
    bounded = fused.min() >= 0 and fused.max() <= 200
    attained = sum_fuse(1.0, 100) == 200 and sum_fuse(0.0, 0.0) == 0
    sums = all(contingency(a, b).total == n for n in (0, 1, 17, 1000) for a, b in [(rng.random(n) < 0.5, rng.random(n) < 0.3)])
    ref = json.loads((FIXTURES / "contingency_reference.json").read_text())
    cells = [ref[k] for k in ("both_match", "a_only", "b_only", "neither")]
    a = np.repeat([True, True, False, False], cells)
    b = np.repeat([True, False, True, False], cells)
    t = contingency(a, b)
    table = (t.both_match, t.a_only, t.b_only, t.neither) == (162_696, 10_805, 21_810, 31_316) and t.total == 226_627
    record(7, bounded and attained and sums and table, f"fused range [{fused.min():.2f}, {fused.max():.2f}], (1.0, 100) -> {sum_fuse(1.0, 100)}, cells sum to count: {sums}, fixture total {t.total}")


# ------------------------------------------------------------------ 8

def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _all_commands(out: Path) -> list[int]:
    d = out / "data"
    codes = [main(["synth", "--subjects", "3", "--captures", "2", "--seed", "5", "--out", str(d)])]
    m = str(d / "manifest.csv")
    codes.append(main(["pipeline", "--manifest", m, "--out", str(out / "emb")]))
    codes.append(main(["eval", "--manifest", m, "--out", str(out / "eval")]))
    codes.append(main(["fuse", "--primary", str(out / "eval" / "scores.csv"), "--external", str(out / "eval" / "scores.csv"), "--out", str(out / "fuse")]))
    # the external range is [0, 100], so fusing a [0, 1] set with itself is valid
    codes.append(main(["enroll", "--gallery", str(out / "g.plmg"), "--manifest", m]))
    codes.append(main(["verify", "--gallery", str(out / "g.plmg"), "--embeddings", str(out / "emb"), "--capture", "s0000_c01", "--subject", "s0000"]))
    codes.append(main(["identify", "--gallery", str(out / "g.plmg"), "--embeddings", str(out / "emb"), "--capture", "s0001_c01"]))
    return codes


def test_criterion_8_determinism_and_formats(tmp_path, capsys):
    runs = []
    for _ in range(2):
        shutil.rmtree(tmp_path / "run", ignore_errors=True)
        codes = _all_commands(tmp_path / "run")
        runs.append((codes, _tree(tmp_path / "run"), capsys.readouterr().out))
    stable = runs[0][0] == runs[1][0] == [0] * 7 and runs[0][1] == runs[1][1] and runs[0][2] == runs[1][2]

    rng = np.random.default_rng(8)
    embs = embed_roi(Image(rng.random((224, 224))))
    emb_ok = True
    for e in embs:
        write_embedding(e, tmp_path / "x.emb")
        back = read_embedding(tmp_path / "x.emb")
        emb_ok &= back == e and back.to_bytes() == (tmp_path / "x.emb").read_bytes()
    g = Gallery(embs[0].extractor_id, [GalleryEntry(f"s{k}", f"c{k}", "right", tuple(embs), 6 + k, k) for k in range(3)])
    save_gallery(g, tmp_path / "gal")
    gal_ok = load_gallery(tmp_path / "gal").to_bytes() == (tmp_path / "gal.plmg").read_bytes() == g.to_bytes()

    good = json.loads((tmp_path / "run" / "data" / "keypoints" / "s0000_c00.json").read_text())
    rejects = 0
    bad_files = {
        "eight": {**good, "points": good["points"][:8]},
        "side": {**good, "hand_side": "up"},
        "nan": json.dumps(good).replace(str(good["points"][0][0]), "NaN", 1),
        "junk": "{",
    }
    for name, content in bad_files.items():
        p = tmp_path / f"{name}.json"
        p.write_text(content if isinstance(content, str) else json.dumps(content))
        try:
            load_keypoints(p)
        except (ParseError, SchemaViolation):
            rejects += 1
    ok = stable and emb_ok and gal_ok and rejects == len(bad_files)
    record(8, ok, f"7 commands byte-stable on rerun: {stable}; embedding round trip: {emb_ok}; gallery round trip: {gal_ok}; malformed keypoint files rejected {rejects}/{len(bad_files)}")
