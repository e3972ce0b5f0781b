"""Acceptance checks, one test per criterion.

Each test records a single ``PASS``/``FAIL`` line that is printed in the
terminal summary. Criteria 5 to 8 share one full synthetic ``run-cc2d`` run
(8 train / 8 test images, 6 landmarks, 2000 SSL steps); it takes roughly
half an hour on one CPU core.
"""
import json
import math

import numpy as np
import pytest
import torch

import oracles
from conftest import ACCEPTANCE_LINES
from cc2d.cli import main
from cc2d.config import load_config, synthetic_config
from cc2d.data import LabelSource, PseudoLabelRecord, Split, load_dataset, load_pseudo_labels
from cc2d.detector import build_target_arrays, decode_network, tpl_loss, HeatmapOffsetMaps
from cc2d.geometry import Frame, ImageGeometry, LandmarkSet
from cc2d.inference import build_template_bank, embed_query, load_ssl_model, localize_from_embeddings
from cc2d.metrics import SDR_RADII_MM, EvalReport, evaluate, network_errors, original_errors
from cc2d.models import CascadeExtractor, extract
from cc2d.pipeline import (TABLE3_LEVEL_SETS, WorkDir, detector_predictions, ground_truth, level_ablation,
                           records_to_predictions, stage_train_tpl)
from cc2d.ssl import build_matrix_of_interest, cosine_similarity_map, read_loss_log, ssl_loss

TEMPLATE = "001"
N_TRAIN, N_TEST, K, SEED = 8, 8, 6, 0


def record(n, name, ok, detail):
    ACCEPTANCE_LINES[n] = f"criterion {n} [{name}]: {'PASS' if ok else 'FAIL'} - {detail}"
    print(ACCEPTANCE_LINES[n])
    assert ok, ACCEPTANCE_LINES[n]


@pytest.fixture(scope="module")
def synthetic_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    data, work = root / "data", root / "work"
    assert main(["gen-synthetic", "--seed", str(SEED), "--n-images", str(N_TRAIN), "--n-test", str(N_TEST),
                 "--k", str(K), "--out", str(data)]) == 0
    code = main(["run-cc2d", "--data", str(data), "--template-id", TEMPLATE, "--config", "synthetic",
                 "--workdir", str(work)])
    return {"data": data, "work": WorkDir(work), "code": code, "cfg": synthetic_config()}


def test_criterion_1_shape_contract():
    cfg = load_config("full", ["model.encoder.pretrained=false"])
    net = CascadeExtractor(cfg.model).eval()
    sides = {}
    with torch.no_grad():
        for n in (384, 192):
            out = extract(net, torch.rand(1, n, n))
            sides[n] = tuple(out[lvl].shape[-1] for lvl in range(1, 6))
            assert all(out[lvl].shape[1] == 16 and out[lvl].shape[-2] == out[lvl].shape[-1] for lvl in out)
    ok = sides[384] == (192, 96, 48, 24, 12) and sides[192] == (96, 48, 24, 12, 6)
    record(1, "shape contract", ok, f"384 -> {sides[384]}, 192 -> {sides[192]}")


def test_criterion_2_numeric_oracles():
    rng = np.random.default_rng(2024)
    worst = {}
    n_cases = 50

    err = 0.0
    for _ in range(n_cases):
        c, h, w = rng.integers(1, 9, size=3)
        a, f = rng.normal(size=c), rng.normal(size=(c, h, w))
        got = cosine_similarity_map(torch.from_numpy(a), torch.from_numpy(f)).numpy()
        err = max(err, float(np.abs(got - oracles.cosine_map(a, f)).max()))
    worst["cosine"] = (err, 1e-6)

    err = 0.0
    for _ in range(n_cases):
        h, w = rng.integers(1, 10, size=2)
        v = rng.uniform(-1, 1, size=(h, w))
        t = (int(rng.integers(0, w)), int(rng.integers(0, h)))
        tau = float(rng.uniform(0.5, 20))
        got = ssl_loss([build_matrix_of_interest(torch.from_numpy(v), 5, t)], tau).item()
        err = max(err, abs(got - oracles.softmax_ce(v.tolist(), (t[1], t[0]), tau)))
    worst["ssl_loss"] = (err, 1e-6)

    err = 0.0
    for i in range(n_cases):
        gt = build_target_arrays(rng.uniform(0, 7, size=(1 + i % 3, 2)), 3.0, 8)
        ph = rng.uniform(0.01, 0.99, size=gt.heat.shape)
        pox, poy = rng.normal(size=gt.heat.shape), rng.normal(size=gt.heat.shape)
        pred = HeatmapOffsetMaps(torch.from_numpy(ph), torch.from_numpy(pox), torch.from_numpy(poy))
        got = tpl_loss(pred, gt, eps=1e-12).item()
        err = max(err, abs(got - oracles.tpl_loss(ph, pox, poy, gt.heat, gt.off_x, gt.off_y)))
    worst["tpl_loss"] = (err, 1e-6)

    err = 0.0
    for _ in range(1000):
        h, w = rng.integers(1, 40, size=2)
        alpha = int(rng.integers(0, 12)) * 2 + 1
        t = (int(rng.integers(0, w)), int(rng.integers(0, h)))
        s = rng.uniform(-1, 1, size=(h, w))
        got = build_matrix_of_interest(torch.from_numpy(s), 2, t, alpha).values.numpy()
        err = max(err, float(np.abs(got - oracles.pad_slice(s, t, alpha)).max()))
    worst["crop vs pad-slice"] = (err, 0.0)

    err = 0.0
    for _ in range(n_cases):
        n, k = rng.integers(1, 6), rng.integers(1, 8)
        spacing = float(rng.uniform(0.05, 0.5))
        geom = ImageGeometry(300, 200, spacing, 96)
        g = {f"{i}": rng.uniform(0, [299, 199], size=(k, 2)) for i in range(n)}
        p = {i: np.clip(v + rng.normal(0, 8, size=v.shape), 0, [299, 199]) for i, v in g.items()}
        rep = evaluate({i: LandmarkSet.from_array(v, geom, Frame.ORIGINAL) for i, v in p.items()},
                       {i: LandmarkSet.from_array(v, geom, Frame.ORIGINAL) for i, v in g.items()}, geom)
        mre, sdr = oracles.mre_sdr(p, g, spacing, SDR_RADII_MM)
        err = max(err, abs(rep.mre_mm - mre), *(abs(rep.sdr[r] - sdr[r]) for r in SDR_RADII_MM))
    worst["evaluate"] = (err, 1e-9)

    ok = all(e <= tol for e, tol in worst.values())
    record(2, "numeric oracles", ok, ", ".join(f"{k} max err {e:.1e} (tol {t:g})" for k, (e, t) in worst.items()))


def test_criterion_3_gradient_checks():
    rng = np.random.default_rng(7)
    errs = {}

    mats = [rng.uniform(-1, 1, size=(5, 5)) for _ in range(3)]
    targets = [(1, 3), (2, 2), (4, 0)]

    def f_ssl(arrs):
        return ssl_loss([build_matrix_of_interest(torch.as_tensor(a), lv, t, 3)
                         for a, lv, t in zip(arrs, (5, 2, 3), targets)], 10.0)

    ts = [torch.tensor(a, requires_grad=True) for a in mats]
    f_ssl(ts).backward()
    num = oracles.central_difference(lambda a: f_ssl(a).item(), mats, 1e-4)
    errs["ssl_loss"] = (max(oracles.relative_error(t.grad.numpy(), g) for t, g in zip(ts, num)), 1e-3)

    gt = build_target_arrays([[3.0, 4.0]], 3.0, 8)
    arrays = [rng.normal(size=(1, 8, 8)) for _ in range(3)]

    def f_tpl(arrs):
        lg, ox, oy = (torch.as_tensor(a) for a in arrs)
        return tpl_loss(HeatmapOffsetMaps(torch.sigmoid(lg), ox, oy, heat_logits=lg), gt)

    ts = [torch.tensor(a, requires_grad=True) for a in arrays]
    f_tpl(ts).backward()
    num = oracles.central_difference(lambda a: f_tpl(a).item(), arrays, 1e-6)
    errs["tpl_loss"] = (max(oracles.relative_error(t.grad.numpy(), g) for t, g in zip(ts, num)), 1e-3)

    cfg = load_config("synthetic", ["model.embed_dim=4", "model.encoder.channels=[4,4,8,8,8]",
                                    "model.encoder.convs=[1,1,1,1,1]", "model.encoder.batch_norm=false",
                                    "model.aspp_channels=4", "model.aspp_dilations=[1,2]"])
    torch.manual_seed(0)
    net = CascadeExtractor(cfg.model).double().eval()
    x = torch.rand(1, 32, 32, dtype=torch.float64)

    def f_net():
        emb = net(x)
        return cosine_similarity_map(emb[3][0, :, 1, 2], emb[2][0]).sum()

    params = [p for p in net.parameters() if p.requires_grad]
    f_net().backward()
    ana, num = [], []
    for p in params:
        if p.grad is None or not p.grad.abs().sum():
            continue
        flat = p.data.view(-1)
        for j in rng.choice(flat.numel(), size=min(2, flat.numel()), replace=False):
            old = flat[j].item()
            flat[j] = old + 1e-6
            with torch.no_grad():
                up = f_net().item()
            flat[j] = old - 1e-6
            with torch.no_grad():
                down = f_net().item()
            flat[j] = old
            num.append((up - down) / 2e-6)
            ana.append(p.grad.view(-1)[j].item())
    errs["encoder end-to-end"] = (oracles.relative_error(np.array(ana), np.array(num)), 1e-2)

    ok = all(e < tol for e, tol in errs.values())
    record(3, "gradient checks", ok, ", ".join(f"{k} rel err {e:.1e} (< {t:g})" for k, (e, t) in errs.items()))


def test_criterion_4_decode_round_trip():
    rng = np.random.default_rng(4)
    sigma, size = 3.0, 96
    disc = int(build_target_arrays([[10, 10]], sigma, 32).heat.sum())
    exact = 0
    for _ in range(100):
        xy = rng.integers(4, size - 4, size=(int(rng.integers(1, 20)), 2))
        t = build_target_arrays(xy, sigma, size)
        out, tallies = decode_network(t.heat, t.off_x, t.off_y, sigma)
        exact += bool(np.array_equal(out, xy) and np.all(tallies == 29))
    record(4, "decode round-trip", exact == 100 and disc == 29,
           f"{exact}/100 sets decoded exactly, disc count {disc}")


@pytest.mark.slow
def test_criterion_5_ssl_learning_signal(synthetic_run):
    assert synthetic_run["code"] == 0
    wd, cfg = synthetic_run["work"], synthetic_run["cfg"]
    losses = np.array([float(r["total"]) for r in read_loss_log(wd.ssl_log)])
    tail = losses[-max(1, len(losses) // 10):].mean()
    ratio = tail / losses[:10].mean()

    train = load_dataset(synthetic_run["data"], Split.TRAIN, cfg.network_size)
    model = load_ssl_model(wd.ssl_ckpt, cfg)
    entry = train.entry(TEMPLATE)
    img = train.load_network_image(entry)
    lms = train.load_landmarks(entry)
    bank = build_template_bank(model, img, lms, cfg.ssl.patch_size)
    xy, _, _ = localize_from_embeddings(embed_query(model, img), bank, size=cfg.network_size)
    dist = np.hypot(*(xy - lms.to_network().as_array()).T)
    ok = len(losses) >= 2000 and ratio < 0.5 and np.all(dist <= 4.0)
    record(5, "SSL learning signal", ok,
           f"{len(losses)} steps, final-10% / first-10 loss = {ratio:.3f} (< 0.5), "
           f"template self-localization max {dist.max():.2f} px (<= 4)")


@pytest.mark.slow
def test_criterion_6_end_to_end(synthetic_run):
    assert synthetic_run["code"] == 0
    wd, cfg, data = synthetic_run["work"], synthetic_run["cfg"], synthetic_run["data"]
    train = load_dataset(data, Split.TRAIN, cfg.network_size)
    test = load_dataset(data, Split.TEST, cfg.network_size)
    jitter = 8.0
    preds = records_to_predictions(load_pseudo_labels(wd.pseudo_train, K))
    gts = {i: g for i, g in ground_truth(train).items() if i != TEMPLATE}
    pseudo_px = original_errors({i: preds[i] for i in gts}, gts).mean()
    pseudo_mm = evaluate({i: preds[i] for i in gts}, gts, train.geometry).mre_mm
    tpl_preds, _ = detector_predictions(wd.tpl_ckpt, test, cfg)
    tpl_mm = evaluate(tpl_preds, ground_truth(test), test.geometry).mre_mm
    stored = json.loads(wd.report("tpl_test").read_text())["mre_mm"]
    ok = pseudo_px <= jitter and tpl_mm <= 1.5 * pseudo_mm and abs(stored - tpl_mm) < 1e-9
    record(6, "end-to-end pipeline", ok,
           f"pseudo-label mean error {pseudo_px:.2f} px (<= jitter {jitter:g}), "
           f"TPL test MRE {tpl_mm:.3f} mm vs 1.5 x pseudo {1.5 * pseudo_mm:.3f} mm")


@pytest.mark.slow
def test_criterion_7_tpl_on_clean_labels(synthetic_run, tmp_path):
    cfg = synthetic_run["cfg"]
    train = load_dataset(synthetic_run["data"], Split.TRAIN, cfg.network_size)
    gts = ground_truth(train)
    records = [PseudoLabelRecord(i, gts[i], (1.0,) * K, LabelSource.GROUND_TRUTH) for i in train.ids]
    stage_train_tpl(train, records, cfg, tmp_path / "tpl_gt.pt", tmp_path / "tpl_gt.csv")
    preds, _ = detector_predictions(tmp_path / "tpl_gt.pt", train, cfg)
    mre_px = network_errors(preds, gts).mean()
    record(7, "TPL on clean labels", mre_px < 2.0, f"decoded train MRE {mre_px:.3f} network px (< 2)")


@pytest.mark.slow
def test_criterion_8_level_ablation(synthetic_run):
    cfg = synthetic_run["cfg"]
    train = load_dataset(synthetic_run["data"], Split.TRAIN, cfg.network_size)
    test = load_dataset(synthetic_run["data"], Split.TEST, cfg.network_size)
    reports = level_ablation(synthetic_run["work"].ssl_ckpt, train, TEMPLATE, test, cfg)
    ok = (list(reports) == [tuple(s) for s in TABLE3_LEVEL_SETS] and len(reports) == 6
          and all(isinstance(r, EvalReport) and r.n_images == N_TEST and math.isfinite(r.mre_mm)
                  for r in reports.values()))
    summary = "; ".join(f"{','.join(map(str, k))}: {r.mre_mm:.2f} mm" for k, r in reports.items())
    record(8, "ablation plumbing", ok, f"{len(reports)} level sets evaluated ({summary})")


def test_criterion_9_protocol_fidelity():
    geom = ImageGeometry(1935, 2400, 0.1, 384)
    gts = {i: LandmarkSet.from_array([[100, 100]], geom, Frame.ORIGINAL) for i in "abc"}
    preds = {i: LandmarkSet.from_array([[100 + dx, 100]], geom, Frame.ORIGINAL)
             for i, dx in zip("abc", (15, 32, 50))}
    rep = evaluate(preds, gts, geom)
    want = {2.0: 100 / 3, 2.5: 100 / 3, 3.0: 100 / 3, 4.0: 200 / 3}
    ok = abs(rep.mre_mm - 9.7 / 3) < 1e-9 and all(abs(rep.sdr[r] - v) < 1e-9 for r, v in want.items())
    record(9, "protocol fidelity", ok,
           f"MRE {rep.mre_mm:.4f} mm, SDR@2 {rep.sdr[2.0]:.2f}%, SDR@4 {rep.sdr[4.0]:.2f}%")
