import csv
import json
import shutil

import numpy as np
import pytest

from ssod import detector as dt
from ssod import harness as hs
from ssod import netcore as nc
from ssod import pla
from ssod.config import RunConfig
from ssod.errors import ConfigError, DataError, NumericError
from ssod.geometry import Box, iou
from ssod.synthdata import DatasetSpec, generate, load_annotations, load_pixels

from test_geometry import brute_force_nms


def _cfg(data, out, **kw):
    base = dict(data_dir=str(data), out_dir=str(out), epochs=3, burn_in_epochs=1, eval_every=1, lr=0.05)
    return RunConfig(**{**base, **kw})


def _rows(path):
    with open(path) as f:
        return list(csv.reader(f))


@pytest.fixture(scope="module")
def smoke_run(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "smoke"
    cfg = _cfg(tiny_dataset, out)
    history = hs.train(cfg, log=lambda s: None)
    return cfg, out, history


def test_smoke_run_outputs(smoke_run):
    cfg, out, history = smoke_run
    ckpts = sorted((out / "checkpoints").glob("*.ckpt"))
    assert [c.name for c in ckpts] == ["epoch_000.ckpt", "epoch_001.ckpt", "epoch_002.ckpt"]
    rows = _rows(out / "metrics.csv")
    assert tuple(rows[0]) == hs.METRICS_COLUMNS
    # 10 labeled / 8 -> 2 burn-in steps, 90 unlabeled / 8 -> 12 steps per later epoch
    assert len(rows) - 1 == 2 + 12 + 12
    assert [r[2] for r in rows[1:]] == ["burn_in"] * 2 + ["ssod"] * 24
    assert all(float(r[9]) > 0 for r in rows[1:3])           # domain loss active in burn-in
    assert all(float(r[9]) == 0 for r in rows[3:])
    assert len(_rows(out / "eval.csv")) == 4
    recs = [json.loads(l) for l in (out / "thresholds.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in recs] == [1, 1, 1, 2, 2, 2]
    assert [r["class"] for r in recs] == [0, 1, 2] * 2
    # records hold the adaptor output; separation happens where the pair is used
    assert all(0 <= r["tau1"] <= r["tau2"] <= 1 for r in recs)
    tr = hs.Trainer(cfg, resume=out / "checkpoints" / "epoch_002.ckpt")
    t1, t2 = tr.current_taus()
    assert np.all(t1 < t2)
    assert [h["epoch"] for h in history] == [0, 1, 2]


def test_fixed_seed_metrics_are_byte_identical(tiny_dataset, tmp_path):
    a = _cfg(tiny_dataset, tmp_path / "a", epochs=2)
    b = _cfg(tiny_dataset, tmp_path / "b", epochs=2)
    c = _cfg(tiny_dataset, tmp_path / "c", epochs=2, workers=2)
    for cfg in (a, b, c):
        hs.train(cfg, log=lambda s: None)
    ref = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert (tmp_path / "b" / "metrics.csv").read_bytes() == ref
    # the worker pool sequences outputs by sample index
    assert (tmp_path / "c" / "metrics.csv").read_bytes() == ref
    d = _cfg(tiny_dataset, tmp_path / "d", epochs=2, seed=1)
    hs.train(d, log=lambda s: None)
    assert (tmp_path / "d" / "metrics.csv").read_bytes() != ref


def test_resume_reproduces_the_uninterrupted_run(smoke_run, tmp_path):
    cfg, out, _ = smoke_run
    copy = tmp_path / "resumed"
    shutil.copytree(out, copy)
    cfg2 = cfg.with_overrides(out_dir=str(copy))
    hs.train(cfg2, resume=copy / "checkpoints" / "epoch_000.ckpt", log=lambda s: None)
    for name in ("metrics.csv", "eval.csv", "thresholds.jsonl"):
        assert (copy / name).read_bytes() == (out / name).read_bytes(), name
    ga, ma = nc.load_checkpoint(out / "checkpoints" / "epoch_002.ckpt")
    gb, mb = nc.load_checkpoint(copy / "checkpoints" / "epoch_002.ckpt")
    # the stored config differs only in where the run was written
    assert ma["config"].pop("out_dir") != mb["config"].pop("out_dir")
    assert ma == mb
    for g in ga:
        for k in ga[g]:
            np.testing.assert_array_equal(ga[g][k], gb[g][k])


def test_checkpoint_evaluate_identity(smoke_run, tiny_dataset):
    cfg, out, history = smoke_run
    ckpt = out / "checkpoints" / "epoch_002.ckpt"
    r1 = hs.evaluate(ckpt, tiny_dataset)
    r2 = hs.evaluate(ckpt, tiny_dataset)
    assert r1.per_class == r2.per_class
    assert r1.ap50 == history[-1]["ap50"] and r1.ap == history[-1]["ap50_95"]
    tr = hs.Trainer(cfg, resume=ckpt)
    r3 = hs.evaluate_params(tr.teacher, tr.test, tr.arch, tr.anchors, cfg)
    assert r3.per_class == r1.per_class


def test_resume_with_other_architecture_is_refused(smoke_run):
    cfg, out, _ = smoke_run
    with pytest.raises(ConfigError, match="head_layers"):
        hs.Trainer(cfg.with_overrides(num_scales=3), resume=out / "checkpoints" / "epoch_000.ckpt")


def test_evaluate_refuses_class_mismatch(smoke_run, tmp_path):
    _, out, _ = smoke_run
    other = generate(DatasetSpec(num_images=10, num_test=2, classes=("circle", "square")), tmp_path / "d2")
    with pytest.raises(ConfigError, match="classes"):
        hs.evaluate(out / "checkpoints" / "epoch_000.ckpt", other)


def test_mode_reduction(tiny_dataset, tmp_path):
    et = _cfg(tiny_dataset, tmp_path / "et", epochs=3, burn_in_epochs=3, lambda_u=0.0, lambda_da=0.0)
    sup = _cfg(tiny_dataset, tmp_path / "sup", epochs=3, burn_in_epochs=3, mode="supervised")
    hs.train(et, log=lambda s: None)
    hs.train(sup, log=lambda s: None)
    a, b = _rows(tmp_path / "et" / "metrics.csv")[1:], _rows(tmp_path / "sup" / "metrics.csv")[1:]
    assert len(a) == len(b) == 6
    for ra, rb in zip(a, b):
        assert ra[:2] == rb[:2] and ra[3:11] == rb[3:11] and ra[13] == rb[13]


def test_directives_per_mode(tiny_dataset, tmp_path):
    def stages(mode, **kw):
        tr = hs.Trainer(_cfg(tiny_dataset, tmp_path / mode, epochs=4, mode=mode, **kw))
        return [(d.stage, d.driver, d.domain_loss, d.pseudo_losses) for d in map(tr.directive, range(4))]

    assert stages("efficient_teacher")[0] == ("burn_in", "labeled", True, False)
    assert stages("efficient_teacher")[1] == ("ssod", "unlabeled", False, True)
    assert stages("supervised")[1] == ("supervised", "unlabeled", False, False)
    assert stages("naive_filter")[0] == ("burn_in", "labeled", False, False)
    assert stages("naive_filter")[1] == ("ssod", "unlabeled", False, True)
    alt = stages("alternating_baseline", alt_supervised_epochs=2)
    assert [s[0] for s in alt] == ["supervised", "supervised", "ssod", "ssod"]
    assert all(s[1] == "unlabeled" for s in alt)


def test_nan_aborts_with_dump(tiny_dataset, tmp_path):
    cfg = _cfg(tiny_dataset, tmp_path / "nan", epochs=1, lr=1e30, grad_clip=0.0, warmup_steps=0,
               mode="supervised")
    with np.errstate(all="ignore"), pytest.raises(NumericError):
        hs.train(cfg, log=lambda s: None)
    dump = json.loads((tmp_path / "nan" / "nan_dump.json").read_text())
    assert dump["step"] >= 1 and "reason" in dump


def test_missing_dataset(tmp_path):
    with pytest.raises(DataError):
        hs.Trainer(RunConfig(data_dir=str(tmp_path / "none"), out_dir=str(tmp_path / "o")))


def test_ema_rate_and_clip():
    assert hs.ema_rate(0.999, 5, 0) == 0.999
    assert hs.ema_rate(0.999, 200, 200) == pytest.approx(0.999 * (1 - np.exp(-1)))
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    c = hs.clip_grads(g, 1.0)
    assert np.sqrt(c["a"] ** 2 + c["b"] ** 2)[0] == pytest.approx(1.0)
    assert hs.clip_grads(g, 10.0) is g and hs.clip_grads(g, 0) is g


# analysis -----------------------------------------------------------------------


def _oracle_labels(raw, priors, stride, t1, t2, score_thresh, iou_thresh):
    """Independent decode -> score -> brute-force NMS -> tag for one image."""
    sig = lambda x: 1 / (1 + np.exp(-x))
    cands = []
    na, gh, gw, no = raw.shape
    for a in range(na):
        for y in range(gh):
            for x in range(gw):
                v = raw[a, y, x].astype(np.float64)
                cls_p, (tx, ty, tw, th), obj = sig(v[:3]), sig(v[3:7]), sig(v[7])
                c = int(np.argmax(cls_p))
                box = Box((2 * tx - 0.5 + x) * stride, (2 * ty - 0.5 + y) * stride,
                          max((2 * tw) ** 2 * priors[a][0], 1e-6), max((2 * th) ** 2 * priors[a][1], 1e-6))
                cands.append((c, box, obj * cls_p[c]))
    keep = brute_force_nms([b for _, b, _ in cands], [p for _, _, p in cands], [c for c, _, _ in cands],
                           score_thresh, iou_thresh)
    out = []
    for i in keep:
        c, b, p = cands[i]
        tag = "reliable" if p >= t2[c] else "uncertain" if p > t1[c] else "background"
        out.append((c, b, tag))
    return out


def test_analyze_matches_recomputation(smoke_run, tiny_dataset):
    cfg, out, _ = smoke_run
    ckpt = out / "checkpoints" / "epoch_002.ckpt"
    rep = hs.analyze(ckpt, tiny_dataset)
    params, arch, meta = hs.load_model(ckpt)
    t1 = np.array(rep["tau1"])
    t2 = np.array(rep["tau2"])
    counts = {t: {"tp": 0, "loc_fp": 0, "cls_fp": 0} for t in pla.TAGS}
    for r in load_annotations(tiny_dataset / "unlabeled_gt.json", 3):
        x = load_pixels(tiny_dataset, r)[None].astype(arch.dtype)
        raw = dt.predict_raw(params, x, arch)[0][0]
        for c, b, tag in _oracle_labels(raw, arch.anchors[0], 8, t1, t2, cfg.nms_score_thresh,
                                        cfg.nms_iou_thresh):
            ious = [iou(b, g) for _, g in r.labels]
            if not ious or max(ious) <= 0.5:
                counts[tag]["loc_fp"] += 1
            elif r.labels[int(np.argmax(ious))][0] == c:
                counts[tag]["tp"] += 1
            else:
                counts[tag]["cls_fp"] += 1
    assert {t: rep["stats"][t]["counts"] for t in pla.TAGS} == counts
    for t in pla.TAGS:
        if rep["stats"][t]["count"]:
            assert sum(rep["stats"][t]["fractions"].values()) == pytest.approx(1.0)
    # thresholds come from the checkpoint, trajectory from the run log
    assert rep["thresholds"] and rep["thresholds"][-1]["epoch"] == 2
    csv_text = hs.analysis_csv(rep)
    assert csv_text.splitlines()[0].startswith("tag,count,tp")


def test_analyze_requires_held_back_gt(smoke_run, tiny_dataset, tmp_path):
    _, out, _ = smoke_run
    copy = tmp_path / "nogt"
    shutil.copytree(tiny_dataset, copy)
    (copy / "unlabeled_gt.json").unlink()
    with pytest.raises(DataError):
        hs.analyze(out / "checkpoints" / "epoch_000.ckpt", copy)
