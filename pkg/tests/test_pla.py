import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssod import detector as dt
from ssod import losses as L
from ssod import pla
from ssod.errors import ConfigError
from ssod.geometry import Box, Detection, cxcywh_to_xyxy, iou

ANCHORS = dt.AnchorSet((((6.0, 6.0), (12.0, 12.0), (24.0, 24.0)),), (8,))
DIMS = [(8, 8)]


def oracle_tag(p, t1, t2):
    if p >= t2:
        return "reliable"
    if p > t1:
        return "uncertain"
    return "background"


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def test_partition_matches_rule():
    for case in range(1000):
        r = np.random.default_rng([30, case])
        grid = r.normal(0, 2.5, (3, 8, 8, 8))
        grid[..., 7] -= 2.0
        t1 = float(r.uniform(0, 0.5))
        t2 = float(r.uniform(t1 + 1e-3, 1.0))
        if case % 5 == 0:
            # per-class thresholds
            t1 = r.uniform(0, 0.4, 3)
            t2 = t1 + r.uniform(1e-3, 0.5, 3)
        labels = pla.generate_pseudo_labels([grid], ANCHORS, t1, t2, 0.01, 0.65)
        raw = grid.reshape(-1, 8)
        cls_p = _sigmoid(raw[:, :3])
        obj_p = _sigmoid(raw[:, 7])
        for lab in labels:
            c = lab.class_id
            a, b = (t1, t2) if np.ndim(t1) == 0 else (t1[c], t2[c])
            assert lab.tag == oracle_tag(lab.p_score, a, b)
            assert lab.p_score == pytest.approx(lab.det.obj_score * lab.det.cls_score, abs=1e-15)
            assert lab.p_score >= 0.01
        # every surviving score is one of the grid's argmax-class products
        prods = obj_p * cls_p.max(1)
        for lab in labels:
            assert np.min(np.abs(prods - lab.p_score)) < 1e-12


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_tag_for_is_a_partition(p, a, b):
    t1, t2 = min(a, b), max(a, b)
    if t1 == t2:
        return
    assert pla.tag_for(p, t1, t2) == oracle_tag(p, t1, t2)


def test_threshold_checks():
    with pytest.raises(ConfigError):
        pla.check_thresholds(0.6, 0.6)
    with pytest.raises(ConfigError):
        pla.check_thresholds(np.array([0.1, 0.7]), np.array([0.5, 0.6]))
    with pytest.raises(ConfigError):
        pla.check_thresholds(-0.1, 0.5)


def _label(r, tag_bias=None):
    c = int(r.integers(0, 3))
    box = Box(*r.uniform(6, 58, 2), *r.uniform(6, 28, 2))
    obj = float(r.choice([r.uniform(0.02, 0.99), r.uniform(0.9901, 1.0)]))
    cls = float(r.uniform(0.02, 1.0))
    return c, box, obj, cls


def test_unsup_targets_follow_the_rules():
    for case in range(300):
        r = np.random.default_rng([31, case])
        t1 = float(r.uniform(0.05, 0.4))
        t2 = float(r.uniform(t1 + 0.01, 0.9))
        labels = []
        for _ in range(int(r.integers(0, 8))):
            c, box, obj, cls = _label(r)
            p = obj * cls
            labels.append(pla.PseudoLabel(Detection(box, c, cls, obj), p, pla.tag_for(p, t1, t2)))
        tg = pla.build_unsup_targets(labels, ANCHORS, DIMS, t1, t2)
        tg.check()
        s = tg.scales[0]
        for idx in zip(*np.nonzero(s.state != dt.BACKGROUND)):
            lab = labels[s.gt_index[idx]]
            assert s.score[idx] == lab.p_score
            if s.state[idx] == dt.POSITIVE:
                assert lab.tag == "reliable"
                assert s.cls[idx] == lab.class_id and s.has_box[idx]
            else:
                assert s.state[idx] == dt.SOFT and lab.tag == "uncertain"
                assert s.obj[idx] == lab.det.obj_score
                assert s.has_box[idx] == (lab.det.obj_score > 0.99)
        # background-tagged labels never claim a slot
        claimed = set(s.gt_index[s.state != dt.BACKGROUND].tolist())
        assert all(labels[i].tag != "background" for i in claimed)
        # every reliable label with an anchor match owns at least one slot
        reliable = [i for i, l in enumerate(labels) if l.tag == "reliable"]
        owners = dt.match_slots([(labels[i].class_id, labels[i].box) for i in reliable], ANCHORS, DIMS)[0]
        assert {reliable[li] for li in owners.values()} <= claimed


def test_reliable_claims_before_uncertain():
    box = Box(28, 28, 12, 12)
    rel = pla.PseudoLabel(Detection(box, 0, 0.9, 0.9), 0.81, "reliable")
    unc = pla.PseudoLabel(Detection(box, 1, 0.5, 0.6), 0.30, "uncertain")
    for order in ([rel, unc], [unc, rel]):
        s = pla.build_unsup_targets(order, ANCHORS, DIMS, 0.1, 0.6).scales[0]
        assert (s.state == dt.SOFT).sum() == 0
        assert (s.state == dt.POSITIVE).sum() > 0


def test_branch_disjointness_sweep():
    scores = np.unique(np.concatenate([np.linspace(0, 1, 201), [1e-9, 1 - 1e-9]]))
    taus = np.linspace(0, 1, 41)
    violations = 0
    for t1 in taus:
        for t2 in taus[taus > t1]:
            s = scores.copy()
            # grid points land exactly on both thresholds as well
            s = np.unique(np.concatenate([s, [t1, t2, np.nextafter(t1, 2), np.nextafter(t2, -1)]]))
            bg, rel, soft = L.obj_branches(s, t1, t2)
            n_active = bg.astype(int) + rel + soft
            violations += int(np.sum(n_active != 1))
            tags = np.array([pla.tag_for(p, t1, t2) for p in s])
            assert np.array_equal(tags == "reliable", rel)
            assert np.array_equal(tags == "uncertain", soft)
            assert np.array_equal(tags == "background", bg)
    assert violations == 0


def test_obj_branches_rejects_inverted_thresholds():
    with pytest.raises(RuntimeError):
        L.obj_branches(np.array([0.5]), 0.6, 0.4)


def test_hard_label_targets():
    box = Box(28, 28, 12, 12)
    labs = [pla.PseudoLabel(Detection(box, 0, 0.9, 0.9), 0.81, "reliable"),
            pla.PseudoLabel(Detection(Box(50, 10, 10, 10), 1, 0.5, 0.6), 0.30, "uncertain")]
    tg = pla.hard_label_targets(labs, ANCHORS, DIMS, 0.6)
    s = tg.scales[0]
    assert set(s.gt_index[s.state == dt.POSITIVE].tolist()) == {0}
    assert (s.state == dt.SOFT).sum() == 0


def test_transform_pseudo_drops_clipped():
    from ssod.augment import GeomTransform

    labs = [pla.PseudoLabel(Detection(Box(10, 10, 8, 8), 0, 0.9, 0.9), 0.81, "reliable"),
            pla.PseudoLabel(Detection(Box(60, 60, 8, 8), 1, 0.9, 0.9), 0.81, "reliable")]
    shift = GeomTransform(1.0, -40.0, 1.0, -40.0)
    out = pla.transform_pseudo(labs, shift, 64, 64)
    assert len(out) == 1 and out[0].class_id == 1
    assert out[0].box.cx == pytest.approx(20) and out[0].p_score == 0.81


def stats_oracle(labels, gts):
    counts = {t: {"tp": 0, "loc_fp": 0, "cls_fp": 0} for t in ("reliable", "uncertain", "background")}
    for l in labels:
        ious = [iou(l.box, g) for _, g in gts]
        if not ious or max(ious) <= 0.5:
            counts[l.tag]["loc_fp"] += 1
        elif gts[int(np.argmax(ious))][0] == l.class_id:
            counts[l.tag]["tp"] += 1
        else:
            counts[l.tag]["cls_fp"] += 1
    return counts


def test_pseudo_stats_match_oracle():
    for case in range(100):
        r = np.random.default_rng([32, case])
        gts = [(int(r.integers(0, 3)), Box(*r.uniform(8, 56, 2), *r.uniform(6, 24, 2)))
               for _ in range(int(r.integers(0, 5)))]
        labels = []
        for _ in range(int(r.integers(0, 10))):
            if gts and r.random() < 0.6:
                c, g = gts[int(r.integers(len(gts)))]
                box = Box(g.cx + r.normal(0, 2), g.cy + r.normal(0, 2), g.w, g.h)
                c = c if r.random() < 0.7 else int(r.integers(0, 3))
            else:
                c, box = int(r.integers(0, 3)), Box(*r.uniform(8, 56, 2), *r.uniform(6, 24, 2))
            p = float(r.uniform(0, 1))
            labels.append(pla.PseudoLabel(Detection(box, c, 1.0, p), p, pla.tag_for(p, 0.3, 0.6)))
        st_ = pla.pseudo_stats(labels, gts)
        assert st_.counts == stats_oracle(labels, gts)
        d = st_.to_dict()
        for tag in pla.TAGS:
            if d[tag]["count"]:
                assert sum(d[tag]["fractions"].values()) == pytest.approx(1.0)
        json.loads(st_.to_json())


def test_perfect_teacher_is_all_tp():
    gts = [(0, Box(20, 20, 10, 10)), (2, Box(45, 40, 14, 8))]
    labels = [pla.PseudoLabel(Detection(b, c, 1.0, 1.0), 1.0, "reliable") for c, b in gts]
    assert pla.pseudo_stats(labels, gts).fractions("reliable")["tp"] == 1.0
