"""Training, evaluation and pseudo-label analysis.

Modes
-----
``supervised``
    labeled loss only, on the same step schedule as ``efficient_teacher``.
``naive_filter``
    single-threshold pseudo labels (p >= naive_tau) used as hard ground truth.
``efficient_teacher``
    burn-in with the domain classifier, then the three-way pseudo-label
    assignment with per-class thresholds recomputed every epoch.
``alternating_baseline``
    a full-length supervised phase, then the same semi-supervised stage.

All randomness is derived from ``(seed, stream, step, sample)`` so runs are
reproducible, resumable mid-way, and independent of the worker count.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment as au
from . import detector as dt
from . import epoch_adaptor as ea
from . import netcore as nc
from . import pla
from .config import RunConfig, dump_config
from .errors import ConfigError, DataError, NumericError
from .geometry import cxcywh_to_xyxy, nms_indices
from .losses import (METRICS_COLUMNS, LossReport, LossWeights, burn_in_loss, domain_loss_logits,
                     supervised_loss, total_loss, unsup_loss)
from .metrics import EvalReport, ImageDetections, ImageTruth, evaluate_detections
from .synthdata import SPLIT_FILES, load_annotations, load_pixels, load_split

STREAM_INIT, STREAM_LABELED, STREAM_UNLABELED, STREAM_SAMPLE_L, STREAM_SAMPLE_U, STREAM_DOMAIN = range(6)
EVAL_COLUMNS = ("epoch", "step", "ap50", "ap50_95")
SUPERVISED_STAGE = "supervised"


def sample_rng(seed: int, stream: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, *keys])


def arch_for(cfg: RunConfig, num_classes: int) -> dt.ArchConfig:
    if cfg.num_scales == 1:
        return dt.ArchConfig(num_classes=num_classes, dtype=cfg.dtype)
    return dt.ArchConfig(
        num_classes=num_classes, dtype=cfg.dtype,
        backbone=((16, 2), (32, 2), (48, 2), (64, 2)),
        head_layers=(1, 2, 3),
        anchors=(((4.0, 4.0), (6.0, 6.0), (8.0, 8.0)),
                 ((10.0, 10.0), (14.0, 14.0), (18.0, 18.0)),
                 ((24.0, 24.0), (32.0, 32.0), (44.0, 44.0))),
    )


def num_classes_of(data_dir: str | Path) -> int:
    path = Path(data_dir) / SPLIT_FILES["labeled"]
    try:
        return len(json.loads(path.read_text())["categories"])
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read categories from {path}: {e}") from e


def ema_rate(m: float, updates: int, ramp: float) -> float:
    """EMA rate after ``updates`` steps, warmed up as ``m * (1 - exp(-updates / ramp))``."""
    return m if ramp <= 0 else m * (1.0 - math.exp(-updates / ramp))


def clip_grads(grads: dict, max_norm: float) -> dict:
    """Scale all gradients down together so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        return grads
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def arch_diff(a: dict, b: dict) -> list[str]:
    return [f"{k}: checkpoint={a.get(k)!r} config={b.get(k)!r}"
            for k in sorted(set(a) | set(b)) if a.get(k) != b.get(k)]


# prediction -------------------------------------------------------------------


def detect(params: nc.ParamSet, images: np.ndarray, arch: dt.ArchConfig, anchors: dt.AnchorSet,
           score_thresh: float, iou_thresh: float, max_dets: int, batch: int = 50) -> list[ImageDetections]:
    """Decode, score (objectness x class) and NMS every image."""
    out = []
    for s in range(0, len(images), batch):
        raw = dt.predict_raw(params, images[s:s + batch], arch)
        for b in range(len(raw[0])):
            boxes, cls_p, obj_p = dt.decode_image([r[b] for r in raw], anchors)
            cid = cls_p.argmax(axis=1)
            score = obj_p * cls_p[np.arange(len(cid)), cid]
            xyxy = cxcywh_to_xyxy(boxes)
            keep = nms_indices(xyxy, score, cid, score_thresh, iou_thresh)[:max_dets]
            out.append(ImageDetections(xyxy[keep], score[keep], cid[keep]))
    return out


def truths_of(images: list[au.LabeledImage]) -> list[ImageTruth]:
    out = []
    for im in images:
        boxes = np.array([b.to_xyxy() for _, b in im.labels]).reshape(-1, 4)
        out.append(ImageTruth(boxes, np.array([c for c, _ in im.labels], dtype=np.int64)))
    return out


def evaluate_params(params, images: list[au.LabeledImage], arch, anchors, cfg: RunConfig) -> EvalReport:
    x = np.stack([im.pixels for im in images]).astype(cfg.dtype)
    dets = detect(params, x, arch, anchors, cfg.test_score_thresh, cfg.test_iou_thresh, cfg.max_dets)
    return evaluate_detections(dets, truths_of(images), arch.num_classes)


# training ------------------------------------------------------------------------


@dataclass
class TrainState:
    epoch: int = 0            # next epoch to run
    step: int = 0             # optimizer steps taken
    ema_updates: int = 0
    tau1: list = field(default_factory=list)
    tau2: list = field(default_factory=list)
    sampler_l: dict = field(default_factory=dict)
    sampler_u: dict = field(default_factory=dict)


class Trainer:
    def __init__(self, cfg: RunConfig, resume: str | Path | None = None):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.num_classes = num_classes_of(cfg.data_dir)
        self.arch = arch_for(cfg, self.num_classes)
        self.anchors = dt.AnchorSet.from_arch(self.arch)
        self.weights = LossWeights(cfg.w_cls, cfg.w_reg, cfg.w_obj)
        self.labeled = load_split(cfg.data_dir, "labeled", self.num_classes)
        self.unlabeled = load_split(cfg.data_dir, "unlabeled", self.num_classes)
        self.test = load_split(cfg.data_dir, "test", self.num_classes)
        if not self.labeled or not self.unlabeled:
            raise DataError("need at least one labeled and one unlabeled image")
        self.size = self.labeled[0].size[0]
        self.dims = self.arch.grid_dims(self.size, self.size)
        self.strong_cfg = au.StrongConfig(scale_range=(cfg.scale_min, cfg.scale_max))
        self.labeled_cfg = au.labeled_config()
        self.schedule = ea.Schedule(cfg.burn_in if cfg.mode != "alternating_baseline" else 0, cfg.epochs)

        rng = sample_rng(cfg.seed, STREAM_INIT)
        self.params = dt.init_params(self.arch, rng, self.size)
        self.teacher = {k: v.copy() for k, v in self.params.items()}
        self.domain = ea.init_domain_params(self.arch.feature_channels, sample_rng(cfg.seed, STREAM_DOMAIN),
                                            np.dtype(cfg.dtype))
        self.opt = nc.SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
        self.sampler_l = ea.CyclingSampler(len(self.labeled), cfg.seed, STREAM_SAMPLE_L)
        self.sampler_u = ea.CyclingSampler(len(self.unlabeled), cfg.seed, STREAM_SAMPLE_U)
        self.state = TrainState(tau1=[cfg.tau1] * self.num_classes, tau2=[cfg.tau2] * self.num_classes)
        self.pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 0 else None
        if resume is not None:
            self._restore(resume)

    # -- stage logic

    def directive(self, epoch: int) -> ea.Directive:
        cfg = self.cfg
        if cfg.mode == "alternating_baseline":
            if epoch < cfg.alt_supervised:
                return ea.Directive(SUPERVISED_STAGE, "unlabeled", False, False)
            return ea.Directive(ea.SSOD, "unlabeled", False, True)
        d = ea.advance(self.schedule, epoch)
        if cfg.mode == "supervised":
            return ea.Directive(SUPERVISED_STAGE, d.driver, False, False)
        if cfg.mode == "naive_filter":
            return ea.Directive(d.stage, d.driver, False, d.pseudo_losses)
        return d

    def grl_ramp(self) -> float:
        """Gradient-reversal strength ramp ``2 / (1 + exp(-10 p)) - 1`` over burn-in progress p."""
        if not self.cfg.grl_ramp:
            return 1.0
        total = self.schedule.burn_in_epochs * math.ceil(len(self.labeled) / self.cfg.batch_labeled)
        p = min(1.0, self.state.step / max(total, 1))
        return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0

    def uses_assigner(self) -> bool:
        return self.cfg.mode in ("efficient_teacher", "alternating_baseline")

    def current_taus(self) -> tuple[np.ndarray, np.ndarray]:
        pairs = [ea.separate(a, b) for a, b in zip(self.state.tau1, self.state.tau2)]
        return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])

    # -- data

    def _map(self, fn, items):
        return list(self.pool.map(fn, items)) if self.pool else [fn(i) for i in items]

    def labeled_batch(self, step: int) -> list[au.LabeledImage]:
        idx = self.sampler_l.take(self.cfg.batch_labeled)
        return self._map(lambda ki: au.strong_pipeline(
            self.labeled, ki[1], sample_rng(self.cfg.seed, STREAM_LABELED, step, ki[0]), self.labeled_cfg),
            list(enumerate(idx)))

    def unlabeled_views(self, step: int, strong: bool = True):
        """(weak view, strong view, geometric map) per unlabeled sample of this step."""
        idx = self.sampler_u.take(self.cfg.batch_unlabeled)

        def views(ki):
            rng = sample_rng(self.cfg.seed, STREAM_UNLABELED, step, ki[0])
            weak = au.weak_pipeline(self.unlabeled, ki[1], rng)
            if not strong:
                return weak, None, None
            s, geo = au.strong_from_weak(weak, rng, self.strong_cfg)
            return weak, s, geo

        return self._map(views, list(enumerate(idx)))

    def pseudo_labels(self, teacher_grid, weak: au.LabeledImage, tau1, tau2) -> list[pla.PseudoLabel]:
        """Tagged teacher labels for one weak view (``weak`` is unused here; subclasses may consult it)."""
        cfg = self.cfg
        return pla.generate_pseudo_labels(teacher_grid, self.anchors, tau1, tau2, cfg.nms_score_thresh,
                                          cfg.nms_iou_thresh, cfg.max_pseudo)

    def _stack(self, imgs) -> np.ndarray:
        return np.stack([im.pixels for im in imgs]).astype(self.cfg.dtype)

    # -- one optimizer step

    def train_step(self, d: ea.Directive, stats: ea.EpochStats) -> tuple[LossReport, float]:
        cfg, step = self.cfg, self.state.step
        P = nc.as_params(self.params)
        lab = self.labeled_batch(step)
        for im in lab:
            stats.add_labeled(im.labels)
        fl = dt.forward(P, self._stack(lab), self.arch)
        tg = dt.TargetGrid.stack([dt.assign_labels(im.labels, self.anchors, self.dims) for im in lab])
        tg = dt.fill_objectness_targets([o.data for o in fl.outputs], tg, self.anchors)
        ls = supervised_loss(fl.outputs, tg, self.anchors, self.weights)
        loss = ls.total
        report = LossReport(ls=ls.values(), weights=self.weights)
        D = None

        if d.domain_loss and cfg.lambda_da > 0:
            D = nc.as_params(self.domain)
            unl = [v[0] for v in self.unlabeled_views(step, strong=False)]
            unl = [au.strong_from_weak(w, sample_rng(cfg.seed, STREAM_UNLABELED, step, k, 1),
                                       self.labeled_cfg)[0] for k, w in enumerate(unl)]
            fu = dt.forward(P, self._stack(unl), self.arch)
            lam = cfg.grl_lambda * self.grl_ramp()
            lda = (domain_loss_logits(ea.domain_logits(D, fl.features, lam), 0)
                   + domain_loss_logits(ea.domain_logits(D, fu.features, lam), 1)) * 0.5
            loss = burn_in_loss(loss, lda, cfg.lambda_da)
            report.l_da, report.lambda_da = lda.item(), cfg.lambda_da

        if d.pseudo_losses:
            views = self.unlabeled_views(step)
            raw_t = dt.predict_raw(self.teacher, self._stack([v[0] for v in views]), self.arch)
            t1, t2 = self.current_taus()
            grids = []
            for b, (weak, strong, geo) in enumerate(views):
                pseudo = self.pseudo_labels([r[b] for r in raw_t], weak, t1, t2)
                stats.add_scores([l.class_id for l in pseudo], [l.p_score for l in pseudo])
                moved = pla.transform_pseudo(pseudo, geo, self.size, self.size)
                if self.uses_assigner():
                    grids.append(pla.build_unsup_targets(moved, self.anchors, self.dims, t1, t2))
                else:
                    grids.append(pla.hard_label_targets(moved, self.anchors, self.dims, cfg.naive_tau))
            fs = dt.forward(P, self._stack([v[1] for v in views]), self.arch)
            tu = dt.fill_objectness_targets([o.data for o in fs.outputs], dt.TargetGrid.stack(grids),
                                            self.anchors)
            if self.uses_assigner():
                lu = unsup_loss(fs.outputs, tu, self.anchors, self.weights)
            else:
                lu = supervised_loss(fs.outputs, tu, self.anchors, self.weights)
            loss = total_loss(loss, lu.total, cfg.lambda_u)
            report.lu, report.lambda_u = lu.values(), cfg.lambda_u

        if not np.isfinite(loss.item()):
            self._dump_nan(report, "non-finite loss")
        try:
            loss.backward()
        except NumericError as e:
            self._dump_nan(report, str(e))
        self.opt.lr = cfg.lr * min(1.0, (step + 1) / cfg.warmup_steps) if cfg.warmup_steps else cfg.lr
        self.params = self.opt.step(self.params, clip_grads(nc.param_grads(P), cfg.grad_clip))
        if D is not None:
            self.domain = self.opt.step(self.domain, clip_grads(nc.param_grads(D), cfg.grad_clip))
        self.state.ema_updates += 1
        m = ema_rate(cfg.ema_m, self.state.ema_updates, cfg.ema_ramp)
        self.teacher = nc.ema_update(self.teacher, self.params, m)
        self.state.step += 1
        return report, m

    def _dump_nan(self, report: LossReport, why: str):
        self.out.mkdir(parents=True, exist_ok=True)
        dump = {"step": self.state.step, "epoch": self.state.epoch, "reason": why,
                "ls": list(report.ls), "lu": list(report.lu), "l_da": report.l_da}
        (self.out / "nan_dump.json").write_text(json.dumps(dump, indent=1, default=float) + "\n")
        raise NumericError(f"step {self.state.step}: {why}")

    # -- epochs

    def _metrics_row(self, report: LossReport, ema_m: float, epoch: int, stage: str) -> list:
        if self.cfg.mode == "supervised" or stage == SUPERVISED_STAGE:
            taus = (float("nan"), float("nan"))
        elif self.cfg.mode == "naive_filter":
            taus = (self.cfg.naive_tau, self.cfg.naive_tau)
        else:
            taus = (float(np.mean(self.state.tau1)), float(np.mean(self.state.tau2)))
        row = report.csv_row(self.state.step, epoch, stage, taus[0], taus[1], ema_m)
        return [repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row]

    def run(self, log=print) -> list[dict]:
        cfg = self.cfg
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "checkpoints").mkdir(exist_ok=True)
        (self.out / "config.txt").write_text(dump_config(cfg))
        self._prepare_logs()
        history = []
        for epoch in range(self.state.epoch, cfg.epochs):
            d = self.directive(epoch)
            stats = ea.EpochStats(epoch, self.num_classes, len(self.labeled), len(self.unlabeled),
                                  cfg.alpha, seed=cfg.seed)
            rows = []
            for _ in range(d.steps(len(self.labeled), len(self.unlabeled), cfg.batch_labeled,
                                   cfg.batch_unlabeled)):
                rows.append(self._metrics_row(*self.train_step(d, stats), epoch, d.stage))
            with open(self.out / "metrics.csv", "a", newline="") as f:
                csv.writer(f, lineterminator="\n").writerows(rows)
            if d.pseudo_losses and self.uses_assigner():
                taus = [ea.compute_thresholds(stats, c, (cfg.tau1, cfg.tau2)) for c in range(self.num_classes)]
                self.state.tau1 = [t[0] for t in taus]
                self.state.tau2 = [t[1] for t in taus]
                ea.append_jsonl(self.out / "thresholds.jsonl", ea.threshold_records(stats, taus))
            self.state.epoch = epoch + 1
            rec = {"epoch": epoch, "step": self.state.step, "mean_gt_per_image": stats.mean_gt_per_image()}
            if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs:
                rep = evaluate_params(self.teacher, self.test, self.arch, self.anchors, cfg)
                rec.update(ap50=rep.ap50, ap50_95=rep.ap)
                with open(self.out / "eval.csv", "a", newline="") as f:
                    csv.writer(f, lineterminator="\n").writerow(
                        [epoch, self.state.step, repr(rep.ap50), repr(rep.ap)])
            history.append(rec)
            log(json.dumps(rec, sort_keys=True))
            self.save(self.out / "checkpoints" / f"epoch_{epoch:03d}.ckpt")
        if self.pool:
            self.pool.shutdown()
        return history

    def _prepare_logs(self) -> None:
        """Start fresh logs, or cut existing ones back to the resumed position."""
        files = {"metrics.csv": (METRICS_COLUMNS, 0, self.state.step),
                 "eval.csv": (EVAL_COLUMNS, 0, self.state.epoch - 1)}
        for name, (cols, key, limit) in files.items():
            path = self.out / name
            rows = []
            if self.state.step > 0 and path.exists():
                rows = [r for r in list(csv.reader(path.open()))[1:] if int(r[key]) <= limit]
            with open(path, "w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(cols)
                w.writerows(rows)
        path = self.out / "thresholds.jsonl"
        keep = []
        if self.state.step > 0 and path.exists():
            keep = [l for l in path.read_text().splitlines() if json.loads(l)["epoch"] < self.state.epoch]
        path.write_text("".join(l + "\n" for l in keep))

    # -- checkpoints

    def save(self, path: str | Path) -> None:
        st = self.state
        st.sampler_l, st.sampler_u = self.sampler_l.state(), self.sampler_u.state()
        meta = {"arch": self.arch.to_dict(), "config": self.cfg.to_dict(), "mode": self.cfg.mode,
                "num_classes": self.num_classes,
                "state": {"epoch": st.epoch, "step": st.step, "ema_updates": st.ema_updates,
                          "tau1": st.tau1, "tau2": st.tau2, "sampler_l": st.sampler_l,
                          "sampler_u": st.sampler_u}}
        nc.save_checkpoint(path, {"student": self.params, "teacher": self.teacher, "domain": self.domain,
                                  "momentum": dict(self.opt.buffers)}, meta)

    def _restore(self, path: str | Path) -> None:
        groups, meta = nc.load_checkpoint(path)
        diff = arch_diff(meta["arch"], self.arch.to_dict())
        if diff:
            raise ConfigError("checkpoint architecture differs from config:\n  " + "\n  ".join(diff))
        try:
            nc.check_same_structure(groups["student"], self.params)
            nc.check_same_structure(groups["teacher"], self.params)
        except nc.StructureError as e:
            raise ConfigError(f"checkpoint parameters do not match the architecture: {e}") from e
        self.params, self.teacher = groups["student"], groups["teacher"]
        self.domain.update(groups.get("domain", {}))
        self.opt.buffers = dict(groups.get("momentum", {}))
        s = meta["state"]
        self.state = TrainState(s["epoch"], s["step"], s["ema_updates"], list(s["tau1"]), list(s["tau2"]),
                                s["sampler_l"], s["sampler_u"])
        self.sampler_l.restore(s["sampler_l"])
        self.sampler_u.restore(s["sampler_u"])


def train(cfg: RunConfig, resume=None, log=print) -> list[dict]:
    return Trainer(cfg, resume).run(log)


# evaluation and analysis ------------------------------------------------------------


def load_model(checkpoint: str | Path) -> tuple[nc.ParamSet, dt.ArchConfig, dict]:
    """Weights used for inference (the EMA teacher), architecture and metadata."""
    groups, meta = nc.load_checkpoint(checkpoint)
    arch = dt.ArchConfig.from_dict(meta["arch"])
    return groups["teacher"], arch, meta


def _config_of(meta: dict) -> RunConfig:
    return RunConfig(**meta["config"])


def evaluate(checkpoint: str | Path, data_dir: str | Path, split: str = "test") -> EvalReport:
    params, arch, meta = load_model(checkpoint)
    n = num_classes_of(data_dir)
    if n != arch.num_classes:
        raise ConfigError(f"checkpoint has {arch.num_classes} classes, dataset has {n}")
    images = load_split(data_dir, split, n)
    return evaluate_params(params, images, arch, dt.AnchorSet.from_arch(arch), _config_of(meta))


def analyze(checkpoint: str | Path, data_dir: str | Path, tau1=None, tau2=None) -> dict:
    """Tag teacher pseudo labels on the raw unlabeled split and score them against held-back GT."""
    params, arch, meta = load_model(checkpoint)
    cfg = _config_of(meta)
    gt_path = Path(data_dir) / SPLIT_FILES["unlabeled_gt"]
    if not gt_path.exists():
        raise DataError(f"held-back ground truth missing: {gt_path}")
    recs = load_annotations(gt_path, arch.num_classes)
    if tau1 is None or tau2 is None:
        st = meta["state"]
        pairs = [ea.separate(a, b) for a, b in zip(st["tau1"], st["tau2"])]
        t1, t2 = np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])
    else:
        t1, t2 = np.full(arch.num_classes, float(tau1)), np.full(arch.num_classes, float(tau2))
    pla.check_thresholds(t1, t2)
    anchors = dt.AnchorSet.from_arch(arch)
    stats = pla.PseudoStats()
    for s in range(0, len(recs), 50):
        chunk = recs[s:s + 50]
        x = np.stack([load_pixels(data_dir, r) for r in chunk]).astype(arch.dtype)
        raw = dt.predict_raw(params, x, arch)
        for b, r in enumerate(chunk):
            pseudo = pla.generate_pseudo_labels([o[b] for o in raw], anchors, t1, t2,
                                                cfg.nms_score_thresh, cfg.nms_iou_thresh, cfg.max_pseudo)
            stats.add(pseudo, r.labels)
    trajectory = []
    log = Path(checkpoint).resolve().parent.parent / "thresholds.jsonl"
    if log.exists():
        trajectory = [json.loads(l) for l in log.read_text().splitlines() if l.strip()]
    return {"checkpoint": str(checkpoint), "tau1": t1.tolist(), "tau2": t2.tolist(), "stats": stats.to_dict(), "thresholds": trajectory}


def analysis_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tag", "count", "tp", "loc_fp", "cls_fp", "tp_frac", "loc_fp_frac", "cls_fp_frac"])
    for tag in pla.TAGS:
        s = report["stats"][tag]
        c, f = s["counts"], s["fractions"]
        w.writerow([tag, s["count"], c["tp"], c["loc_fp"], c["cls_fp"], f["tp"], f["loc_fp"], f["cls_fp"]])
    return buf.getvalue()
