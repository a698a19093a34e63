"""Stage scheduling and per-epoch adaptive pseudo-label thresholds.

Training starts with a burn-in stage (labeled-driven epochs, labeled and
unlabeled images paired 1:1, domain classifier active) and then switches to
the semi-supervised stage (unlabeled-driven epochs, pseudo-label losses).

Between epochs the thresholds for class c are read off the descending list of
post-NMS teacher scores collected during the previous epoch::

    r1 = ceil(n_c * N_u / N_l)          tau1 = P_c[r1]
    r2 = ceil(alpha/100 * n_c * N_u / N_l)  tau2 = P_c[r2]

where n_c is the number of class-c boxes the student saw in one pass over the
labeled set after Mosaic (so it already includes the Mosaic inflation) and
ranks are 1-based, clamped to the list length.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import netcore as nc
from .netcore import Tensor

BURN_IN, SSOD = "burn_in", "ssod"
FALLBACK_THRESHOLDS = (0.1, 0.6)
DEFAULT_ALPHA = 60.0
RESERVOIR_CAP = 50_000


def normalize_alpha(alpha: float) -> float:
    """Reliable ratio in percent; values in (0, 1] are read as fractions of one."""
    a = float(alpha)
    if not 0.0 < a <= 100.0:
        raise ValueError(f"alpha must be in (0, 100], got {alpha}")
    return a * 100.0 if a <= 1.0 else a


def count_gt(label_lists: Iterable[Sequence[tuple]], num_classes: int) -> np.ndarray:
    """Exact per-class totals over the (post-augmentation) label lists of an epoch."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for labels in label_lists:
        for c, _ in labels:
            counts[c] += 1
    return counts


class Reservoir:
    """Uniform fixed-size sample of a stream (algorithm R)."""

    def __init__(self, cap: int, rng: np.random.Generator):
        self.cap = cap
        self.rng = rng
        self.items: list[float] = []
        self.seen = 0

    def add(self, x: float) -> None:
        self.seen += 1
        if len(self.items) < self.cap:
            self.items.append(x)
            return
        j = int(self.rng.integers(0, self.seen))
        if j < self.cap:
            self.items[j] = x


@dataclass
class EpochStats:
    epoch: int
    num_classes: int
    n_labeled: int
    n_unlabeled: int
    alpha: float = DEFAULT_ALPHA
    cap: int = RESERVOIR_CAP
    seed: int = 0
    gt_counts: np.ndarray = None
    labeled_seen: int = 0
    _scores: list = field(default=None, repr=False)

    def __post_init__(self):
        if self.n_labeled < 1 or self.n_unlabeled < 1:
            raise ValueError("N_l and N_u must be at least 1")
        self.alpha = normalize_alpha(self.alpha)
        if self.gt_counts is None:
            self.gt_counts = np.zeros(self.num_classes, dtype=np.int64)
        rng = np.random.default_rng([self.seed, self.epoch])
        self._scores = [Reservoir(self.cap, rng) for _ in range(self.num_classes)]

    def add_labeled(self, labels: Sequence[tuple]) -> None:
        """Record one augmented labeled image."""
        self.labeled_seen += 1
        for c, _ in labels:
            self.gt_counts[c] += 1

    def add_scores(self, class_ids: Iterable[int], scores: Iterable[float]) -> None:
        for c, p in zip(class_ids, scores):
            self._scores[int(c)].add(float(p))

    def score_list(self, c: int) -> np.ndarray:
        return np.sort(np.asarray(self._scores[c].items, dtype=np.float64))[::-1]

    def gt_per_pass(self, c: int) -> float:
        """n_c: class-c boxes per full pass over the labeled set, as seen after Mosaic."""
        if self.labeled_seen == 0:
            return 0.0
        return self.gt_counts[c] * self.n_labeled / self.labeled_seen

    def mean_gt_per_image(self) -> float:
        return float(self.gt_counts.sum()) / self.labeled_seen if self.labeled_seen else 0.0


def _rank(x: float, length: int) -> int:
    # round away float noise such as 0.6 * 5 = 3.0000000000000004 before the ceiling
    r = math.ceil(round(x, 9))
    return min(max(r, 1), length)


def thresholds_from_list(scores_desc: np.ndarray, expected: float, alpha: float,
                         fallback: tuple[float, float] = FALLBACK_THRESHOLDS) -> tuple[float, float]:
    """(tau1, tau2) from a descending score list and the expected label count n_c * N_u / N_l."""
    n = len(scores_desc)
    if n == 0:
        return fallback
    alpha = normalize_alpha(alpha)
    r1 = _rank(expected, n)
    r2 = _rank(alpha / 100.0 * expected, n)
    return float(scores_desc[r1 - 1]), float(scores_desc[r2 - 1])


def compute_thresholds(stats: EpochStats, c: int,
                       fallback: tuple[float, float] = FALLBACK_THRESHOLDS) -> tuple[float, float]:
    expected = stats.gt_per_pass(c) * stats.n_unlabeled / stats.n_labeled
    return thresholds_from_list(stats.score_list(c), expected, stats.alpha, fallback)


def separate(tau1: float, tau2: float) -> tuple[float, float]:
    """Make coinciding thresholds strictly ordered: tau1 drops to the next float below tau2.

    Equal ranks (alpha = 100, duplicated scores, clamping) leave tau1 == tau2;
    labels at exactly that score then count as reliable and the soft band is empty.
    """
    if tau1 < tau2:
        return tau1, tau2
    if tau2 <= 0.0:
        return 0.0, float(np.nextafter(0.0, 1.0))
    return float(np.nextafter(tau2, -np.inf)), tau2


def threshold_records(stats: EpochStats, taus: Sequence[tuple[float, float]]) -> list[dict]:
    return [{"epoch": stats.epoch, "class": c, "n_c": stats.gt_per_pass(c),
             "n_c_raw": int(stats.gt_counts[c]), "tau1": t1, "tau2": t2,
             "list_length": len(stats._scores[c].items)}
            for c, (t1, t2) in enumerate(taus)]


def append_jsonl(path, records: Sequence[dict]) -> None:
    with open(path, "a") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


# schedule ----------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    burn_in_epochs: int
    total_epochs: int

    def __post_init__(self):
        # equality is allowed so a run can stay in burn-in throughout
        if not 0 <= self.burn_in_epochs <= self.total_epochs or self.total_epochs < 1:
            raise ValueError(f"need 0 <= burn_in_epochs <= total_epochs, got "
                             f"{self.burn_in_epochs}/{self.total_epochs}")

    @classmethod
    def default(cls, total_epochs: int) -> "Schedule":
        return cls(max(1, round(0.1 * total_epochs)), total_epochs)


@dataclass(frozen=True)
class Directive:
    stage: str
    driver: str              # which split defines the epoch length
    domain_loss: bool
    pseudo_losses: bool

    def steps(self, n_labeled: int, n_unlabeled: int, batch_labeled: int, batch_unlabeled: int) -> int:
        if self.driver == "labeled":
            return math.ceil(n_labeled / batch_labeled)
        return math.ceil(n_unlabeled / batch_unlabeled)


def advance(schedule: Schedule, epoch: int) -> Directive:
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if epoch < schedule.burn_in_epochs:
        return Directive(BURN_IN, "labeled", True, False)
    return Directive(SSOD, "unlabeled", False, True)


class CyclingSampler:
    """Endless index stream over ``n`` items, reshuffled at every pass.

    Pass ``k`` uses the permutation drawn from ``(seed, stream, k)``, so the
    sampler's whole state is the pair (pass, position).
    """

    def __init__(self, n: int, seed: int, stream: int):
        if n < 1:
            raise ValueError("cannot sample from an empty set")
        self.n, self.seed, self.stream = n, seed, stream
        self.passes = 0
        self.pos = 0
        self.order = self._perm(0)

    def _perm(self, k: int) -> np.ndarray:
        return np.random.default_rng([self.seed, self.stream, k]).permutation(self.n)

    def take(self, k: int) -> list[int]:
        out = []
        for _ in range(k):
            if self.pos == self.n:
                self.passes += 1
                self.order = self._perm(self.passes)
                self.pos = 0
            out.append(int(self.order[self.pos]))
            self.pos += 1
        return out

    def state(self) -> dict:
        return {"passes": self.passes, "pos": self.pos}

    def restore(self, state: dict) -> None:
        self.passes = int(state["passes"])
        self.pos = int(state["pos"])
        self.order = self._perm(self.passes)


# domain classifier ------------------------------------------------------------

DOMAIN_HIDDEN = 16


def init_domain_params(feature_channels: int, rng: np.random.Generator, dtype=np.float32,
                       hidden: int = DOMAIN_HIDDEN) -> nc.ParamSet:
    return {
        "domain.0.w": nc.he_uniform(rng, (1, 1, feature_channels, hidden), feature_channels, dtype),
        "domain.0.b": np.zeros(hidden, dtype=dtype),
        "domain.1.w": nc.he_uniform(rng, (1, 1, hidden, 1), hidden, dtype),
        "domain.1.b": np.zeros(1, dtype=dtype),
    }


def domain_logits(params: dict, features: Tensor, grl_lambda: float = 1.0) -> Tensor:
    """Per-location domain logits [B, H, W]; features pass through gradient reversal first."""
    P = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
    h = nc.grl(features, grl_lambda)
    h = nc.leaky_relu(nc.conv2d(h, P["domain.0.w"], P["domain.0.b"]))
    logit = nc.conv2d(h, P["domain.1.w"], P["domain.1.b"])
    b, gh, gw, _ = logit.shape
    return logit.reshape(b, gh, gw)


def domain_classifier_forward(params: dict, features: Tensor, grl_lambda: float = 1.0) -> Tensor:
    """Per-location probability [B, H, W] that the features come from the unlabeled domain."""
    return nc.sigmoid(domain_logits(params, features, grl_lambda))
