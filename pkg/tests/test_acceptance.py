"""Acceptance gate: one PASS/FAIL line per criterion.

Criteria 1-4 and 9 re-run the component suites that carry the oracles and
exact checks. Criteria 5, 6 and 8 read the cached four-mode benchmark
(``scripts/run_benchmark.py``); a missing or stale cache is rebuilt first,
which takes about 45 minutes on one CPU.
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from ssod import harness as hs
from ssod.benchmark import SEEDS, run_benchmark
from ssod.config import RunConfig
from ssod.synthdata import load_split

ROOT = Path(__file__).resolve().parent.parent


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance] criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {n}: {detail}"
    return emit


def _pytest(*nodes) -> tuple[int, float, str]:
    t0 = time.perf_counter()
    r = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *nodes],
                       cwd=ROOT, capture_output=True, text=True)
    return r.returncode, time.perf_counter() - t0, r.stdout.strip().splitlines()[-1]


@pytest.fixture(scope="session")
def benchmark():
    return run_benchmark(ROOT / "runs" / "benchmark", ROOT / "configs" / "benchmark.cfg", log=print)


def test_criterion_1_gradients(report):
    rc, secs, last = _pytest("tests/test_gradients.py")
    report(1, rc == 0 and secs < 120, f"{last}; {secs:.0f}s (limit 120s)")


def test_criterion_2_oracles(report):
    rc, _, last = _pytest("tests/test_geometry.py::test_nms_matches_brute_force",
                          "tests/test_pla.py::test_partition_matches_rule",
                          "tests/test_epoch_adaptor.py::test_thresholds_match_sort_and_index_oracle",
                          "tests/test_epoch_adaptor.py::test_clamp_edges_explicit",
                          "tests/test_metrics.py::test_ap_matches_exhaustive_oracle")
    report(2, rc == 0, f"NMS 500, partition 1000, thresholds 200, AP 100 cases: {last}")


def test_criterion_3_branch_disjointness(report):
    rc, _, last = _pytest("tests/test_pla.py::test_branch_disjointness_sweep")
    report(3, rc == 0, last)


def test_criterion_4_grl_ema(report):
    rc, _, last = _pytest("tests/test_netcore.py::test_grl_backward_is_negated_scaled_upstream",
                          "tests/test_netcore.py::test_ema_frozen_student_geometric_decay",
                          "tests/test_netcore.py::test_ema_shrinks_gap_by_ten_thousand")
    report(4, rc == 0, last)


def test_criterion_5_ordering(report, benchmark):
    s = benchmark["summary"]
    sup, nf, et = (s[m]["median_ap50"] for m in ("supervised", "naive_filter", "efficient_teacher"))
    runs = benchmark["runs"]
    wins = sum(runs["efficient_teacher"][k]["final_ap50"] > runs["supervised"][k]["final_ap50"]
               for k in runs["efficient_teacher"])
    report(5, sup <= nf <= et and wins >= 2,
           f"median AP50 supervised {sup:.4f}, naive_filter {nf:.4f}, efficient_teacher {et:.4f}; "
           f"efficient_teacher > supervised in {wins}/{len(SEEDS)} seeds")


def test_criterion_6_pseudo_label_quality(report, benchmark):
    per_seed = [(r["analysis"]["reliable"]["tp"], r["analysis"]["uncertain"]["tp"])
                for r in benchmark["runs"]["efficient_teacher"].values()]
    wins = sum(a > b for a, b in per_seed)
    detail = ", ".join(f"{a:.3f} vs {b:.3f}" for a, b in per_seed)
    report(6, wins >= 2, f"reliable vs uncertain TP fraction per seed: {detail}")


def test_criterion_7_mosaic_count(report, tiny_dataset, tmp_path):
    cfg = RunConfig(data_dir=str(tiny_dataset), out_dir=str(tmp_path / "run"), epochs=2, burn_in_epochs=1)
    history = hs.train(cfg, log=lambda s: None)
    logged = history[0]["mean_gt_per_image"]
    # replay epoch 0: same seed, same sampler, same per-sample generators
    tr = hs.Trainer(cfg)
    steps = tr.directive(0).steps(len(tr.labeled), len(tr.unlabeled), cfg.batch_labeled, cfg.batch_unlabeled)
    counts = [len(im.labels) for s in range(steps) for im in tr.labeled_batch(s)]
    enumerated = sum(counts) / len(counts)
    before = np.mean([len(im.labels) for im in load_split(tiny_dataset, "labeled")])
    report(7, logged == enumerated and logged > before,
           f"pre-Mosaic {before:.3f}, post-Mosaic logged {logged!r}, enumerated {enumerated!r} "
           f"over {len(counts)} images")


def test_criterion_8_convergence(report, benchmark):
    c = benchmark["summary"]["convergence"]
    et, alt = c["median_et_steps"], c["median_alt_steps"]
    report(8, et < alt, f"median steps for efficient_teacher to reach alternating final AP50: {et:.0f} "
                        f"(per seed {c['et_steps_to_alt_final']}) vs alternating {alt:.0f}")


def test_criterion_9_determinism(report):
    rc, _, last = _pytest("tests/test_harness.py::test_fixed_seed_metrics_are_byte_identical",
                          "tests/test_harness.py::test_resume_reproduces_the_uninterrupted_run",
                          "tests/test_harness.py::test_checkpoint_evaluate_identity",
                          "tests/test_netcore.py::test_checkpoint_roundtrip",
                          "tests/test_synthdata.py::test_generate_load_roundtrip",
                          "tests/test_synthdata.py::test_generation_is_deterministic")
    report(9, rc == 0, last)
