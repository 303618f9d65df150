"""End-to-end acceptance checks. Each test prints one PASS/FAIL line, which
is also repeated in the terminal summary.

The training criteria (5 to 8) take most of the runtime; select the rest with
``-m "not slow"``.
"""

import dataclasses
import functools
import subprocess
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from latentvr.checks import run_grad_checks
from latentvr.config import load_config, parse_config
from latentvr.decode import replay_probabilities
from latentvr.model import ModelConfig, TinyVLM, build_context
from latentvr.roi import RoiBox, partition_buckets, project_box_to_patches
from latentvr.synth import TaskConfig, evaluate, generate_dataset, train_test_split
from latentvr.train import attention_fraction, sweep_k, train_sft, train_vlpo
from latentvr.vlpo import VlpoConfig, latent_ratio, sample_group, text_ratios

SEEDS = range(5)


def verdict(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {title} | {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# -- 1. ratio identities ----------------------------------------------------------

def test_criterion_1_ratio_identities():
    t0 = time.perf_counter()
    sample_set = generate_dataset(TaskConfig(seed=11), 13)
    worst_txt = worst_lat = 0.0
    n_traj = n_lat = 0
    for i, s in enumerate(sample_set):
        m = TinyVLM(ModelConfig(embed_dim=16, num_layers=2, num_heads=2, seed=100 + i))
        cfg = VlpoConfig(G=4, K=4, max_answer_len=3)
        g = sample_group(m, s.image, s.question, [s.answer], cfg, np.random.default_rng(i), force_latent=i % 3 != 0)
        for rec in g.records:
            if n_traj == 50:
                break
            n_traj += 1
            worst_txt = max(worst_txt, float(np.max(np.abs(text_ratios(m, g, rec, cfg.temperature) - 1.0))))
            if rec.result.latents is not None:
                n_lat += 1
                for k in range(1, cfg.K + 1):
                    worst_lat = max(worst_lat, abs(latent_ratio(m, g, rec, k, cfg.sigma, cfg.temperature)[1] - 1.0))
    dt = time.perf_counter() - t0
    ok = n_traj == 50 and n_lat > 0 and worst_txt <= 1e-10 and worst_lat <= 1e-10 and dt < 30
    verdict(1, "ratio identities at theta_old", ok,
            f"{n_traj} trajectories ({n_lat} with latents), max|r_txt-1|={worst_txt:.1e}, "
            f"max|r_lat-1|={worst_lat:.1e}, {dt:.1f}s")


# -- 2. gradient fidelity ---------------------------------------------------------

def test_criterion_2_gradient_fidelity():
    t0 = time.perf_counter()
    routed = run_grad_checks(seed=0)
    full = run_grad_checks(seed=0, align_to_visual=True)["sft"]
    dt = time.perf_counter() - t0
    reps = {"sft": routed["sft"], "sft(align to visual)": full, "vlpo": routed["vlpo"]}
    ok = all(r.passed for r in reps.values()) and dt < 120
    verdict(2, "grad_check at rel tol 1e-3 on d=16, 2 layers", ok,
            ", ".join(f"{k} worst {r.max_rel_error:.1e} ({r.worst_input})" for k, r in reps.items()) + f", {dt:.1f}s")


# -- 3. geometry oracle ---------------------------------------------------------------

def _brute_cells(box: RoiBox, side: int, P: int) -> list[int]:
    cells = []
    for r in range(side // P):
        for c in range(side // P):
            px = {(x, y) for x in range(c * P, (c + 1) * P) for y in range(r * P, (r + 1) * P)}
            if any(box.x0 <= x < box.x1 and box.y0 <= y < box.y1 for x, y in px):
                cells.append(r * (side // P) + c)
    return cells


def _brute_buckets(M: int, K: int) -> list[tuple[int, int]]:
    # bucket k owns list position j iff k*M/K <= j < (k+1)*M/K after flooring both ends
    owner = []
    for j in range(M):
        ks = [k for k in range(K) if int(Fraction(k * M, K)) <= j < int(Fraction((k + 1) * M, K))]
        owner.append(ks)
    out = []
    for k in range(K):
        mine = [j for j in range(M) if k in owner[j]]
        start = int(Fraction(k * M, K))
        out.append((mine[0], mine[-1] + 1) if mine else (start, start))
    return out


def test_criterion_3_geometry_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    side, P = 56, 7
    bad_boxes = 0
    for _ in range(1000):
        x0, y0 = int(rng.integers(0, side)), int(rng.integers(0, side))
        box = RoiBox(x0, y0, int(rng.integers(x0 + 1, side + 1)), int(rng.integers(y0 + 1, side + 1)))
        bad_boxes += list(project_box_to_patches(box, side, side, P)) != _brute_cells(box, side, P)
    bad_parts = sum(partition_buckets(M, K) != _brute_buckets(M, K) for M in range(51) for K in range(1, 17))
    dt = time.perf_counter() - t0
    verdict(3, "projection and bucket partition vs brute force", bad_boxes == 0 and bad_parts == 0 and dt < 10,
            f"1000 boxes ({bad_boxes} mismatches), 816 (M,K) pairs ({bad_parts} mismatches), {dt:.1f}s")


# -- 4. replay fidelity ---------------------------------------------------------------

def test_criterion_4_replay_fidelity():
    t0 = time.perf_counter()
    data = generate_dataset(TaskConfig(seed=12), 25)
    n = mismatched = 0
    for i, s in enumerate(data):
        m = TinyVLM(ModelConfig(seed=200 + i))
        cfg = VlpoConfig(G=4, K=2 + i % 7, max_answer_len=3, temperature=(0.9, 1.0, 1.3)[i % 3])
        g = sample_group(m, s.image, s.question, [s.answer], cfg, np.random.default_rng(i), force_latent=i % 2 == 0)
        x0 = build_context(m.embed_patches(s.image), s.question)
        for rec in g.records:
            n += 1
            mismatched += not np.array_equal(replay_probabilities(m, x0, rec.result), np.array(rec.result.sampled_probs))
    dt = time.perf_counter() - t0
    verdict(4, "teacher-forced replay equals recorded probabilities bitwise", n == 100 and mismatched == 0 and dt < 60,
            f"{n} trajectories, {mismatched} mismatches, {dt:.1f}s")


# -- 5. stage-1 learning ----------------------------------------------------------------

@pytest.fixture(scope="module")
def default_run():
    cfg = load_config(None)
    t0 = time.perf_counter()
    train, test = train_test_split(cfg.task)
    res = train_sft(cfg, train, test)
    rep = evaluate(res.model, test, K=cfg.K)
    return cfg, res.model, test, rep, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_5_stage_one_learning(default_run):
    cfg, _, test, rep, dt = default_run
    ok = rep["accuracy"] >= 0.90 and rep["format_rate"] >= 0.99 and dt < 600
    verdict(5, "default config Stage-1 accuracy and format", ok,
            f"accuracy {rep['accuracy']:.3f} (>= 0.90), format {rep['format_rate']:.3f} (>= 0.99), "
            f"n={len(test)}, {dt:.0f}s")


# -- 6. ROI ablation ----------------------------------------------------------------------

ATTENTION: dict[str, list] = {"trained": [], "untrained": []}
ATTENTION_STEPS = 50


@pytest.mark.slow
def test_criterion_6_roi_ablation():
    t0 = time.perf_counter()
    base = load_config(None)
    train, test = train_test_split(base.task)
    acc = {0.0: [], 1.0: []}
    align = {0.0: [], 1.0: []}
    for seed in SEEDS:
        for lam in (0.0, 1.0):
            cfg = parse_config(f"sft.lam = {lam}\nsft.eval_size = 50\nseed = {seed}\nmodel.seed = {seed}\n")
            res = train_sft(cfg, train, test)
            acc[lam].append(evaluate(res.model, test, K=cfg.K)["accuracy"])
            align[lam].append(res.history[-1]["align"])
            if lam == 1.0:
                # side measurement for the attention-fraction test; excluded from this criterion's clock
                t1 = time.perf_counter()
                tuned = train_vlpo(cfg, res.model, train, steps=ATTENTION_STEPS).model
                ATTENTION["trained"].append(attention_fraction(tuned, test[:50], K=cfg.K))
                ATTENTION["untrained"].append(attention_fraction(TinyVLM(cfg.model), test[:50], K=cfg.K))
                t0 += time.perf_counter() - t1
    dt = time.perf_counter() - t0
    a0, a1 = np.mean(acc[0.0]), np.mean(acc[1.0])
    l0, l1 = np.mean(align[0.0]), np.mean(align[1.0])
    ok = a1 >= a0 + 0.01 and l1 < l0 and dt < 3600
    verdict(6, "lambda=1 beats lambda=0 by >= 1 point with lower align", ok,
            f"acc lam1 {a1:.3f} vs lam0 {a0:.3f} (per seed {acc[1.0]} vs {acc[0.0]}), "
            f"align lam1 {l1:.3f} vs lam0 {l0:.3f}, {dt:.0f}s")


@pytest.mark.slow
def test_trained_attention_fraction_differs_from_untrained():
    if len(ATTENTION["trained"]) < len(SEEDS):
        pytest.skip("needs the criterion 6 runs")
    diff = np.array(ATTENTION["trained"]) - np.array(ATTENTION["untrained"])  # (seeds, layers)
    se = diff.std(axis=0, ddof=1) / np.sqrt(len(diff))
    print("layer\tmean shift\tse\n" + "\n".join(f"{i}\t{m:+.4f}\t{e:.4f}" for i, (m, e) in enumerate(zip(diff.mean(0), se))))
    assert np.any(np.abs(diff.mean(axis=0)) > 3 * se)


# -- 7. VLPO improvement ------------------------------------------------------------------

UNDERTRAINED_EPOCHS = 4


@functools.lru_cache(maxsize=None)
def undertrained(seed: int):
    """A Stage-1 model stopped after a few epochs (well short of convergence)."""
    cfg = parse_config(f"sft.epochs = {UNDERTRAINED_EPOCHS}\nsft.eval_size = 50\nseed = {seed}\nmodel.seed = {seed}\n")
    train, test = train_test_split(cfg.task)
    model = train_sft(cfg, train, test).model
    return cfg, model, train, test


@pytest.mark.slow
def test_criterion_7_vlpo_improvement():
    cfg, init, train, test = undertrained(0)
    start = evaluate(init, test, K=cfg.K)["accuracy"]
    t0 = time.perf_counter()
    res = train_vlpo(cfg, init, train)
    dt = time.perf_counter() - t0
    acc = [r["acc_reward"] for r in res.history]
    kls = [r["kl"] for r in res.history if r["kl"] is not None]
    lead, trail = float(np.mean(acc[:50])), float(np.mean(acc[-50:]))
    kl = float(np.mean(kls))
    ok = (start <= 0.60 and len(acc) == 300 and trail - lead >= 0.05 and kl < cfg.stage2.kl_ceiling
          and cfg.vlpo.beta == 0.04 and dt < 1200)
    verdict(7, "300 VLPO steps improve accuracy reward at bounded KL", ok,
            f"init accuracy {start:.3f} (<= 0.60), acc reward lead50 {lead:.3f} -> trail50 {trail:.3f} "
            f"(gain {trail - lead:+.3f}), mean KL {kl:.4f} (< {cfg.stage2.kl_ceiling}), max KL {max(kls):.4f}, {dt:.0f}s")


# -- 8. VLPO vs GRPO ----------------------------------------------------------------------

MODE_STEPS = 150


@pytest.mark.slow
def test_criterion_8_vlpo_vs_grpo():
    t0 = time.perf_counter()
    final = {(inner, mode): [] for inner in (1, 2) for mode in ("vlpo", "grpo")}
    for seed in SEEDS:
        cfg, init, train, test = undertrained(seed)
        for inner, mode in final:
            run_cfg = dataclasses.replace(cfg, vlpo=dataclasses.replace(cfg.vlpo, inner_epochs=inner))
            model = train_vlpo(run_cfg, init, train, steps=MODE_STEPS, mode=mode).model
            final[inner, mode].append(evaluate(model, test, K=cfg.K)["accuracy"])
    dt = time.perf_counter() - t0
    mean = {key: float(np.mean(v)) for key, v in final.items()}
    # the default schedule (one pass per batch) is the asserted comparison; two passes are reported only
    ok = mean[1, "vlpo"] >= mean[1, "grpo"]
    verdict(8, "vlpo mean final accuracy >= grpo over 5 seeds", ok,
            f"default (1 inner epoch): vlpo {mean[1, 'vlpo']:.3f} {final[1, 'vlpo']} vs grpo {mean[1, 'grpo']:.3f} "
            f"{final[1, 'grpo']}; 2 inner epochs (reported): vlpo {mean[2, 'vlpo']:.3f} {final[2, 'vlpo']} vs "
            f"grpo {mean[2, 'grpo']:.3f} {final[2, 'grpo']}; {MODE_STEPS} steps per run, {dt:.0f}s")


# -- 9. latent-budget sweep ---------------------------------------------------------------

@pytest.mark.slow
def test_criterion_9_k_sweep(default_run):
    cfg, model, test, _, _ = default_run
    assert cfg.K == 8
    ks = [2, 4, 8, 14, 16]
    rows = sweep_k(model, test, ks)
    again = sweep_k(model, test, ks)
    table = "  ".join(f"K={k}: {a:.3f}" for k, a in rows)
    print("K\taccuracy\n" + "\n".join(f"{k}\t{a:.4f}" for k, a in rows))
    ok = [k for k, _ in rows] == ks and all(np.isfinite(a) for _, a in rows) and rows == again
    verdict(9, "K sweep well defined and deterministic", ok, table)


# -- 10. invariant suite ------------------------------------------------------------------

def test_criterion_10_invariant_suite():
    here = Path(__file__).parent
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", str(here),
                           "--ignore", str(Path(__file__))], capture_output=True, text=True)
    dt = time.perf_counter() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()[-200:]
    verdict(10, "invariant suite passes in < 15 min", proc.returncode == 0 and dt < 900, f"{tail}, {dt:.0f}s")
