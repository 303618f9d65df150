"""Training loops for both stages plus the inference diagnostics."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tape
from .config import TrainConfig
from .decode import decode_with_latent, replay
from .model import TinyVLM, build_context
from .optim import AdamW, OptimizerConfig
from .roi import sft_loss_batch
from .synth import SynthSample, evaluate
from .vlpo import TrajectoryGroup, VlpoConfig, frozen_reference, sample_group, vlpo_step

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


class MetricsWriter:
    """Append-only stream, one JSON object per line; also kept in memory."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.rows: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, row: dict) -> None:
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def _rounded(x: float | None, nd: int = 12):
    return None if x is None else round(float(x), nd)


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, size):
        yield perm[i:i + size]


# -- Stage 1 --------------------------------------------------------------------

@dataclass
class SftResult:
    model: TinyVLM
    history: list[dict] = field(default_factory=list)


def train_sft(
    cfg: TrainConfig,
    train: Sequence[SynthSample],
    test: Sequence[SynthSample],
    metrics_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    epochs: int | None = None,
    model: TinyVLM | None = None,
) -> SftResult:
    """Minimise gen + lam * align with teacher-forced START and in-line latents."""
    epochs = cfg.sft.epochs if epochs is None else epochs
    if not train:
        raise ValueError("empty training split")
    model = model if model is not None else TinyVLM(cfg.model)
    opt = AdamW(model.params, OptimizerConfig(lr=cfg.sft.lr, weight_decay=cfg.sft.weight_decay,
                                              grad_clip=cfg.sft.grad_clip))
    rng = np.random.default_rng([cfg.seed, 1])
    writer = MetricsWriter(metrics_path)
    eval_set = list(test)[: cfg.sft.eval_size]
    last_good = {k: v.data.copy() for k, v in model.params.items()}
    for epoch in range(epochs):
        sums = np.zeros(3)
        count = 0
        for idx in _batches(len(train), cfg.sft.batch_size, rng):
            batch = [train[int(i)] for i in idx]
            opt.zero_grad()
            with Tape() as tape:
                loss = sft_loss_batch(model, batch, cfg.sft.lam, cfg.K, align_to_visual=cfg.sft.align_to_visual)
            vals = loss.values()
            if not all(math.isfinite(v) for v in vals):
                for k, v in last_good.items():
                    model.params[k].data[...] = v
                if checkpoint_path is not None:
                    model.save(checkpoint_path)
                raise TrainingAborted(f"non-finite SFT loss at epoch {epoch}; last good checkpoint kept")
            tape.backward(loss.total)
            opt.step()
            sums += np.array(vals) * len(batch)
            count += len(batch)
        last_good = {k: v.data.copy() for k, v in model.params.items()}
        row = {"epoch": epoch, "loss": _rounded(sums[0] / count), "gen": _rounded(sums[1] / count),
               "align": _rounded(sums[2] / count)}
        if eval_set:
            ev = evaluate(model, eval_set, K=cfg.K)
            row.update(accuracy=ev["accuracy"], format_rate=ev["format_rate"])
        writer.write(row)
        log.info("sft epoch %d %s", epoch, row)
    if checkpoint_path is not None:
        model.save(checkpoint_path)
    return SftResult(model, writer.rows)


# -- Stage 2 --------------------------------------------------------------------

@dataclass
class VlpoResult:
    model: TinyVLM
    history: list[dict] = field(default_factory=list)


def train_vlpo(
    cfg: TrainConfig,
    init: TinyVLM,
    train: Sequence[SynthSample],
    metrics_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    rollout_path: str | Path | None = None,
    steps: int | None = None,
    mode: str | None = None,
) -> VlpoResult:
    """Group-sampled policy optimisation from ``init``, which also serves as
    the frozen reference. The visual pathway is not updated."""
    vcfg = VlpoConfig(**{**cfg.vlpo.__dict__, "K": cfg.K, **({"mode": mode} if mode else {})})
    vcfg.validate()
    steps = cfg.stage2.steps if steps is None else steps
    model = init.clone()
    ref = frozen_reference(init)
    s2 = cfg.stage2
    opt = AdamW(model.params, OptimizerConfig(lr=s2.lr, weight_decay=s2.weight_decay, grad_clip=s2.grad_clip),
                trainable=model.trainable_names(freeze_visual=True))
    rng = np.random.default_rng([cfg.seed, 2])
    writer = MetricsWriter(metrics_path)
    if rollout_path is not None:
        Path(rollout_path).write_text("")
    for step in range(steps):
        picks = rng.choice(len(train), size=s2.prompts_per_step, replace=False)
        groups: list[TrajectoryGroup] = []
        for i in picks:
            s = train[int(i)]
            groups.append(sample_group(model, s.image, s.question, [s.answer], vcfg, rng, input_id=int(i)))
        if rollout_path is not None:
            with open(rollout_path, "a") as fh:
                for g in groups:
                    for r in g.records:
                        fh.write(r.to_json() + "\n")
        inner = []
        for _ in range(vcfg.inner_epochs):
            if all(g.degenerate for g in groups):
                break
            inner.append(vlpo_step(model, ref, groups, vcfg, opt))
        rewards = np.concatenate([g.rewards for g in groups if g.records])
        row = {
            "step": step,
            "reward_mean": _rounded(rewards.mean()),
            "reward_std": _rounded(rewards.std()),
            "acc_reward": _rounded(np.mean([r.r_acc for g in groups for r in g.records])),
            "fmt_reward": _rounded(np.mean([r.r_fmt for g in groups for r in g.records])),
        }
        if inner:
            first = inner[0]
            row.update(
                kl=_rounded(first["kl"]),
                clip_frac_txt=_rounded(np.mean([m["clip_frac_txt"] for m in inner])),
                clip_frac_lat=None if first["clip_frac_lat"] is None
                else _rounded(np.mean([m["clip_frac_lat"] for m in inner])),
                mean_D=None if first["mean_D"] is None else _rounded(np.mean([m["mean_D"] for m in inner])),
                loss=_rounded(first["loss"]),
            )
        else:
            row.update(kl=None, clip_frac_txt=None, clip_frac_lat=None, mean_D=None, loss=None)
        writer.write(row)
    if checkpoint_path is not None:
        model.save(checkpoint_path)
    return VlpoResult(model, writer.rows)


def parameter_drift(a: TinyVLM, b: TinyVLM) -> float:
    return max(float(np.max(np.abs(a.params[k].data - b.params[k].data))) for k in a.params)


# -- diagnostics ----------------------------------------------------------------

def sweep_k(model: TinyVLM, dataset: Sequence[SynthSample], ks: Sequence[int], force_latent: bool = False,
            max_answer_len: int = 4) -> list[tuple[int, float]]:
    """Greedy accuracy at each inference-time latent budget."""
    seen: list[int] = []
    for k in ks:
        if int(k) < 1:
            raise ValueError(f"latent budget must be >= 1, got {k}")
        if int(k) in seen:
            log.warning("duplicate K=%d dropped", k)
            continue
        seen.append(int(k))
    return [(k, evaluate(model, dataset, K=k, max_answer_len=max_answer_len, force_latent=force_latent)["accuracy"])
            for k in seen]


def visual_fraction(attn: Sequence[np.ndarray], rows: np.ndarray, n_visual: int) -> list[float]:
    """Per layer: mean over query ``rows`` of attention mass on the first
    ``n_visual`` key positions divided by total mass."""
    out = []
    for a in attn:  # (B, heads, n_query, n_key)
        sel = a[:, :, rows, :]
        total = sel.sum(axis=-1)
        vis = sel[..., :n_visual].sum(axis=-1)
        out.append(float(np.mean(vis / total)))
    return out


def attention_fraction(model: TinyVLM, dataset: Sequence[SynthSample], K: int, max_answer_len: int = 4,
                       force_latent: bool = True) -> list[float]:
    """Visual-attention fraction at the answer positions of greedy decodes,
    averaged over ``dataset``."""
    n_vis = model.cfg.num_patches
    per_sample = []
    rng = np.random.default_rng(0)
    for s in dataset:
        x0 = build_context(model.embed_patches(s.image), s.question)
        res = decode_with_latent(model, x0, K, 0.0, max_answer_len, rng, force_latent=force_latent)
        out = replay(model, x0, res, stepwise=False, return_attn=True)
        n_ans = len(res.answer_tokens) if res.has_start else len(res.prefix_tokens)
        rows = out.positions["answer"][:max(n_ans, 1)]
        # answer positions are absolute; attention rows are indexed the same way in a block replay
        per_sample.append(visual_fraction(out.attn, rows, n_vis))
    return [float(v) for v in np.mean(per_sample, axis=0)]
