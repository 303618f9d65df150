"""Visual-Latent Policy Optimization.

Group sampling from a frozen behaviour policy, outcome rewards, group-normalised
advantages, replay-based token ratios, Gaussian-surrogate latent ratios, the
clipped joint objective with an exact KL penalty, and the optimizer step.
``mode="grpo"`` drops every latent term.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .decode import DecodeResult, LatentDivergence, context_forward, decode_with_latent, teacher_forced_forward
from .model import TinyVLM, build_context, policy_log_distribution
from .optim import AdamW

log = logging.getLogger(__name__)

_TINY = 1e-300


@dataclass
class VlpoConfig:
    G: int = 8
    clip_eps: float = 0.2
    adv_eps: float = 1e-4
    sigma: float = 1.0
    beta: float = 0.04
    temperature: float = 0.9
    mode: str = "vlpo"
    K: int = 8
    max_answer_len: int = 4
    inner_epochs: int = 1
    stepwise_replay: bool = True

    def validate(self) -> None:
        if self.G < 2:
            raise ValueError("G must be >= 2")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.mode not in ("vlpo", "grpo"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.inner_epochs < 1:
            raise ValueError("inner_epochs must be >= 1")


@dataclass
class RolloutRecord:
    input_id: int
    result: DecodeResult
    reward: float = 0.0
    r_acc: int = 0
    r_fmt: int = 0
    advantage: float = 0.0

    def to_json(self) -> str:
        return json.dumps({
            "input_id": self.input_id, "reward": self.reward, "r_acc": self.r_acc, "r_fmt": self.r_fmt,
            "advantage": self.advantage, "decode": self.result.to_dict(),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RolloutRecord":
        d = json.loads(line)
        return cls(int(d["input_id"]), DecodeResult.from_dict(d["decode"]), float(d["reward"]), int(d["r_acc"]),
                   int(d["r_fmt"]), float(d["advantage"]))


@dataclass
class TrajectoryGroup:
    input_id: int
    image: np.ndarray
    question: list[int]
    gold: list[int]
    records: list[RolloutRecord] = field(default_factory=list)
    degenerate: bool = False

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.records], dtype=np.float64)

    @property
    def reward_mean(self) -> float:
        return float(self.rewards.mean())

    @property
    def reward_std(self) -> float:
        return float(self.rewards.std())


def write_rollouts(path, groups: Sequence[TrajectoryGroup]) -> None:
    with open(path, "w") as fh:
        for g in groups:
            for r in g.records:
                fh.write(r.to_json() + "\n")


def read_rollouts(path) -> list[RolloutRecord]:
    with open(path) as fh:
        return [RolloutRecord.from_json(line) for line in fh if line.strip()]


# -- rewards and advantages -------------------------------------------------

def compute_reward(result: DecodeResult, gold: Sequence[int], space_id: int = 4) -> tuple[float, int, int]:
    """(R, R_acc, R_fmt) with R = R_acc + R_fmt."""
    if not len(gold):
        raise ValueError("gold answer must be nonempty")
    span = [t for t in result.answer_span() if t != space_id]
    ref = [int(t) for t in gold if t != space_id]
    r_acc = int(span == ref)
    r_fmt = int(result.has_start and result.has_end)
    return float(r_acc + r_fmt), r_acc, r_fmt


def normalize_advantages(rewards: Sequence[float], eps0: float) -> np.ndarray:
    """(R - mean) / (population std + eps0)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least two rewards per group")
    centred = r - r.mean()
    if not np.any(centred):
        return np.zeros_like(r)
    return centred / (r.std() + eps0)


# -- sampling ---------------------------------------------------------------

def sample_group(
    model: TinyVLM,
    image: np.ndarray,
    question: Sequence[int],
    gold: Sequence[int],
    cfg: VlpoConfig,
    rng: np.random.Generator,
    input_id: int = 0,
    force_latent: bool = False,
) -> TrajectoryGroup:
    """G decodes of one input under the current (behaviour) parameters, each
    with its own child random stream."""
    if cfg.G < 2:
        raise ValueError("G must be >= 2")
    x0 = build_context(model.embed_patches(image), question)
    ctx = context_forward(model, x0)
    group = TrajectoryGroup(input_id, image, list(question), list(gold))
    for stream in rng.spawn(cfg.G):
        res = None
        for attempt in range(2):
            try:
                res = decode_with_latent(model, x0, cfg.K, cfg.temperature, cfg.max_answer_len,
                                         stream if attempt == 0 else stream.spawn(1)[0],
                                         force_latent=force_latent, context=ctx)
                break
            except LatentDivergence as exc:
                log.warning("input %d: %s (attempt %d)", input_id, exc, attempt)
        if res is None:
            group.degenerate = True
            continue
        R, acc, fmt = compute_reward(res, gold, model.vocab.SPACE)
        group.records.append(RolloutRecord(input_id, res, R, acc, fmt))
    if len(group.records) < 2:
        group.degenerate = True
    else:
        for rec, a in zip(group.records, normalize_advantages(group.rewards, cfg.adv_eps)):
            rec.advantage = float(a)
    return group


# -- replay ------------------------------------------------------------------

def _structure(res: DecodeResult) -> tuple:
    return (res.has_start, res.forced_start, len(res.prefix_tokens), len(res.answer_tokens))


@dataclass
class ReplayBatch:
    records: list[RolloutRecord]
    logp_all: Tensor  # (B, n_tok, V) log-probs at the sampled positions
    picked: Tensor  # (B, n_tok) log-prob of each sampled token
    tokens: np.ndarray  # (B, n_tok)
    old_logp: np.ndarray  # (B, n_tok)
    kl_pos: np.ndarray  # positions (into n_tok) that enter the KL
    mu: Tensor | None  # (B, K, d)
    latents: np.ndarray | None  # (B, K, d)


def _embed_x0(model: TinyVLM, visual: np.ndarray, question: Sequence[int], B: int) -> Tensor:
    vis = Tensor(np.broadcast_to(visual, (B,) + visual.shape))
    q = model.embed_tokens(np.tile(np.asarray(question, dtype=np.int64), (B, 1)))
    return ad.concat([vis, q], axis=1)


def replay_records(model: TinyVLM, visual: np.ndarray, question: Sequence[int], records: Sequence[RolloutRecord],
                   temperature: float, stepwise: bool = True) -> list[ReplayBatch]:
    """Teacher-forced replay of recorded trajectories with their latents
    patched in, batched over records of identical structure."""
    buckets: dict[tuple, list[RolloutRecord]] = {}
    for rec in records:
        buckets.setdefault(_structure(rec.result), []).append(rec)
    vocab = model.vocab
    out = []
    for key, recs in buckets.items():
        has_start = key[0]
        B = len(recs)
        x0 = _embed_x0(model, visual, question, B)
        r0 = recs[0].result
        if has_start:
            pre = np.array([r.result.teacher_inputs(vocab.START_LATENT)[0] for r in recs], dtype=np.int64)
            ans = np.array([r.result.answer_tokens[:-1] for r in recs], dtype=np.int64).reshape(B, -1)
            lat = np.stack([r.result.latents for r in recs])
            tf = teacher_forced_forward(model, x0, r0.K, latents=Tensor(lat), answer_in=ans, pre_tokens=pre,
                                        stepwise=stepwise)
            parts = []
            n_pref = len(r0.prefix_tokens)
            if n_pref:
                parts.append(tf.pre_logits[:, :n_pref])
            if r0.answer_tokens:
                parts.append(tf.answer_logits[:, :len(r0.answer_tokens)])
            lg = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
            kl_start = n_pref
            mu = tf.states
        else:
            toks = np.array([r.result.prefix_tokens[:-1] for r in recs], dtype=np.int64).reshape(B, -1)
            tf = teacher_forced_forward(model, x0, 0, answer_in=toks, pre_tokens=np.zeros((B, 0), dtype=np.int64),
                                        stepwise=stepwise)
            lg = tf.answer_logits[:, :len(r0.prefix_tokens)]
            kl_start = 0
            lat, mu = None, None
        tokens = np.array([r.result.sampled_tokens for r in recs], dtype=np.int64)
        old = np.log(np.maximum(np.array([r.result.sampled_probs for r in recs], dtype=np.float64), _TINY))
        logp_all = policy_log_distribution(lg, temperature)
        n_tok = tokens.shape[1]
        picked = logp_all[np.arange(B)[:, None], np.arange(n_tok)[None, :], tokens]
        kl_pos = np.array([j for j in range(kl_start, n_tok) if tokens[0, j] not in vocab.control_tokens], dtype=np.int64)
        out.append(ReplayBatch(recs, logp_all, picked, tokens, old, kl_pos, mu, lat))
    return out


def clipped_term(r, adv, eps: float):
    """min(r * A, clip(r, 1 - eps, 1 + eps) * A); Tensors stay differentiable."""
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if isinstance(r, Tensor):
        return ad.minimum(r * adv, ad.clip(r, 1.0 - eps, 1.0 + eps) * adv)
    r = np.asarray(r, dtype=np.float64)
    res = np.minimum(r * adv, np.clip(r, 1.0 - eps, 1.0 + eps) * adv)
    return float(res) if res.ndim == 0 else res


def latent_deviation(mu: Tensor, recorded: np.ndarray) -> Tensor:
    """D_k = ||h_k - mu_k||^2 along the last axis."""
    return ad.squared_error(Tensor(recorded), mu, axis=-1)


def latent_ratio_from_deviation(D, sigma: float):
    """exp(-D / (2 sigma^2))."""
    if isinstance(D, Tensor):
        return ad.exp(D * (-0.5 / sigma**2))
    return np.exp(-np.asarray(D, dtype=np.float64) / (2.0 * sigma**2))


def exact_kl(logp: Tensor, ref_logp: np.ndarray) -> Tensor:
    """sum_v p(v) (log p(v) - log q(v)) along the last axis.

    ``logp`` must be normalised log-probabilities (a log-softmax output). The
    backward pass returns p * (log p - log q), dropping the +p component that
    the log-softmax backward annihilates anyway; this keeps the gradient
    exactly zero when the two distributions coincide.
    """
    p = np.exp(logp.data)
    d = logp.data - np.asarray(ref_logp, dtype=np.float64)
    return ad._make(np.sum(p * d, axis=-1), (logp,), lambda g: (np.expand_dims(g, -1) * p * d,))


# -- single-record accessors -------------------------------------------------

def _replay_one(model: TinyVLM, group: TrajectoryGroup, rec: RolloutRecord, temperature: float) -> ReplayBatch:
    visual = model.embed_patches(group.image).data
    return replay_records(model, visual, group.question, [rec], temperature)[0]


def text_ratios(model: TinyVLM, group: TrajectoryGroup, rec: RolloutRecord, temperature: float) -> np.ndarray:
    rb = _replay_one(model, group, rec, temperature)
    logp = rb.picked.data[0]
    if np.any(logp < math.log(_TINY)):
        log.info("pi_theta below 1e-300 for input %d; ratio clamped to 0", rec.input_id)
    return np.where(logp < math.log(_TINY), 0.0, np.exp(logp - rb.old_logp[0]))


def text_ratio(model: TinyVLM, group: TrajectoryGroup, rec: RolloutRecord, t: int, temperature: float) -> float:
    """pi_theta(y_t | replayed context) / pi_old(y_t), sampled-token index t."""
    return float(text_ratios(model, group, rec, temperature)[t])


def latent_ratio(model: TinyVLM, group: TrajectoryGroup, rec: RolloutRecord, k: int, sigma: float,
                 temperature: float = 1.0) -> tuple[float, float]:
    """(D_k, r_lat) for 1-based latent step k."""
    if rec.result.latents is None:
        raise ValueError("record has no latent trajectory")
    rb = _replay_one(model, group, rec, temperature)
    D = latent_deviation(rb.mu, rb.latents).data[0, k - 1]
    if not np.isfinite(D):
        raise FloatingPointError(f"non-finite latent mean at step {k}")
    return float(D), float(latent_ratio_from_deviation(D, sigma))


def kl_to_reference(model: TinyVLM, ref: TinyVLM, group: TrajectoryGroup, rec: RolloutRecord,
                    temperature: float) -> float:
    rb = _replay_one(model, group, rec, temperature)
    rr = _replay_one(ref, group, rec, temperature)
    if not len(rb.kl_pos):
        return 0.0
    return float(exact_kl(rb.logp_all[:, rb.kl_pos], rr.logp_all.data[:, rr.kl_pos]).mean().item())


# -- objective ---------------------------------------------------------------

@dataclass
class LossParts:
    loss: Tensor
    n_traj: int
    txt: float
    lat: float
    kl: float
    clip_txt: float
    clip_lat: float | None
    mean_D: float | None


def vlpo_loss(model: TinyVLM, ref: TinyVLM, groups: Sequence[TrajectoryGroup], cfg: VlpoConfig,
              include_latent: bool | None = None) -> LossParts:
    """Negated joint objective, averaged over trajectories of non-degenerate groups."""
    include_latent = cfg.mode == "vlpo" if include_latent is None else include_latent
    eps, tau = cfg.clip_eps, cfg.temperature
    terms: list[Tensor] = []
    txt_sum = lat_sum = kl_sum = 0.0
    clip_txt = [0, 0]
    clip_lat = [0, 0]
    D_vals: list[np.ndarray] = []
    for g in groups:
        if g.degenerate or len(g.records) < 2:
            continue
        visual = model.embed_patches(g.image).data
        ref_visual = ref.embed_patches(g.image).data
        ref_batches = {id(rb.records[0]): rb
                       for rb in replay_records(ref, ref_visual, g.question, g.records, tau, cfg.stepwise_replay)}
        for rb in replay_records(model, visual, g.question, g.records, tau, cfg.stepwise_replay):
            adv = np.array([r.advantage for r in rb.records])[:, None]
            ratio = ad.exp(rb.picked - Tensor(rb.old_logp))
            l_txt = clipped_term(ratio, adv, eps).sum(axis=-1)
            clip_txt[0] += int(np.sum(np.abs(ratio.data - 1.0) > eps))
            clip_txt[1] += ratio.size
            J = l_txt
            txt_sum += float(l_txt.data.sum())
            if include_latent and rb.mu is not None:
                D = latent_deviation(rb.mu, rb.latents)
                r_lat = latent_ratio_from_deviation(D, cfg.sigma)
                l_lat = clipped_term(r_lat, adv, eps).sum(axis=-1)
                J = J + l_lat
                lat_sum += float(l_lat.data.sum())
                clip_lat[0] += int(np.sum(np.abs(r_lat.data - 1.0) > eps))
                clip_lat[1] += r_lat.size
                D_vals.append(D.data.reshape(-1))
            if len(rb.kl_pos):
                ref_rb = ref_batches[id(rb.records[0])]
                kl = exact_kl(rb.logp_all[:, rb.kl_pos], ref_rb.logp_all.data[:, rb.kl_pos]).mean(axis=-1)
                J = J - kl * cfg.beta
                kl_sum += float(kl.data.sum())
            terms.append(J.sum())
    n = sum(len(g.records) for g in groups if not (g.degenerate or len(g.records) < 2))
    if not terms:
        raise ValueError("no non-degenerate group to optimise")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    loss = total * (-1.0 / n)
    return LossParts(
        loss=loss, n_traj=n, txt=txt_sum / n, lat=lat_sum / n, kl=kl_sum / n,
        clip_txt=clip_txt[0] / max(clip_txt[1], 1),
        clip_lat=(clip_lat[0] / max(clip_lat[1], 1)) if include_latent else None,
        mean_D=float(np.concatenate(D_vals).mean()) if D_vals else (0.0 if include_latent else None),
    )


def vlpo_step(model: TinyVLM, ref: TinyVLM, groups: Sequence[TrajectoryGroup], cfg: VlpoConfig,
              opt: AdamW) -> dict:
    """One optimizer update on the clipped objective; returns step metrics."""
    live = [g for g in groups if not g.degenerate and len(g.records) >= 2]
    if not live:
        raise ValueError("no non-degenerate group to optimise")
    opt.zero_grad()
    parts = None
    with Tape() as tape:
        try:
            parts = vlpo_loss(model, ref, live, cfg)
        except FloatingPointError as exc:
            log.warning("VLPO loss evaluation failed: %s", exc)
    value = parts.loss.item() if parts is not None else math.nan
    applied = False
    if math.isfinite(value):
        tape.backward(parts.loss)
        applied = opt.step()
    else:
        log.warning("non-finite VLPO loss; step skipped")
    rewards = np.concatenate([g.rewards for g in groups if g.records])
    accs = np.concatenate([[r.r_acc for r in g.records] for g in groups if g.records])
    fmts = np.concatenate([[r.r_fmt for r in g.records] for g in groups if g.records])
    return {
        "reward_mean": float(rewards.mean()),
        "reward_std": float(rewards.std()),
        "acc_reward": float(accs.mean()),
        "fmt_reward": float(fmts.mean()),
        "kl": parts.kl if parts else math.nan,
        "clip_frac_txt": parts.clip_txt if parts else math.nan,
        "clip_frac_lat": parts.clip_lat if parts else None,
        "mean_D": parts.mean_D if parts else None,
        "loss": value,
        "applied": applied,
    }


def frozen_reference(model: TinyVLM) -> TinyVLM:
    ref = model.clone()
    for p in ref.params.values():
        p.requires_grad = False
        p.grad = None
    return ref
