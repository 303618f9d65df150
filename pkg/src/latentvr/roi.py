"""ROI supervision for Stage 1: box -> patch indices -> K bucket targets, and
the alignment / generation / combined SFT losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decode import teacher_forced_forward
from .model import TinyVLM


@dataclass(frozen=True)
class RoiBox:
    """Half-open pixel rectangle [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def validate(self, width: int, height: int) -> None:
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError(f"degenerate box {self.as_list()} (zero area)")
        if not (0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height):
            raise ValueError(f"box {self.as_list()} outside image {width}x{height}")

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def from_list(cls, xs: Sequence[int]) -> "RoiBox":
        x0, y0, x1, y1 = (int(v) for v in xs)
        return cls(x0, y0, x1, y1)

    def contains_pixel(self, x: int, y: int) -> bool:
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1


def project_box_to_patches(box: RoiBox, height: int, width: int, patch: int) -> np.ndarray:
    """Row-major indices of every patch cell that overlaps the box."""
    if height % patch or width % patch:
        raise ValueError(f"image {height}x{width} not divisible by patch size {patch}")
    box.validate(width, height)
    wp = width // patch
    c0, c1 = box.x0 // patch, (box.x1 - 1) // patch
    r0, r1 = box.y0 // patch, (box.y1 - 1) // patch
    rows = np.arange(r0, r1 + 1)
    cols = np.arange(c0, c1 + 1)
    return (rows[:, None] * wp + cols[None, :]).reshape(-1).astype(np.int64)


def partition_buckets(M: int, K: int) -> list[tuple[int, int]]:
    """Bucket k spans list positions [floor(kM/K), floor((k+1)M/K)), k = 0..K-1."""
    if M < 0 or K < 1:
        raise ValueError(f"need M >= 0 and K >= 1, got M={M}, K={K}")
    return [((k * M) // K, ((k + 1) * M) // K) for k in range(K)]


def bucket_targets(visual: np.ndarray, indices: np.ndarray, buckets: list[tuple[int, int]]) -> np.ndarray:
    """(K, d) targets: bucket means, empty buckets copying the nearest nonempty
    bucket (earlier one on ties). ``visual`` is treated as a constant."""
    visual = visual.data if isinstance(visual, Tensor) else np.asarray(visual, dtype=np.float64)
    M = len(indices)
    if M == 0:
        raise ValueError("empty ROI after projection: sample unusable for alignment")
    if buckets[-1][1] != M or buckets[0][0] != 0:
        raise ValueError("bucket partition does not cover the index list")
    roi = visual[np.asarray(indices)]
    K = len(buckets)
    filled = [k for k, (a, b) in enumerate(buckets) if b > a]
    out = np.empty((K, visual.shape[-1]))
    for k, (a, b) in enumerate(buckets):
        if b > a:
            out[k] = roi[a:b].mean(axis=0)
    for k, (a, b) in enumerate(buckets):
        if b == a:
            src = min(filled, key=lambda j: (abs(j - k), j))
            out[k] = out[src]
    return out


def roi_targets(visual, box: RoiBox, image_hw: tuple[int, int], patch: int, K: int) -> np.ndarray:
    idx = project_box_to_patches(box, image_hw[0], image_hw[1], patch)
    return bucket_targets(visual, idx, partition_buckets(len(idx), K))


def align_loss(states: Tensor, targets) -> Tensor:
    """(1/K) sum_k ||h_k - v_k||^2; targets carry no gradient.

    Accepts (K, d) or batched (B, K, d) states; batched input returns the
    per-sample losses, shape (B,).
    """
    tgt = Tensor(targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64))
    if states.shape != tgt.shape:
        raise ad.ShapeError(f"align_loss: states {states.shape} vs targets {tgt.shape}")
    return ad.squared_error(states, tgt, axis=-1).mean(axis=-1)


def _check_answer(model: TinyVLM, y: Sequence[int]) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0:
        raise ValueError("answer sequence must be nonempty")
    if np.isin(y, model.vocab.control_tokens).any():
        raise ValueError("control token inside the answer span")
    return y


def generation_loss(
    model: TinyVLM,
    x0,
    y: Sequence[int],
    K: int,
    emit_control: bool = False,
    out=None,
) -> tuple[Tensor, Tensor]:
    """(summed NLL, per-token mean NLL) of answer ``y`` after an in-line latent
    segment. With ``emit_control`` the START prediction after X0 is included."""
    y = _check_answer(model, y)
    if out is None:
        out = teacher_forced_forward(model, x0, K, latents=None, answer_in=y[:-1])
    logp = ad.log_softmax(out.answer_logits, axis=-1)  # (B, T, V)
    B, T = logp.shape[0], len(y)
    picked = logp[:, np.arange(T), y]  # (B, T)
    nll = -picked.sum(axis=-1)
    count = T
    if emit_control:
        lp0 = ad.log_softmax(out.pre_logits[:, 0], axis=-1)
        nll = nll - lp0[:, model.vocab.START_LATENT]
        count += 1
    total = nll.sum() if B == 1 else nll.mean()
    return total, total * (1.0 / count)


@dataclass
class SftLoss:
    total: Tensor
    gen: Tensor
    align: Tensor

    def values(self) -> tuple[float, float, float]:
        return self.total.item(), self.gen.item(), self.align.item()


def combine(gen, align, lam: float):
    """L_gen + lambda * L_align."""
    return gen + align * lam


def sft_loss(model: TinyVLM, sample, lam: float, K: int, emit_control: bool = True) -> SftLoss:
    """Combined Stage-1 objective for one sample (image, roi, question, answer)."""
    return sft_loss_batch(model, [sample], lam, K, emit_control)


def sft_loss_batch(model: TinyVLM, samples: Sequence, lam: float, K: int, emit_control: bool = True,
                   targets: np.ndarray | None = None, align_to_visual: bool = True,
                   align_visual: np.ndarray | None = None) -> SftLoss:
    """Batch mean of the per-sample Stage-1 objective.

    All samples must share question and answer lengths (true for the synthetic
    task). The START control token is teacher forced; latent states come from
    the in-line rollout and stay differentiable. ``targets`` (B, K, d) replaces
    the bucket targets, e.g. to hold them fixed across finite differences.

    With ``align_to_visual=False`` the alignment term is evaluated in a second
    pass whose visual tokens are constants, so it trains the decoder only and
    cannot pull the visual pathway towards whatever the latents find easy to
    match. ``align_visual`` supplies those constants (default: the current
    visual tokens).
    """
    images = np.stack([s.image for s in samples])
    questions = np.stack([np.asarray(s.question, dtype=np.int64) for s in samples])
    answers = np.stack([np.asarray(s.target_tokens, dtype=np.int64) for s in samples])
    visual = model.embed_patches(images)  # (B, N, d)
    q_emb = model.embed_tokens(questions)
    x0 = ad.concat([visual, q_emb], axis=1)
    out = teacher_forced_forward(model, x0, K, latents=None, answer_in=answers[:, :-1])
    gen = generation_loss_batch(model, out, answers, emit_control=emit_control)
    if targets is None:
        targets = batch_targets(model, samples, K, visual)
    states = out.states
    if not align_to_visual and lam != 0:
        fixed = Tensor(visual.data if align_visual is None else align_visual)
        side = teacher_forced_forward(model, ad.concat([fixed, q_emb], axis=1), K, latents=None,
                                      answer_in=np.zeros((len(samples), 0), dtype=np.int64))
        states = side.states
    align = align_loss(states, targets).mean()
    return SftLoss(combine(gen, align, lam), gen, align)


def batch_targets(model: TinyVLM, samples: Sequence, K: int, visual=None) -> np.ndarray:
    """(B, K, d) bucket targets from the current visual tokens."""
    if visual is None:
        visual = model.embed_patches(np.stack([s.image for s in samples]))
    P = model.cfg.patch_size
    return np.stack([roi_targets(visual.data[i], s.roi, s.image.shape, P, K) for i, s in enumerate(samples)])


def generation_loss_batch(model: TinyVLM, out, answers: np.ndarray, emit_control: bool = True) -> Tensor:
    """Batch-mean summed NLL where each row has its own answer tokens."""
    logp = ad.log_softmax(out.answer_logits, axis=-1)  # (B, T, V)
    B, T = answers.shape
    picked = logp[np.arange(B)[:, None], np.arange(T)[None, :], answers]
    nll = -picked.sum(axis=-1)
    if emit_control:
        lp0 = ad.log_softmax(out.pre_logits[:, 0], axis=-1)
        nll = nll - lp0[:, model.vocab.START_LATENT]
    return nll.mean()
