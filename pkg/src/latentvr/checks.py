"""Finite-difference checks of the two training objectives on a small model."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tensor, grad_check
from .model import ModelConfig, TinyVLM
from .roi import batch_targets, sft_loss_batch
from .synth import TaskConfig, generate_dataset
from .vlpo import VlpoConfig, frozen_reference, sample_group, vlpo_loss


def small_setup(seed: int = 0, d: int = 16, layers: int = 2, K: int = 3):
    """A d=16 two-layer model on 28x28 images plus two samples."""
    mcfg = ModelConfig(embed_dim=d, num_layers=layers, num_heads=2, image_side=28, patch_size=7, seed=seed)
    tcfg = TaskConfig(image_side=28, patch_size=7, seed=seed + 100)
    return TinyVLM(mcfg), generate_dataset(tcfg, 2), K


def _broken_square(x: Tensor) -> Tensor:
    """sum(x^2) with a backward that drops the factor 2 (negative control)."""
    data = x.data
    return ad._make(np.array(np.sum(data * data)), (x,), lambda g: (g * data,))


def sft_objective(model: TinyVLM, samples, K: int, lam: float = 1.0, corrupt: bool = False,
                  align_to_visual: bool = True):
    targets = batch_targets(model, samples, K)  # stop-gradient: held fixed
    fixed_visual = None
    if not align_to_visual:
        # the detached visual tokens of the alignment pass are constants too
        fixed_visual = model.embed_patches(np.stack([s.image for s in samples])).data.copy()

    def fn() -> Tensor:
        loss = sft_loss_batch(model, samples, lam, K, targets=targets, align_to_visual=align_to_visual,
                              align_visual=fixed_visual).total
        if corrupt:
            loss = loss + _broken_square(model.params["head.w"])  # head.b starts at zero
        return loss

    return fn


def vlpo_objective(model: TinyVLM, samples, K: int, seed: int = 0, perturb: float = 0.05, corrupt: bool = False):
    """VLPO surrogate with G=2 forced-latent rollouts recorded at theta_old,
    evaluated at a perturbed theta so the latent path is active."""
    cfg = VlpoConfig(G=2, K=K, max_answer_len=2)
    rng = np.random.default_rng(seed)
    s = samples[0]
    group = sample_group(model, s.image, s.question, [s.answer], cfg, rng, force_latent=True)
    for rec, a in zip(group.records, (1.0, -1.0)):
        rec.advantage = a
    group.degenerate = False
    ref = frozen_reference(model)
    prng = np.random.default_rng(seed + 1)
    for name, p in model.params.items():
        p.data += perturb * prng.standard_normal(p.shape) / np.sqrt(max(p.shape[0], 1))

    def fn() -> Tensor:
        loss = vlpo_loss(model, ref, [group], cfg).loss
        if corrupt:
            loss = loss + _broken_square(model.params["head.b"])
        return loss

    return fn


def run_grad_checks(seed: int = 0, tol: float = 1e-3, max_coords: int = 4, step: float = 1e-3,
                    corrupt: bool = False, align_to_visual: bool = False) -> dict[str, GradCheckReport]:
    """Check both objectives over every parameter tensor (a few coordinates
    each). ``corrupt`` adds a term with a wrong backward."""
    reports = {}
    model, samples, K = small_setup(seed)
    params = {k: v for k, v in model.params.items()}
    fn = sft_objective(model, samples, K, corrupt=corrupt, align_to_visual=align_to_visual)
    reports["sft"] = grad_check(fn, params, step=step, tol=tol,
                                max_coords=max_coords, rng=np.random.default_rng(seed))
    model, samples, K = small_setup(seed)
    fn = vlpo_objective(model, samples, K, seed=seed, corrupt=corrupt)
    trainable = {k: v for k, v in model.params.items() if k in model.trainable_names(freeze_visual=True)}
    reports["vlpo"] = grad_check(fn, trainable, step=step, tol=tol, max_coords=max_coords, rng=np.random.default_rng(seed))
    return reports


__all__ = ["run_grad_checks", "small_setup", "sft_objective", "vlpo_objective"]
