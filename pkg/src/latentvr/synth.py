"""Synthetic grounded VQA: "what glyph is in the marked region".

Each image carries one target glyph inside a shaded rectangle (the ROI) and
two or more distractor glyphs of other classes outside it. Only the ROI
identifies which glyph is asked about, so answering requires grounding.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .decode import DecodeResult, decode_with_latent
from .model import TinyVLM, Vocabulary, build_context
from .roi import RoiBox

log = logging.getLogger(__name__)

_GLYPH_ROWS = (
    ("..#..", "..#..", "#####", "..#..", "..#.."),  # plus
    ("#...#", ".#.#.", "..#..", ".#.#.", "#...#"),  # cross
    ("#####", "#...#", "#...#", "#...#", "#####"),  # ring
    ("#...#", "#...#", "#####", "#...#", "#...#"),  # H
    ("#####", "..#..", "..#..", "..#..", "..#.."),  # T
    ("#....", "#....", "#....", "#....", "#####"),  # L
    ("#....", ".#...", "..#..", "...#.", "....#"),  # diagonal
    ("#.#.#", ".....", "#.#.#", ".....", "#.#.#"),  # dots
    ("..#..", ".#.#.", "#...#", ".#.#.", "..#.."),  # diamond
    ("#####", "....#", "..###", "....#", "#####"),  # three
    ("#####", "#....", "#####", "....#", "#####"),  # S
    (".###.", "#...#", "#...#", "#...#", ".###."),  # O
)


def glyph_bitmap(cls: int, scale: int = 1) -> np.ndarray:
    if not 0 <= cls < len(_GLYPH_ROWS):
        raise ValueError(f"no glyph for class {cls}")
    bm = np.array([[c == "#" for c in row] for row in _GLYPH_ROWS[cls]], dtype=bool)
    return np.kron(bm, np.ones((scale, scale), dtype=bool)) if scale > 1 else bm


@dataclass
class TaskConfig:
    image_side: int = 56
    patch_size: int = 7
    n_glyphs: int = 8
    min_distractors: int = 2
    max_distractors: int = 3
    max_margin: int = 3
    shade: float = 0.35
    noise: float = 0.0
    train_size: int = 2000
    test_size: int = 500
    seed: int = 1234

    def validate(self) -> None:
        if self.image_side % self.patch_size:
            raise ValueError("image_side must be divisible by patch_size")
        if self.patch_size < 5:
            raise ValueError("patch_size must be at least 5 to hold a glyph")
        if not 2 <= self.n_glyphs <= len(_GLYPH_ROWS):
            raise ValueError(f"n_glyphs must lie in [2, {len(_GLYPH_ROWS)}]")
        if self.min_distractors < 2 or self.max_distractors < self.min_distractors:
            raise ValueError("need 2 <= min_distractors <= max_distractors")
        if self.max_distractors > self.n_glyphs - 1:
            raise ValueError("distractor classes must differ from the target; too few glyph classes")
        if not 0 <= self.max_margin < self.patch_size:
            raise ValueError("max_margin must be smaller than patch_size")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_size


@dataclass
class SynthSample:
    image: np.ndarray
    roi: RoiBox
    question: list[int]
    answer: int
    seed: list[int]
    layout: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def target_tokens(self) -> list[int]:
        return [self.answer, Vocabulary.EOS]

    def to_record(self) -> dict:
        return {
            "image": self.image.tolist(),
            "box": self.roi.as_list(),
            "question": [int(t) for t in self.question],
            "answer": int(self.answer),
            "seed": [int(s) for s in self.seed],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SynthSample":
        image = np.asarray(rec["image"], dtype=np.float64)
        if image.ndim != 2:
            raise ValueError("image must be a 2-d array of rows")
        return cls(image, RoiBox.from_list(rec["box"]), [int(t) for t in rec["question"]], int(rec["answer"]),
                   [int(s) for s in rec["seed"]])

    def same_as(self, other: "SynthSample") -> bool:
        return (np.array_equal(self.image, other.image) and self.roi == other.roi and self.question == other.question
                and self.answer == other.answer and self.seed == other.seed)


class PlacementError(RuntimeError):
    pass


def _cell_box(r: int, c: int, P: int) -> tuple[int, int, int, int]:
    return c * P, r * P, (c + 1) * P, (r + 1) * P


def _overlaps(a: tuple[int, int, int, int], b: RoiBox) -> bool:
    return a[0] < b.x1 and b.x0 < a[2] and a[1] < b.y1 and b.y0 < a[3]


def _try_sample(rng: np.random.Generator, cfg: TaskConfig, vocab: Vocabulary, seed: list[int]) -> SynthSample:
    P, G, S = cfg.patch_size, cfg.grid, cfg.image_side
    scale = max(1, P // 7)
    off = (P - 5 * scale) // 2
    target = int(rng.integers(cfg.n_glyphs))
    tr, tc = (int(v) for v in rng.integers(G, size=2))
    m = rng.integers(0, cfg.max_margin + 1, size=4)
    x0, y0, x1, y1 = _cell_box(tr, tc, P)
    roi = RoiBox(max(0, x0 - int(m[0])), max(0, y0 - int(m[1])), min(S, x1 + int(m[2])), min(S, y1 + int(m[3])))

    n_dis = int(rng.integers(cfg.min_distractors, cfg.max_distractors + 1))
    others = [c for c in range(cfg.n_glyphs) if c != target]
    classes = [int(c) for c in rng.choice(others, size=n_dis, replace=False)]
    free = [(r, c) for r in range(G) for c in range(G) if not _overlaps(_cell_box(r, c, P), roi)]
    if len(free) < n_dis:
        raise PlacementError("not enough free cells outside the ROI")
    picks = rng.choice(len(free), size=n_dis, replace=False)
    cells = [free[int(i)] for i in picks]

    img = np.zeros((S, S))
    img[roi.y0:roi.y1, roi.x0:roi.x1] = cfg.shade
    for cls, (r, c) in [(target, (tr, tc))] + list(zip(classes, cells)):
        bm = glyph_bitmap(cls, scale)
        patch = img[r * P + off: r * P + off + bm.shape[0], c * P + off: c * P + off + bm.shape[1]]
        patch[bm] = 1.0
    if cfg.noise > 0:
        img = np.clip(img + rng.normal(0.0, cfg.noise, size=img.shape), 0.0, 1.0)
    layout = {"target_cell": (tr, tc), "target_class": target, "distractors": list(zip(classes, cells))}
    return SynthSample(img, roi, vocab.question(), vocab.glyph_token(target), seed, layout)


def generate_sample(index: int, cfg: TaskConfig, max_attempts: int = 8) -> SynthSample:
    """Sample ``index`` of the stream seeded by ``cfg.seed``; fully reproducible."""
    cfg.validate()
    vocab = Vocabulary(cfg.n_glyphs)
    for attempt in range(max_attempts):
        seed = [cfg.seed, index, attempt]
        try:
            return _try_sample(np.random.default_rng(seed), cfg, vocab, seed)
        except PlacementError as exc:
            log.info("sample %d attempt %d: %s; retrying with next sub-seed", index, attempt, exc)
    raise PlacementError(f"could not place glyphs for sample {index}")


def generate_dataset(cfg: TaskConfig, count: int, offset: int = 0) -> list[SynthSample]:
    return [generate_sample(offset + i, cfg) for i in range(count)]


def train_test_split(cfg: TaskConfig) -> tuple[list[SynthSample], list[SynthSample]]:
    """Train indices come first in the stream, test follows without overlap."""
    return generate_dataset(cfg, cfg.train_size), generate_dataset(cfg, cfg.test_size, offset=cfg.train_size)


# -- file format: one JSON object per line -----------------------------------

def write_dataset(path: str | Path, samples: Iterable[SynthSample]) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), separators=(",", ":")) + "\n")


def read_dataset(path: str | Path) -> list[SynthSample]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(SynthSample.from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: malformed record on line {lineno}: {exc}") from None
    return out


# -- oracles ------------------------------------------------------------------

def roi_oracle(sample: SynthSample, n_glyphs: int, patch: int) -> int:
    """Answer by reading only the pixels inside the ROI."""
    box = sample.roi
    crop = np.zeros_like(sample.image)
    crop[box.y0:box.y1, box.x0:box.x1] = sample.image[box.y0:box.y1, box.x0:box.x1]
    scale = max(1, patch // 7)
    off = (patch - 5 * scale) // 2
    G = sample.image.shape[0] // patch
    for r in range(G):
        for c in range(G):
            x0, y0, x1, y1 = _cell_box(r, c, patch)
            if not (box.x0 <= x0 and x1 <= box.x1 and box.y0 <= y0 and y1 <= box.y1):
                continue
            window = crop[y0 + off: y0 + off + 5 * scale, x0 + off: x0 + off + 5 * scale] > 0.99
            for cls in range(n_glyphs):
                if np.array_equal(window, glyph_bitmap(cls, scale)):
                    return Vocabulary(n_glyphs).glyph_token(cls)
    return -1


def histogram_signature(image: np.ndarray, bins: int = 16) -> tuple[int, ...]:
    counts, _ = np.histogram(image, bins=bins, range=(0.0, 1.0))
    return tuple(int(c) for c in counts)


def histogram_oracle_accuracy(samples: Sequence[SynthSample]) -> float:
    """In-sample accuracy of the best answer-per-histogram lookup table.

    An upper bound for any classifier that sees only the global histogram.
    """
    table: dict[tuple, dict[int, int]] = {}
    for s in samples:
        row = table.setdefault(histogram_signature(s.image), {})
        row[s.answer] = row.get(s.answer, 0) + 1
    best = sum(max(row.values()) for row in table.values())
    return best / len(samples)


# -- evaluation ---------------------------------------------------------------

Policy = Callable[[SynthSample], DecodeResult]


def model_policy(model: TinyVLM, K: int, temperature: float = 0.0, max_answer_len: int = 4,
                 force_latent: bool = False, seed: int = 0) -> Policy:
    rng = np.random.default_rng(seed)

    def run(sample: SynthSample) -> DecodeResult:
        x0 = build_context(model.embed_patches(sample.image), sample.question)
        return decode_with_latent(model, x0, K, temperature, max_answer_len, rng, force_latent=force_latent)

    return run


def evaluate(
    policy,
    dataset: Sequence[SynthSample],
    K: int = 8,
    temperature: float = 0.0,
    max_answer_len: int = 4,
    force_latent: bool = False,
) -> dict:
    """Greedy evaluation: accuracy (exact single answer match), format rate
    (both control tokens present) and mean generated-token count."""
    if not dataset:
        raise ValueError("dataset must be nonempty")
    run = model_policy(policy, K, temperature, max_answer_len, force_latent) if isinstance(policy, TinyVLM) else policy
    correct = fmt = 0
    lengths, tokens = [], []
    t0 = time.perf_counter()
    for s in dataset:
        res = run(s)
        span = res.answer_span()
        correct += int(span == [s.answer])
        fmt += int(res.has_start and res.has_end)
        lengths.append(len(span))
        tokens.append(len(res.sampled_tokens) + int(res.forced_start) + int(res.has_end))
    n = len(dataset)
    return {
        "accuracy": correct / n,
        "format_rate": fmt / n,
        "mean_answer_len": float(np.mean(lengths)),
        "mean_tokens": float(np.mean(tokens)),
        "n": n,
        "wall_time": time.perf_counter() - t0,
    }
