"""Tiny multimodal causal decoder.

Patch embedder and projector (the visual pathway) feed a stack of pre-norm
causal self-attention blocks. Inputs are mixed sequences: discrete token ids
go through the embedding table, continuous vectors (visual tokens, latent
states) enter directly. Every element then receives the learned absolute
position vector for its slot.

The decoder runs in *blocks* over a key/value cache. A full forward pass is a
single block; incremental decoding is a chain of one-element blocks. Running
the same chain of blocks twice yields bitwise-identical numbers, which the
replay machinery depends on.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_FORMAT = "latentvr-checkpoint"
CHECKPOINT_VERSION = 1

QUESTION_WORDS = ("what", "glyph", "is", "in", "the", "marked", "region")


@dataclass(frozen=True)
class Vocabulary:
    """Token ids. Specials come first and never move."""

    n_glyphs: int = 8

    BOS: int = 0
    EOS: int = 1
    START_LATENT: int = 2
    END_LATENT: int = 3
    SPACE: int = 4

    @property
    def word_offset(self) -> int:
        return 5

    @property
    def glyph_offset(self) -> int:
        return self.word_offset + len(QUESTION_WORDS)

    @property
    def size(self) -> int:
        return self.glyph_offset + self.n_glyphs

    @property
    def specials(self) -> tuple[int, ...]:
        return (self.BOS, self.EOS, self.START_LATENT, self.END_LATENT)

    @property
    def control_tokens(self) -> tuple[int, int]:
        return (self.START_LATENT, self.END_LATENT)

    def glyph_token(self, cls: int) -> int:
        if not 0 <= cls < self.n_glyphs:
            raise ValueError(f"glyph class {cls} outside [0, {self.n_glyphs})")
        return self.glyph_offset + cls

    def glyph_class(self, token: int) -> int | None:
        cls = token - self.glyph_offset
        return cls if 0 <= cls < self.n_glyphs else None

    def word(self, w: str) -> int:
        return self.word_offset + QUESTION_WORDS.index(w)

    def question(self) -> list[int]:
        return [self.BOS] + [self.word(w) for w in QUESTION_WORDS]

    def decode(self, ids: Iterable[int]) -> list[str]:
        names = {self.BOS: "<bos>", self.EOS: "<eos>", self.START_LATENT: "<Medlvr_Start>",
                 self.END_LATENT: "<Medlvr_End>", self.SPACE: " "}
        out = []
        for i in ids:
            if i in names:
                out.append(names[i])
            elif self.word_offset <= i < self.glyph_offset:
                out.append(QUESTION_WORDS[i - self.word_offset])
            elif self.glyph_class(i) is not None:
                out.append(f"glyph{self.glyph_class(i)}")
            else:
                out.append(f"<unk{i}>")
        return out


@dataclass
class ModelConfig:
    embed_dim: int = 32
    num_layers: int = 2
    num_heads: int = 2
    n_glyphs: int = 8
    image_side: int = 56
    patch_size: int = 7
    max_positions: int = 128
    mlp_ratio: int = 4
    ln_eps: float = 1e-6
    latent_source: str = "residual"  # or "final_norm": the output of the final layer norm
    seed: int = 0

    def __post_init__(self) -> None:
        if self.latent_source not in ("final_norm", "residual"):
            raise ValueError(f"unknown latent_source {self.latent_source!r}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.image_side % self.patch_size:
            raise ValueError(f"image_side {self.image_side} not divisible by patch_size {self.patch_size}")

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.n_glyphs)

    @property
    def vocab_size(self) -> int:
        return self.vocab.size

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


VISUAL_PARAMS = ("patch.w", "patch.b", "proj.w1", "proj.b1", "proj.w2", "proj.b2")


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit gains."""
    rng = np.random.default_rng(cfg.seed)
    d, p2, V = cfg.embed_dim, cfg.patch_size**2, cfg.vocab_size
    hidden = cfg.mlp_ratio * d

    def uni(fan_in: int, *shape: int) -> np.ndarray:
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    raw: dict[str, np.ndarray] = {
        "patch.w": uni(p2, p2, d),
        "patch.b": np.zeros(d),
        "proj.w1": uni(d, d, d),
        "proj.b1": np.zeros(d),
        "proj.w2": uni(d, d, d),
        "proj.b2": np.zeros(d),
        "tok_emb": uni(d, V, d),
        "pos_emb": uni(d, cfg.max_positions, d),
    }
    for i in range(cfg.num_layers):
        pre = f"blocks.{i}."
        raw[pre + "ln1.g"] = np.ones(d)
        raw[pre + "ln1.b"] = np.zeros(d)
        raw[pre + "attn.w_qkv"] = uni(d, d, 3 * d)
        raw[pre + "attn.b_qkv"] = np.zeros(3 * d)
        raw[pre + "attn.w_out"] = uni(d, d, d)
        raw[pre + "attn.b_out"] = np.zeros(d)
        raw[pre + "ln2.g"] = np.ones(d)
        raw[pre + "ln2.b"] = np.zeros(d)
        raw[pre + "mlp.w1"] = uni(d, d, hidden)
        raw[pre + "mlp.b1"] = np.zeros(hidden)
        raw[pre + "mlp.w2"] = uni(hidden, hidden, d)
        raw[pre + "mlp.b2"] = np.zeros(d)
    raw["ln_f.g"] = np.ones(d)
    raw["ln_f.b"] = np.zeros(d)
    raw["head.w"] = uni(d, d, V)
    raw["head.b"] = np.zeros(V)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}


# -- mixed sequences ----------------------------------------------------------

Element = Union[int, np.ndarray, Tensor]


@dataclass
class MixedSequence:
    """Ordered elements: ``int`` token ids or length-d continuous vectors."""

    elements: list[Element] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.elements)

    def __getitem__(self, i):
        return self.elements[i]

    def append(self, el: Element) -> None:
        self.elements.append(el)

    def extend(self, els: Iterable[Element]) -> None:
        self.elements.extend(els)

    def copy(self) -> "MixedSequence":
        return MixedSequence(list(self.elements))

    def kinds(self) -> list[str]:
        return ["token" if is_token(e) else "embedding" for e in self.elements]


def is_token(el: Element) -> bool:
    return isinstance(el, (int, np.integer))


@dataclass
class KVCache:
    """Per-layer keys and values, each (B, heads, T, head_dim)."""

    keys: list[Tensor]
    values: list[Tensor]

    @property
    def length(self) -> int:
        return self.keys[0].shape[2] if self.keys else 0


@dataclass
class ForwardOutput:
    logits: Tensor  # (B, n, V)
    hidden: Tensor  # (B, n, d), the latent feedback source (see ModelConfig.latent_source)
    cache: KVCache
    attn: list[np.ndarray] | None = None  # per layer, (B, heads, n, T)

    def __len__(self) -> int:
        return self.logits.shape[1]


class TinyVLM:
    """Parameters plus the pure forward functions over them."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.vocab = cfg.vocab
        self.params = params if params is not None else init_params(cfg)

    # -- parameter utilities -------------------------------------------
    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def trainable_names(self, freeze_visual: bool = False) -> list[str]:
        return [n for n in self.params if not (freeze_visual and n in VISUAL_PARAMS)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def clone(self) -> "TinyVLM":
        return TinyVLM(self.cfg, {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()})

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    # -- visual pathway ------------------------------------------------
    def patchify(self, images: np.ndarray) -> np.ndarray:
        """(..., H, W) -> (..., Hp*Wp, P*P), patches in row-major grid order."""
        images = np.asarray(images, dtype=np.float64)
        P = self.cfg.patch_size
        H, W = images.shape[-2:]
        if H % P or W % P:
            raise ValueError(f"image {H}x{W} not divisible by patch size {P}")
        lead = images.shape[:-2]
        hp, wp = H // P, W // P
        x = images.reshape(*lead, hp, P, wp, P)
        x = np.moveaxis(x, -3, -2)  # (..., hp, wp, P, P)
        return x.reshape(*lead, hp * wp, P * P)

    def embed_patches(self, images: np.ndarray) -> Tensor:
        """Visual tokens: linear patch embedding followed by the MLP projector."""
        p = self.params
        patches = Tensor(self.patchify(images))
        v = patches @ p["patch.w"] + p["patch.b"]
        v = ad.gelu(v @ p["proj.w1"] + p["proj.b1"])
        return v @ p["proj.w2"] + p["proj.b2"]

    # -- decoder -------------------------------------------------------
    def embed_tokens(self, ids) -> Tensor:
        return ad.embedding(self.params["tok_emb"], ids)

    def embed_sequence(self, seq: MixedSequence) -> Tensor:
        """(1, n, d) element embeddings, before positional addition."""
        d = self.cfg.embed_dim
        pieces: list[Tensor] = []
        run: list[int] = []
        for el in seq.elements:
            if is_token(el):
                run.append(int(el))
                continue
            if run:
                pieces.append(self.embed_tokens(np.array(run)))
                run = []
            t = el if isinstance(el, Tensor) else Tensor(el)
            if t.shape[-1] != d or t.size != d:
                raise ad.ShapeError(f"embedding element must have {d} components, got shape {t.shape}")
            pieces.append(t.reshape(1, d))
        if run:
            pieces.append(self.embed_tokens(np.array(run)))
        if not pieces:
            raise ValueError("empty sequence")
        x = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=0)
        return x.reshape(1, len(seq), d)

    def run_block(self, x: Tensor, cache: KVCache | None = None, return_attn: bool = False) -> ForwardOutput:
        """Process new elements ``x`` (B, n, d) after the cached prefix."""
        cfg, p = self.cfg, self.params
        B, n, d = x.shape
        start = cache.length if cache is not None else 0
        if start + n > cfg.max_positions:
            raise ValueError(f"sequence length {start + n} exceeds max_positions {cfg.max_positions}")
        h, dh = cfg.num_heads, cfg.head_dim
        x = x + p["pos_emb"][start:start + n]
        total = start + n
        mask = np.arange(total)[None, :] <= (start + np.arange(n))[:, None]
        scale = 1.0 / math.sqrt(dh)
        new_keys, new_values, attns = [], [], []
        for i in range(cfg.num_layers):
            pre = f"blocks.{i}."
            a = ad.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"], eps=cfg.ln_eps)
            qkv = a @ p[pre + "attn.w_qkv"] + p[pre + "attn.b_qkv"]
            qkv = ad.transpose(qkv.reshape(B, n, 3, h, dh), (2, 0, 3, 1, 4))  # (3, B, h, n, dh)
            q, k, v = qkv[0], qkv[1], qkv[2]
            if cache is not None:
                k = ad.concat([cache.keys[i], k], axis=2)
                v = ad.concat([cache.values[i], v], axis=2)
            new_keys.append(k)
            new_values.append(v)
            scores = (q @ ad.swapaxes(k, -1, -2)) * scale
            att = ad.softmax(scores, axis=-1, mask=mask)
            if return_attn:
                attns.append(att.data)
            o = ad.transpose(att @ v, (0, 2, 1, 3)).reshape(B, n, d)
            x = x + (o @ p[pre + "attn.w_out"] + p[pre + "attn.b_out"])
            m = ad.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"], eps=cfg.ln_eps)
            m = ad.gelu(m @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"])
            x = x + (m @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"])
        normed = ad.layer_norm(x, p["ln_f.g"], p["ln_f.b"], eps=cfg.ln_eps)
        logits = normed @ p["head.w"] + p["head.b"]
        hidden = normed if cfg.latent_source == "final_norm" else x
        return ForwardOutput(logits, hidden, KVCache(new_keys, new_values), attns if return_attn else None)

    def forward(self, seq: MixedSequence, return_attn: bool = False) -> ForwardOutput:
        """Whole-sequence causal forward pass (single block, batch of one)."""
        if len(seq) > self.cfg.max_positions:
            raise ValueError(f"sequence length {len(seq)} exceeds max_positions {self.cfg.max_positions}")
        return self.run_block(self.embed_sequence(seq), None, return_attn=return_attn)

    def step(self, el: Element, cache: KVCache | None, return_attn: bool = False) -> ForwardOutput:
        """Feed one element after ``cache``."""
        return self.run_block(self.embed_sequence(MixedSequence([el])), cache, return_attn=return_attn)

    # -- persistence ---------------------------------------------------
    def save(self, path: str | Path) -> None:
        Path(path).write_text(checkpoint_dumps(self))

    @classmethod
    def load(cls, path: str | Path) -> "TinyVLM":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return checkpoint_loads(path.read_text())


def build_context(visual: Tensor | np.ndarray, question: Sequence[int]) -> MixedSequence:
    """X0 = [visual tokens; question tokens]."""
    if len(question) == 0:
        raise ValueError("question must be nonempty")
    vis = visual if isinstance(visual, Tensor) else Tensor(visual)
    if vis.ndim == 3:
        if vis.shape[0] != 1:
            raise ad.ShapeError(f"build_context takes one image's tokens, got {vis.shape}")
        vis = vis.reshape(vis.shape[1], vis.shape[2])
    return MixedSequence([vis[j] for j in range(vis.shape[0])] + [int(t) for t in question])


# -- token distribution / sampling -------------------------------------------

def policy_distribution(logits: Tensor, temperature: float) -> Tensor:
    """Sampling distribution softmax(logits / temperature); temperature 0 uses 1."""
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if temperature == 0 or temperature == 1:
        return ad.softmax(logits, axis=-1)
    return ad.softmax(logits * (1.0 / temperature), axis=-1)


def policy_log_distribution(logits: Tensor, temperature: float) -> Tensor:
    if temperature == 0 or temperature == 1:
        return ad.log_softmax(logits, axis=-1)
    return ad.log_softmax(logits * (1.0 / temperature), axis=-1)


def sample_token(logits, temperature: float, rng: np.random.Generator) -> int:
    """Greedy (lowest id wins ties) at temperature 0, otherwise a draw from the
    tempered softmax using ``rng``."""
    row = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    row = row.reshape(-1)
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if not np.any(np.isfinite(row)):
        raise ValueError("logit row has no finite entries")
    if temperature == 0:
        return int(np.argmax(row))
    probs = policy_distribution(Tensor(row), temperature).data
    return _draw(probs, rng)


def _draw(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(probs) - 1))


# -- checkpoint container ----------------------------------------------------

def _encode(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(shape).astype(np.float64)


def checkpoint_dumps(model: TinyVLM, extra: dict | None = None) -> str:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "vocab": {"BOS": model.vocab.BOS, "EOS": model.vocab.EOS, "START_LATENT": model.vocab.START_LATENT,
                  "END_LATENT": model.vocab.END_LATENT, "size": model.vocab.size},
        "params": {k: {"shape": list(v.shape), "data": _encode(v.data)} for k, v in model.params.items()},
    }
    if extra:
        doc["extra"] = extra
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def checkpoint_loads(text: str) -> TinyVLM:
    doc = json.loads(text)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a latentvr checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    cfg = ModelConfig(**doc["config"])
    vocab = cfg.vocab
    stored = doc["vocab"]
    if (stored["BOS"], stored["EOS"], stored["START_LATENT"], stored["END_LATENT"]) != vocab.specials:
        raise ValueError("checkpoint special token ids disagree with this build")
    params = {k: Tensor(_decode(v["data"], v["shape"]), requires_grad=True, name=k) for k, v in doc["params"].items()}
    return TinyVLM(cfg, params)
