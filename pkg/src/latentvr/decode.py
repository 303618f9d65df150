"""Latent-segment decoding and teacher-forced replay.

Sequence layout used everywhere::

    [X0 ; pre tokens ... START ; h_1 ... h_K ; END ; answer tokens ...]

h_1 is the last-layer state the decoder produces at the START position; it is
fed back as the input of the first latent slot, whose output is h_2, and so on.
Latent slot k therefore *holds* h_k, and after the K-th slot END is appended
without sampling.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import (
    ForwardOutput,
    KVCache,
    MixedSequence,
    TinyVLM,
    is_token,
    policy_distribution,
    _draw,
)


class LatentDivergence(FloatingPointError):
    """A latent rollout produced a non-finite state."""

    def __init__(self, step: int):
        super().__init__(f"non-finite latent state at step {step}")
        self.step = step


@dataclass
class LatentTrajectory:
    states: np.ndarray  # (K, d)

    @property
    def K(self) -> int:
        return self.states.shape[0]

    def __len__(self) -> int:
        return self.K


@dataclass
class DecodeResult:
    """One generation. Probabilities are those of the sampled tokens under the
    decoding distribution, in emission order (prefix tokens, then answer)."""

    prefix_tokens: list[int] = field(default_factory=list)
    prefix_probs: list[float] = field(default_factory=list)
    forced_start: bool = False
    latents: np.ndarray | None = None
    answer_tokens: list[int] = field(default_factory=list)
    answer_probs: list[float] = field(default_factory=list)
    has_start: bool = False
    has_end: bool = False
    truncated: bool = False
    K: int = 0
    temperature: float = 0.0
    eos_id: int = 1

    @property
    def latent(self) -> LatentTrajectory | None:
        return None if self.latents is None else LatentTrajectory(self.latents)

    @property
    def sampled_tokens(self) -> list[int]:
        return list(self.prefix_tokens) + list(self.answer_tokens)

    @property
    def sampled_probs(self) -> list[float]:
        return list(self.prefix_probs) + list(self.answer_probs)

    def answer_span(self) -> list[int]:
        """Answer tokens before EOS; the whole emission when no latent segment ran."""
        toks = self.answer_tokens if self.has_start else self.prefix_tokens
        out = []
        for t in toks:
            if t == self.eos_id:
                break
            out.append(t)
        return out

    def teacher_inputs(self, start_id: int) -> tuple[list[int], list[int]]:
        """(pre tokens fed before the latent slots, answer tokens fed after END)."""
        pre = list(self.prefix_tokens) + ([start_id] if self.forced_start else [])
        return pre, list(self.answer_tokens)

    # -- structured-text record ----------------------------------------
    def to_dict(self) -> dict:
        d = {
            "prefix_tokens": [int(t) for t in self.prefix_tokens],
            "prefix_probs": [float(p) for p in self.prefix_probs],
            "forced_start": self.forced_start,
            "answer_tokens": [int(t) for t in self.answer_tokens],
            "answer_probs": [float(p) for p in self.answer_probs],
            "has_start": self.has_start,
            "has_end": self.has_end,
            "truncated": self.truncated,
            "K": self.K,
            "temperature": self.temperature,
            "eos_id": self.eos_id,
            "latents": None,
        }
        if self.latents is not None:
            arr = np.ascontiguousarray(self.latents, dtype="<f8")
            d["latents"] = {"shape": list(arr.shape), "b64": base64.b64encode(arr.tobytes()).decode("ascii")}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DecodeResult":
        lat = d.get("latents")
        latents = None
        if lat is not None:
            latents = np.frombuffer(base64.b64decode(lat["b64"]), dtype="<f8").reshape(lat["shape"]).astype(np.float64)
        return cls(
            prefix_tokens=list(d["prefix_tokens"]),
            prefix_probs=list(d["prefix_probs"]),
            forced_start=bool(d["forced_start"]),
            latents=latents,
            answer_tokens=list(d["answer_tokens"]),
            answer_probs=list(d["answer_probs"]),
            has_start=bool(d["has_start"]),
            has_end=bool(d["has_end"]),
            truncated=bool(d["truncated"]),
            K=int(d["K"]),
            temperature=float(d["temperature"]),
            eos_id=int(d.get("eos_id", 1)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "DecodeResult":
        return cls.from_dict(json.loads(s))


def latent_state(model: TinyVLM, hidden: Tensor, rescale: bool = False) -> Tensor:
    """State fed back into the next latent slot. Identity unless ``rescale``,
    which maps it onto the mean token-embedding norm."""
    if not rescale:
        return hidden
    target = float(np.mean(np.linalg.norm(model.params["tok_emb"].data, axis=-1)))
    norm = ad.tsum(ad.square(hidden), axis=-1, keepdims=True)
    return hidden * ad.exp(ad.log(norm) * -0.5) * target


def _check_finite(h: Tensor, step: int) -> None:
    if not np.all(np.isfinite(h.data)):
        raise LatentDivergence(step)


def latent_rollout(model: TinyVLM, prefix: MixedSequence, K: int, rescale: bool = False) -> LatentTrajectory:
    """Roll out K latent states after ``prefix`` (which must end with START)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if not len(prefix) or not is_token(prefix[-1]) or int(prefix[-1]) != model.vocab.START_LATENT:
        raise ValueError("prefix must end with the START_LATENT token")
    out = model.forward(prefix)
    states, _ = _rollout_from(model, out, K, rescale)
    return LatentTrajectory(np.stack([s.data.reshape(-1) for s in states]))


def _rollout_from(model: TinyVLM, out: ForwardOutput, K: int, rescale: bool) -> tuple[list[Tensor], ForwardOutput]:
    """Given the output at the START position, produce h_1..h_K; returns the
    states and the output after feeding h_K."""
    states = []
    h = latent_state(model, out.hidden[0, -1], rescale)
    for k in range(1, K + 1):
        _check_finite(h, k)
        states.append(h)
        out = model.step(h, out.cache)
        if k < K:
            h = latent_state(model, out.hidden[0, -1], rescale)
    return states, out


def context_forward(model: TinyVLM, x0: MixedSequence) -> ForwardOutput:
    """The X0 block; its cache may be shared between decodes of the same input."""
    return model.forward(x0)


def decode_with_latent(
    model: TinyVLM,
    x0: MixedSequence,
    K: int,
    temperature: float,
    max_answer_len: int,
    rng: np.random.Generator,
    force_latent: bool = False,
    max_prefix_len: int | None = None,
    rescale: bool = False,
    context: ForwardOutput | None = None,
) -> DecodeResult:
    """Sample a completion, entering a K-step latent segment at START."""
    if max_answer_len < 1:
        raise ValueError("max_answer_len must be >= 1")
    if K < 1:
        raise ValueError("K must be >= 1")
    vocab = model.vocab
    max_prefix_len = max_answer_len if max_prefix_len is None else max_prefix_len
    res = DecodeResult(K=K, temperature=temperature, eos_id=vocab.EOS)
    out = context if context is not None else context_forward(model, x0)

    def sample(o: ForwardOutput) -> tuple[int, float]:
        logits = o.logits[0, -1]
        probs = policy_distribution(logits, temperature).data
        if temperature == 0:
            tok = int(np.argmax(logits.data))
        else:
            tok = _draw(probs, rng)
        return tok, float(probs[tok])

    if force_latent:
        res.forced_start = True
        res.has_start = True
        out = model.step(vocab.START_LATENT, out.cache)
    else:
        for _ in range(max_prefix_len):
            tok, p = sample(out)
            res.prefix_tokens.append(tok)
            res.prefix_probs.append(p)
            if tok == vocab.EOS:
                return res
            out = model.step(tok, out.cache)
            if tok == vocab.START_LATENT:
                res.has_start = True
                break
        if not res.has_start:
            res.truncated = True
            return res

    states, out = _rollout_from(model, out, K, rescale)
    res.latents = np.stack([s.data.reshape(-1) for s in states])
    out = model.step(vocab.END_LATENT, out.cache)
    res.has_end = True
    for i in range(max_answer_len):
        tok, p = sample(out)
        res.answer_tokens.append(tok)
        res.answer_probs.append(p)
        if tok == vocab.EOS:
            return res
        if i + 1 < max_answer_len:
            out = model.step(tok, out.cache)
    res.truncated = True
    return res


# -- teacher forcing -------------------------------------------------------------

@dataclass
class TeacherForcedOutput:
    """Outputs of a teacher-forced pass.

    ``pre_logits[:, j]`` predicts pre token j, ``states[:, k-1]`` is the
    latent state produced for slot k (mu_k under replay, h_k in-line) and
    ``answer_logits[:, t]`` predicts answer token t.
    """

    logits: Tensor
    hidden: Tensor
    pre_logits: Tensor | None
    states: Tensor | None
    answer_logits: Tensor | None
    positions: dict
    attn: list[np.ndarray] | None = None


def _stack_attention(blocks) -> np.ndarray:
    """Join per-block attention (B, h, n_i, keys_i) into (B, h, n, n); keys a
    block could not see are zero."""
    n_keys = blocks[-1].shape[-1]
    padded = [np.pad(a, [(0, 0)] * 3 + [(0, n_keys - a.shape[-1])]) for a in blocks]
    return np.concatenate(padded, axis=2)


def teacher_forced_forward(
    model: TinyVLM,
    x0,
    K: int,
    latents=None,
    answer_in=(),
    pre_tokens=None,
    stepwise: bool = False,
    rescale: bool = False,
    return_attn: bool = False,
) -> TeacherForcedOutput:
    """Teacher-forced evaluation of ``[X0; pre; START; h_1..h_K; END; answer_in]``.

    ``x0`` is a MixedSequence or an embedded (B, L0, d) Tensor. ``pre_tokens``
    (default ``[START]``) must end with START when K > 0. With ``latents``
    given they are patched into the latent slots; otherwise the states are
    rolled out in-line (and stay differentiable). K = 0 means no latent segment
    and no END: the answer tokens follow the pre tokens directly.

    ``stepwise`` feeds every element after X0 as its own block, reproducing the
    exact arithmetic of :func:`decode_with_latent`.
    """
    vocab = model.vocab
    x0_emb = model.embed_sequence(x0) if isinstance(x0, MixedSequence) else x0
    B, L0, d = x0_emb.shape
    if pre_tokens is None:
        pre_tokens = [vocab.START_LATENT] if K > 0 else []
    pre = np.asarray(pre_tokens, dtype=np.int64)
    if pre.ndim == 1:
        pre = np.broadcast_to(pre, (B, pre.shape[0]))
    ans = np.asarray(answer_in, dtype=np.int64)
    if ans.ndim == 1:
        ans = np.broadcast_to(ans, (B, ans.shape[0]))
    n_pre, n_ans = pre.shape[1], ans.shape[1]
    if K > 0 and (n_pre == 0 or np.any(pre[:, -1] != vocab.START_LATENT)):
        raise ValueError("pre tokens must end with START_LATENT when K > 0")
    if latents is not None:
        lat = latents if isinstance(latents, Tensor) else Tensor(latents)
        if lat.ndim == 2:
            lat = lat.reshape(1, *lat.shape)
        if lat.shape[1] != K:
            raise ValueError(f"latent trajectory has {lat.shape[1]} states, placement declares K={K}")
        if lat.shape[0] != B:
            raise ValueError("latent batch does not match context batch")
    total = L0 + n_pre + (K + 1 if K > 0 else 0) + n_ans
    if total > model.cfg.max_positions:
        raise ValueError(f"sequence length {total} exceeds max_positions {model.cfg.max_positions}")

    hiddens: list[Tensor] = []
    logits: list[Tensor] = []
    attns: list[list[np.ndarray]] = []
    cache: KVCache | None = None

    def feed(x: Tensor, split: bool) -> None:
        nonlocal cache
        pieces = [x[:, i:i + 1] for i in range(x.shape[1])] if split and x.shape[1] > 1 else [x]
        for piece in pieces:
            o = model.run_block(piece, cache, return_attn=return_attn)
            cache = o.cache
            hiddens.append(o.hidden)
            logits.append(o.logits)
            if return_attn:
                attns.append(o.attn)

    def tok(ids: np.ndarray) -> Tensor:
        return model.embed_tokens(ids)

    if stepwise:
        feed(x0_emb, split=False)
        if n_pre:
            feed(tok(pre), split=True)
    else:
        feed(ad.concat([x0_emb, tok(pre)], axis=1) if n_pre else x0_emb, split=False)

    start_pos = L0 + n_pre - 1
    inline_states: list[Tensor] = []
    tail = []
    if K > 0:
        tail_tokens = np.concatenate([np.full((B, 1), vocab.END_LATENT), ans], axis=1)
        if latents is not None:
            feed(ad.concat([lat, tok(tail_tokens)], axis=1), split=stepwise)
        else:
            h = latent_state(model, hiddens[-1][:, -1:], rescale)
            for k in range(1, K + 1):
                _check_finite(h, k)
                inline_states.append(h)
                if k < K:
                    feed(h, split=False)
                    h = latent_state(model, hiddens[-1][:, -1:], rescale)
            feed(ad.concat([h, tok(tail_tokens)], axis=1), split=stepwise)
    elif n_ans:
        feed(tok(ans), split=stepwise)

    hidden = hiddens[0] if len(hiddens) == 1 else ad.concat(hiddens, axis=1)
    logit_all = logits[0] if len(logits) == 1 else ad.concat(logits, axis=1)
    pre_pos = np.arange(L0 - 1, L0 - 1 + n_pre)
    if K > 0:
        latent_slots = np.arange(start_pos + 1, start_pos + 1 + K)
        end_pos = start_pos + K + 1
        ans_pos = np.arange(end_pos, end_pos + n_ans + 1)
        if latents is not None:
            states = hidden[:, np.arange(start_pos, start_pos + K)]
            if rescale:
                states = latent_state(model, states, rescale)
        else:
            states = ad.concat(inline_states, axis=1)
    else:
        latent_slots = np.arange(0)
        end_pos = None
        ans_pos = np.arange(L0 + n_pre - 1, L0 + n_pre + n_ans)
        states = None
    return TeacherForcedOutput(
        logits=logit_all,
        hidden=hidden,
        pre_logits=logit_all[:, pre_pos] if n_pre else None,
        states=states,
        answer_logits=logit_all[:, ans_pos],
        positions={"pre": pre_pos, "start": start_pos if K > 0 else None, "latent": latent_slots,
                   "end": end_pos, "answer": ans_pos, "context": L0},
        attn=[_stack_attention(per_layer) for per_layer in zip(*attns)] if return_attn else None,
    )


def replay(
    model: TinyVLM,
    x0,
    result: DecodeResult,
    stepwise: bool = False,
    rescale: bool = False,
    return_attn: bool = False,
) -> TeacherForcedOutput:
    """Re-evaluate a recorded decode with its latent trajectory patched in.

    Logits are returned for every sampled token (``answer_logits`` has one
    extra trailing row predicting past the last fed token; callers slice).
    """
    vocab = model.vocab
    if result.has_start:
        pre, ans = result.teacher_inputs(vocab.START_LATENT)
        return teacher_forced_forward(
            model, x0, result.K, latents=result.latents, answer_in=ans[:-1] if ans else [],
            pre_tokens=pre, stepwise=stepwise, rescale=rescale, return_attn=return_attn,
        )
    toks = result.prefix_tokens
    return teacher_forced_forward(
        model, x0, 0, answer_in=toks[:-1], pre_tokens=[], stepwise=stepwise, return_attn=return_attn,
    )


def sampled_token_logits(out: TeacherForcedOutput, result: DecodeResult) -> Tensor:
    """(B, n_sampled, V) logits that produced each sampled token, in order."""
    if result.has_start:
        parts = []
        n_prefix = len(result.prefix_tokens)
        if n_prefix:
            parts.append(out.pre_logits[:, :n_prefix])
        n_ans = len(result.answer_tokens)
        if n_ans:
            parts.append(out.answer_logits[:, :n_ans])
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
    return out.answer_logits[:, : len(result.prefix_tokens)]


def replay_probabilities(model: TinyVLM, x0, result: DecodeResult, temperature: float | None = None,
                         stepwise: bool = True) -> np.ndarray:
    """Probabilities of the recorded tokens recomputed by teacher forcing."""
    temperature = result.temperature if temperature is None else temperature
    out = replay(model, x0, result, stepwise=stepwise)
    lg = sampled_token_logits(out, result)
    toks = result.sampled_tokens
    probs = []
    for i, t in enumerate(toks):
        probs.append(float(policy_distribution(lg[0, i], temperature).data[t]))
    return np.array(probs)


__all__ = [
    "DecodeResult",
    "LatentDivergence",
    "LatentTrajectory",
    "TeacherForcedOutput",
    "context_forward",
    "decode_with_latent",
    "latent_rollout",
    "replay",
    "replay_probabilities",
    "sampled_token_logits",
    "teacher_forced_forward",
]
