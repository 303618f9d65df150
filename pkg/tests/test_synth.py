import json

import numpy as np
import pytest

from latentvr.decode import DecodeResult
from latentvr.model import ModelConfig, TinyVLM, Vocabulary
from latentvr.roi import RoiBox
from latentvr.synth import (
    SynthSample,
    TaskConfig,
    evaluate,
    generate_dataset,
    generate_sample,
    glyph_bitmap,
    histogram_oracle_accuracy,
    read_dataset,
    roi_oracle,
    train_test_split,
    write_dataset,
)

CFG = TaskConfig(seed=99)


@pytest.fixture(scope="module")
def big():
    return generate_dataset(CFG, 10_000)


def test_same_seed_and_index_bitwise_identical():
    for i in (0, 7, 1234):
        a, b = generate_sample(i, CFG), generate_sample(i, CFG)
        assert a.same_as(b)
    assert not generate_sample(0, CFG).same_as(generate_sample(1, CFG))


def test_glyph_bitmaps_distinct():
    maps = [glyph_bitmap(c).tobytes() for c in range(12)]
    assert len(set(maps)) == 12
    with pytest.raises(ValueError):
        glyph_bitmap(12)


def test_config_validation():
    with pytest.raises(ValueError):
        generate_sample(0, TaskConfig(image_side=50))
    with pytest.raises(ValueError):
        generate_sample(0, TaskConfig(n_glyphs=3, max_distractors=3))


def test_sample_invariants(big):
    vocab = Vocabulary(CFG.n_glyphs)
    P = CFG.patch_size
    for s in big:
        lay = s.layout
        assert s.answer == vocab.glyph_token(lay["target_class"])
        assert s.question == vocab.question()
        s.roi.validate(CFG.image_side, CFG.image_side)
        tr, tc = lay["target_cell"]
        # target cell fully inside the ROI
        assert s.roi.x0 <= tc * P and (tc + 1) * P <= s.roi.x1
        assert s.roi.y0 <= tr * P and (tr + 1) * P <= s.roi.y1
        dis = lay["distractors"]
        assert len(dis) >= 2
        assert len({c for c, _ in dis}) == len(dis)
        assert all(c != lay["target_class"] for c, _ in dis)


def test_distractor_pixels_never_touch_roi(big):
    P = CFG.patch_size
    for s in big[:3000]:
        inside = np.zeros_like(s.image, dtype=bool)
        inside[s.roi.y0:s.roi.y1, s.roi.x0:s.roi.x1] = True
        for cls, (r, c) in s.layout["distractors"]:
            mask = np.zeros_like(inside)
            bm = glyph_bitmap(cls)
            mask[r * P + 1:r * P + 6, c * P + 1:c * P + 6] = bm
            assert not np.any(mask & inside)
            assert np.all(s.image[mask] == 1.0)


def test_roi_oracle_is_perfect(big):
    assert all(roi_oracle(s, CFG.n_glyphs, CFG.patch_size) == s.answer for s in big[:3000])


def test_histogram_oracle_is_not(big):
    # every image holds the same glyph counts up to ROI shading, so the global histogram is ambiguous
    assert histogram_oracle_accuracy(big[:3000]) < 1.0


def test_class_balance(big):
    counts = np.bincount([s.answer for s in big], minlength=20)[12:20]
    expect = len(big) / CFG.n_glyphs
    assert np.all(np.abs(counts - expect) <= 0.2 * expect)


def test_train_test_disjoint_streams():
    cfg = TaskConfig(train_size=20, test_size=10, seed=3)
    train, test = train_test_split(cfg)
    assert len(train) == 20 and len(test) == 10
    assert test[0].seed[1] == 20
    assert not any(a.same_as(b) for a in train for b in test)


# -- file format -------------------------------------------------------------------

def test_write_read_round_trip(tmp_path):
    ds = generate_dataset(CFG, 5)
    path = tmp_path / "d.jsonl"
    write_dataset(path, ds)
    back = read_dataset(path)
    assert len(back) == 5 and all(a.same_as(b) for a, b in zip(ds, back))
    assert set(json.loads(path.read_text().splitlines()[0])) == {"image", "box", "question", "answer", "seed"}


def test_truncated_file_names_bad_line(tmp_path):
    ds = generate_dataset(CFG, 3)
    path = tmp_path / "d.jsonl"
    write_dataset(path, ds)
    text = path.read_text()
    path.write_text(text[: len(text) - 200])
    with pytest.raises(ValueError, match="line 3"):
        read_dataset(path)


def test_empty_file_is_empty_dataset(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert read_dataset(path) == []


def test_noise_option_keeps_unit_range():
    s = generate_sample(0, TaskConfig(noise=0.2, seed=5))
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0


# -- evaluation ----------------------------------------------------------------------

def _answer(tokens):
    return DecodeResult(prefix_tokens=[2], prefix_probs=[1.0], latents=np.zeros((1, 4)), answer_tokens=tokens,
                        answer_probs=[1.0] * len(tokens), has_start=True, has_end=True, K=1)


def test_uniform_random_glyph_policy_is_at_chance():
    ds = generate_dataset(CFG, 1000)
    rng = np.random.default_rng(0)
    vocab = Vocabulary(CFG.n_glyphs)
    rep = evaluate(lambda s: _answer([vocab.glyph_token(int(rng.integers(8))), 1]), ds)
    p, n = 1 / 8, 1000
    assert abs(rep["accuracy"] - p) <= 3 * np.sqrt(p * (1 - p) / n)


def test_oracle_policy_scores_one():
    ds = generate_dataset(CFG, 100)
    rep = evaluate(lambda s: _answer([roi_oracle(s, CFG.n_glyphs, CFG.patch_size), 1]), ds)
    assert rep["accuracy"] == 1.0 and rep["format_rate"] == 1.0
    assert rep["mean_answer_len"] == 1.0


def test_empty_answer_counts_as_incorrect():
    ds = generate_dataset(CFG, 10)
    rep = evaluate(lambda s: _answer([1]), ds)
    assert rep["accuracy"] == 0.0 and rep["mean_answer_len"] == 0.0


def test_unformatted_answer_still_scored():
    ds = generate_dataset(CFG, 10)
    rep = evaluate(lambda s: DecodeResult(prefix_tokens=[s.answer, 1], prefix_probs=[1.0, 1.0]), ds)
    assert rep["accuracy"] == 1.0 and rep["format_rate"] == 0.0


def test_evaluate_model_report_schema():
    m = TinyVLM(ModelConfig(seed=0))
    rep = evaluate(m, generate_dataset(CFG, 5), K=2)
    for key in ("accuracy", "format_rate", "mean_answer_len", "mean_tokens", "wall_time"):
        assert np.isfinite(rep[key])
    assert rep["wall_time"] > 0
    with pytest.raises(ValueError):
        evaluate(m, [], K=2)


def test_record_with_bad_image_rejected():
    rec = generate_sample(0, CFG).to_record()
    rec["image"] = [1.0, 2.0]
    with pytest.raises(ValueError):
        SynthSample.from_record(rec)
    assert RoiBox.from_list(rec["box"]).as_list() == rec["box"]
