"""Evaluation: upsampling, boxes, crop-refeed identity, reports, export."""

import csv
import json

import numpy as np
import pytest

import privpool.eval as eval_mod
from privpool.eval import (EvalReport, attention_box, bilinear_upsample,
                           crop_and_resize, evaluate, export_attention)
from privpool.model import Model, ModelConfig, predict_proba

EVAL_MODEL = dict(num_classes=3, input_size=64, backbone_widths=(4, 8),
                  block_strides=(4, 4), num_keypoints=3, num_complementary=1,
                  reduced_dim=4)


def model_for(mode, seed=0):
    return Model(ModelConfig(pool_mode=mode, **EVAL_MODEL), seed=seed)


# ---------------------------------------------------------------- upsample

def test_bilinear_upsample_identity_at_same_size():
    g = np.random.default_rng(0).random((5, 5))
    assert np.array_equal(bilinear_upsample(g, 5), g)


def test_bilinear_upsample_hand_case_2x2_to_4():
    # centers at (i+0.5)/2 - 0.5 = [-.25, .25, .75, 1.25], clipped to [0,1]
    g = np.array([[0.0, 1.0], [2.0, 3.0]])
    want = np.array([[0.0, 0.25, 0.75, 1.0],
                     [0.5, 0.75, 1.25, 1.5],
                     [1.5, 1.75, 2.25, 2.5],
                     [2.0, 2.25, 2.75, 3.0]])
    assert np.allclose(bilinear_upsample(g, 4), want, atol=1e-12)


def test_bilinear_upsample_constant_grid():
    out = bilinear_upsample(np.full((3, 3), 0.7), 64)
    assert np.allclose(out, 0.7, atol=1e-12)


def test_bilinear_upsample_range_bounded():
    g = np.random.default_rng(1).random((4, 4))
    up = bilinear_upsample(g, 32)
    assert up.min() >= g.min() - 1e-12 and up.max() <= g.max() + 1e-12


# ---------------------------------------------------------------- boxes

def test_attention_box_constant_map_is_full_image():
    maps = np.full((8, 8, 2), 0.5)
    assert attention_box(maps, upscale_to=64) == (0, 0, 64, 64)


def test_attention_box_localizes_single_cell():
    maps = np.zeros((8, 8, 1))
    maps[2, 5, 0] = 1.0
    x0, y0, x1, y1 = attention_box(maps, upscale_to=64)
    # cell (2,5) covers pixels rows 16..23, cols 40..47
    assert x0 <= 43 < x1 and y0 <= 19 < y1
    assert (x1 - x0) <= 24 and (y1 - y0) <= 24  # tight, not the whole image


def test_attention_box_validates_rank():
    with pytest.raises(ValueError):
        attention_box(np.zeros((8, 8)))


def test_crop_and_resize_full_box_is_identity():
    img = np.random.default_rng(2).random((16, 16, 3))
    out = crop_and_resize(img, (0, 0, 16, 16))
    assert np.array_equal(out, img)


def test_crop_and_resize_half_box_hand_case():
    img = np.arange(16, dtype=float).reshape(4, 4)
    out = crop_and_resize(img, (0, 0, 2, 2))
    # nearest-neighbor sources [0,0,1,1] in each axis
    want = img[[0, 0, 1, 1]][:, [0, 0, 1, 1]]
    assert np.array_equal(out, want)


def test_crop_and_resize_rejects_bad_box():
    img = np.zeros((8, 8, 3))
    with pytest.raises(ValueError):
        crop_and_resize(img, (4, 0, 4, 8))  # empty in x
    with pytest.raises(ValueError):
        crop_and_resize(img, (0, 0, 9, 8))  # past the edge


# ---------------------------------------------------------------- evaluate

def test_evaluate_matches_manual_argmax(tiny_dataset):
    model = model_for("avg")
    samples = tiny_dataset.split("val_cis")
    report = evaluate(model, samples, 3, split_name="val_cis")
    probs = predict_proba(model, np.stack([s.image for s in samples]))
    want = np.mean(probs.argmax(axis=1) == [s.label for s in samples])
    assert report.top1 == pytest.approx(float(want), abs=1e-12)
    assert report.n == len(samples)
    assert report.split == "val_cis" and report.crop_refeed is False
    assert sum(sum(r) for r in report.confusion) == len(samples)
    assert report.support == [2, 2, 2]


def test_evaluate_batch_size_does_not_change_result(tiny_dataset):
    model = model_for("avg_pr")
    samples = tiny_dataset.split("train")
    a = evaluate(model, samples, 3, batch_size=4)
    b = evaluate(model, samples, 3, batch_size=32)
    assert a.top1 == b.top1 and a.confusion == b.confusion


def test_evaluate_absent_class_gets_nan(tiny_dataset):
    model = model_for("avg")
    report = evaluate(model, tiny_dataset.split("val_cis"), 4)
    assert np.isnan(report.per_class[3])
    assert report.support[3] == 0
    assert not np.isnan(report.mean_per_class)


def test_evaluate_validates(tiny_dataset):
    with pytest.raises(ValueError):
        evaluate(model_for("avg"), [], 3)
    with pytest.raises(ValueError):
        evaluate(model_for("avg"), tiny_dataset.split("val_cis"), 3,
                 crop_refeed=True)  # no attention maps in avg mode


def test_crop_refeed_runs_with_attention(tiny_dataset):
    model = model_for("avg_pr")
    samples = tiny_dataset.split("val_cis")
    report = evaluate(model, samples, 3, crop_refeed=True)
    assert report.crop_refeed is True
    assert 0.0 <= report.top1 <= 1.0


def test_crop_refeed_full_box_is_bit_identical(tiny_dataset, monkeypatch):
    # a full-image box makes the second pass see the identical input,
    # so averaging the two softmax outputs must not move a single bit
    model = model_for("avg_pr")
    samples = tiny_dataset.split("val_cis")
    plain = evaluate(model, samples, 3)
    monkeypatch.setattr(eval_mod, "attention_box",
                        lambda maps, **kw: (0, 0, 64, 64))
    refeed = evaluate(model, samples, 3, crop_refeed=True)
    assert refeed.top1 == plain.top1
    assert refeed.confusion == plain.confusion
    assert refeed.per_class == plain.per_class


# ---------------------------------------------------------------- reports

def test_report_save_json_roundtrip(tmp_path, tiny_dataset):
    report = evaluate(model_for("avg"), tiny_dataset.split("val_cis"), 3,
                      split_name="val_cis")
    report.save_json(tmp_path / "r.json")
    loaded = json.loads((tmp_path / "r.json").read_text())
    assert loaded["split"] == "val_cis"
    assert loaded["top1"] == report.top1
    assert loaded["confusion"] == report.confusion
    assert set(loaded) == {"split", "crop_refeed", "n", "top1", "per_class",
                           "support", "mean_per_class", "confusion"}


def test_report_save_confusion_csv(tmp_path, tiny_dataset):
    report = evaluate(model_for("avg"), tiny_dataset.split("val_cis"), 3)
    report.save_confusion_csv(tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["true\\pred", "0", "1", "2"]
    assert len(rows) == 4
    got = [[int(v) for v in row[1:]] for row in rows[1:]]
    assert got == report.confusion


# ---------------------------------------------------------------- export

def test_export_attention_writes_expected_files(tmp_path, tiny_dataset):
    model = model_for("avg_pr")
    samples = tiny_dataset.split("val_cis")[:2]
    written = export_attention(model, samples, tmp_path / "maps",
                               ("head", "body", "tail"))
    # per sample: box overlay + 3 keypoint maps + 1 comp map + 2 means
    assert len(written) == 2 * 7
    names = sorted(p.split("/")[-1] for p in map(str, written))
    assert "0000_input_box.png" in names
    assert "0000_map_head.png" in names and "0001_map_comp0.png" in names
    assert "0001_mean_supervised.png" in names
    for p in written:
        assert (tmp_path / "maps" / p.split("/")[-1]).exists()


def test_export_attention_validates(tmp_path, tiny_dataset):
    samples = tiny_dataset.split("val_cis")[:1]
    with pytest.raises(ValueError):
        export_attention(model_for("avg"), samples, tmp_path, ("h", "b", "t"))
    with pytest.raises(ValueError):
        export_attention(model_for("avg_pr"), samples, tmp_path, ("head",))
