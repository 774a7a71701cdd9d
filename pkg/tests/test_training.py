import json

import numpy as np
import pytest

from gliograd.errors import DataError, NumericalError
from gliograd.models import GradeNetConfig, SegNetConfig, build_grade_net, build_seg_net
from gliograd.phantom import generate_phantom, phantom_cohort
from gliograd.pipeline import PreprocessConfig, preprocess_subject
from gliograd.roi import standardize
from gliograd.training import (ArrayGradeData, HyperParams, SegSample, evaluate_grading, predict_grade,
                               sample_patch, segment_whole_tumor, soft_dice, train_grading, train_segmentation,
                               valid_tile)
from gliograd.volume import grade_index

TINY = GradeNetConfig(input_extent=16, stem_width=4, widths=(4, 8), pool_before=(False, True), fc_widths=(8,),
                      dropout=0.0)
TINY_SEG = SegNetConfig(patch=20, widths=(4, 8), levels=2, spatial_dropout=0.0)


@pytest.fixture(scope="module")
def phantom_rois():
    images, labels = [], []
    for s in phantom_cohort(20, seed=3, extent=40):
        roi = preprocess_subject(generate_phantom(s), PreprocessConfig(extent=16, margin=3))
        images.append(roi.channels)
        labels.append(grade_index(roi.grade))
    return ArrayGradeData(images, labels)


def test_hyper_defaults():
    g = HyperParams.grading()
    assert (g.lr, g.dropout, g.weight_decay, g.batch_size) == (1e-4, 0.4, 1e-4, 8)
    s = HyperParams.segmentation()
    assert (s.lr, s.dropout, s.weight_decay, s.batch_size) == (5e-5, 0.05, 1e-6, 4)
    assert g.max_epochs == 100 and g.patience == 15
    with pytest.raises(ValueError):
        HyperParams.grading(lr=0)


def test_separable_phantoms_fit_within_30_epochs(phantom_rois):
    model = build_grade_net(TINY, seed=0)
    hyper = HyperParams.grading(lr=3e-3, max_epochs=30, patience=30, dropout=0.0)
    res = train_grading(model, phantom_rois, phantom_rois, hyper)
    acc, _, _ = evaluate_grading(res.model, phantom_rois)
    assert acc == 1.0
    assert res.best_epoch <= 30


def test_training_is_deterministic(phantom_rois, tmp_path):
    hyper = HyperParams.grading(lr=1e-3, max_epochs=2, patience=5)
    runs = []
    for k in range(2):
        res = train_grading(build_grade_net(TINY, seed=1), phantom_rois, phantom_rois, hyper,
                            log_path=tmp_path / f"log{k}.jsonl", checkpoint_path=tmp_path / f"m{k}.ckpt")
        runs.append(res)
    logs = [[{k: v for k, v in json.loads(line).items() if k != "time"}
             for line in (tmp_path / f"log{k}.jsonl").read_text().splitlines()] for k in range(2)]
    assert logs[0] == logs[1] and len(logs[0]) == 2
    assert "time" in json.loads((tmp_path / "log0.jsonl").read_text().splitlines()[0])
    assert (tmp_path / "m0.ckpt").read_bytes() == (tmp_path / "m1.ckpt").read_bytes()


def test_non_finite_loss_aborts(phantom_rois):
    bad = ArrayGradeData([np.full_like(phantom_rois.images[0], np.nan)] * 4, [0, 1, 0, 1])
    with pytest.raises(NumericalError, match="epoch 1, batch 0"):
        train_grading(build_grade_net(TINY), bad, bad, HyperParams.grading(max_epochs=1))


def test_predict_grade_tie_and_shape():
    model = build_grade_net(TINY, seed=0)
    model.params["out.w"][:] = 0
    model.params["out.b"][:] = 0
    out = predict_grade(model, np.random.default_rng(0).normal(size=(4, 16, 16, 16)))
    assert out.probabilities == (0.5, 0.5) and out.grade == "HGG" and out.tie
    pred = out.as_prediction("s", "LGG")
    assert pred.tie and pred.score == 0.5
    with pytest.raises(ValueError):
        predict_grade(model, np.zeros((4, 8, 8, 8)))


def test_predict_grade_probabilities_sum_to_one():
    model = build_grade_net(TINY, seed=2)
    p = predict_grade(model, np.random.default_rng(1).normal(size=(4, 16, 16, 16))).probabilities
    assert abs(sum(p) - 1.0) < 1e-6


# ------------------------------------------------------------------ segmentation

def seg_samples(n, extent=40, seed=0):
    out = []
    for i, s in enumerate(phantom_cohort(n, seed, extent=extent)):
        vs = standardize(generate_phantom(s), "brain-mask")
        out.append(SegSample(vs.channels, vs.tumor_mask, vs.brain_mask, str(i)))
    return out


def test_sample_patch_geometry():
    s = seg_samples(1)[0]
    model = build_seg_net(TINY_SEG)
    rng = np.random.default_rng(0)
    x, y = sample_patch(s, 20, model.output_extent(), rng, tumor_prob=1.0)
    assert x.shape == (4, 20, 20, 20) and y.shape == (model.output_extent(),) * 3
    assert y.any()  # centred on a tumour voxel


def test_sliding_window_matches_single_large_tile():
    model = build_seg_net(TINY_SEG, seed=0)
    vol = seg_samples(1, extent=40)[0].channels
    a = segment_whole_tumor(model, vol, probabilities=True)
    big = valid_tile(model, 56)
    b = segment_whole_tumor(model, vol, tile=big, probabilities=True)
    assert a.shape == vol.shape[1:]
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_constant_network_gives_seamless_constant_mask():
    model = build_seg_net(TINY_SEG, seed=0)
    model.params["head.conv.w"][:] = 0
    model.params["head.conv.b"][:] = [0.0, 1.0]
    mask = segment_whole_tumor(model, np.random.default_rng(0).normal(size=(4, 23, 31, 20)))
    assert mask.dtype == np.uint8 and set(np.unique(mask)) == {1}
    model.params["head.conv.b"][:] = [1.0, 0.0]
    assert not segment_whole_tumor(model, np.zeros((4, 20, 20, 20))).any()


def test_segment_rejects_small_volume_and_bad_tile():
    model = build_seg_net(TINY_SEG)
    with pytest.raises(DataError, match="pad"):
        segment_whole_tumor(model, np.zeros((4, 10, 30, 30)))
    with pytest.raises(ValueError):
        segment_whole_tumor(model, np.zeros((4, 30, 30, 30)), tile=21)


def test_soft_dice():
    t = np.zeros((4, 4)); t[:2] = 1
    assert soft_dice(t, t) == pytest.approx(1.0)
    assert soft_dice(np.zeros((4, 4)), t) == pytest.approx(0.0, abs=1e-6)


def test_segmentation_training_runs_and_is_deterministic(tmp_path):
    data = seg_samples(3, extent=40)
    hyper = HyperParams.segmentation(lr=1e-3, max_epochs=2, steps_per_epoch=2, batch_size=2)
    logs = []
    for k in range(2):
        res = train_segmentation(build_seg_net(TINY_SEG, seed=0), data[:2], data[2:], hyper,
                                 log_path=tmp_path / f"s{k}.jsonl")
        assert 0.0 <= res.best_metric <= 1.0
        logs.append([{k: v for k, v in json.loads(line).items() if k != "time"}
                     for line in (tmp_path / f"s{k}.jsonl").read_text().splitlines()])
    assert logs[0] == logs[1]
