import numpy as np
import pytest

from trupnet.data import synth_dataset
from trupnet.errors import ContractError, ShapeError
from trupnet.metrics import (
    FpsStats,
    binary_counts,
    evaluate_dataset,
    measure_fps,
    metrics_from_counts,
)
from trupnet.model import ModelConfig, TransRUPNet
from trupnet.tensor import Tensor


def counting_oracle(pred, gt):
    # independent per-pixel loop
    tp = fp = fn = tn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p == 1 and g == 1:
            tp += 1
        elif p == 1 and g == 0:
            fp += 1
        elif p == 0 and g == 1:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def metric_oracle(tp, fp, fn):
    e = 1e-7
    dice = (2 * tp + e) / (2 * tp + fp + fn + e)
    iou = (tp + e) / (tp + fp + fn + e)
    recall = (tp + e) / (tp + fn + e)
    precision = (tp + e) / (tp + fp + e)
    f2 = (5 * precision * recall + e) / (4 * precision + recall + e)
    return dice, iou, recall, precision, f2


def test_binary_counts_examples():
    same = np.array([[1.0, 0.0], [1.0, 1.0]], dtype=np.float32)
    tp, fp, fn, tn = binary_counts(same, same)
    assert (fp, fn) == (0, 0)
    inverted = 1.0 - same
    tp, fp, fn, tn = binary_counts(inverted, same)
    assert (tp, tn) == (0, 0)
    pred = np.array([[1.0, 1.0], [0.0, 0.0]], dtype=np.float32)
    gt = np.array([[1.0, 0.0], [0.0, 0.0]], dtype=np.float32)
    assert binary_counts(pred, gt) == (1, 1, 0, 2)


def test_binary_counts_rejects_non_binary():
    with pytest.raises(ContractError):
        binary_counts(np.array([0.5]), np.array([1.0]))
    with pytest.raises(ShapeError):
        binary_counts(np.zeros(3), np.zeros(4))


def test_metrics_from_counts_hand_values():
    dice, iou, recall, precision, f2 = metrics_from_counts(1, 1, 0)
    assert dice == pytest.approx(2.0 / 3.0, abs=1e-6)
    assert iou == pytest.approx(0.5, abs=1e-6)
    assert recall == pytest.approx(1.0, abs=1e-6)
    assert precision == pytest.approx(0.5, abs=1e-6)
    assert f2 == pytest.approx(5 * 0.5 * 1.0 / (4 * 0.5 + 1.0), abs=1e-6)


def test_metrics_perfect_and_f2_collapse():
    assert all(v == pytest.approx(1.0, abs=1e-6) for v in metrics_from_counts(10, 0, 0))
    # P == R makes F-beta collapse to that value
    dice, iou, recall, precision, f2 = metrics_from_counts(4, 2, 2)
    assert precision == pytest.approx(recall)
    assert f2 == pytest.approx(precision, abs=1e-6)


def test_metrics_empty_empty_scores_one():
    assert all(v == pytest.approx(1.0, abs=1e-5) for v in metrics_from_counts(0, 0, 0))


def test_metrics_negative_counts():
    with pytest.raises(ContractError):
        metrics_from_counts(-1, 0, 0)


def test_metrics_bounded_property():
    rng = np.random.default_rng(0)
    for _ in range(300):
        tp, fp, fn = (int(v) for v in rng.integers(0, 50, 3))
        for v in metrics_from_counts(tp, fp, fn):
            assert 0.0 <= v <= 1.0 + 1e-9


def test_dice_iou_identity():
    rng = np.random.default_rng(1)
    for _ in range(200):
        tp, fp, fn = (int(v) for v in rng.integers(0, 30, 3))
        dice, iou, *_ = metrics_from_counts(tp, fp, fn)
        assert dice == pytest.approx(2.0 * iou / (1.0 + iou), abs=1e-5)


def test_metrics_match_oracle_on_random_masks():
    rng = np.random.default_rng(2)
    for _ in range(100):
        pred = (rng.uniform(0, 1, (16, 16)) > 0.5).astype(np.float32)
        gt = (rng.uniform(0, 1, (16, 16)) > 0.5).astype(np.float32)
        counts = binary_counts(pred, gt)
        assert counts == counting_oracle(pred, gt)
        ours = metrics_from_counts(*counts[:3])
        expected = metric_oracle(*counts[:3])
        for a, b in zip(ours, expected):
            assert a == pytest.approx(b, abs=1e-6)


class _StubModel:
    """predict_mask returns a canned mask per sample id."""

    def __init__(self, masks):
        self.masks = masks
        self.calls = 0

    def predict_mask(self, x, threshold=None):
        mask = self.masks[self.calls % len(self.masks)]
        self.calls += 1
        return Tensor(mask[np.newaxis])


def _mask_sample(mask, sid):
    from trupnet.data import Sample

    img = np.zeros((3,) + mask.shape, dtype=np.float32)
    return Sample(image=Tensor(img), mask=Tensor(mask[np.newaxis].astype(np.float32)), id=sid)


def test_evaluate_dataset_perfect_and_mean():
    m1 = np.ones((4, 4), dtype=np.float32)
    s1 = _mask_sample(m1, "a")
    model = _StubModel([m1[np.newaxis]])
    report = evaluate_dataset(model, [s1])
    assert report.aggregate.mdsc == pytest.approx(1.0, abs=1e-6)
    assert report.aggregate.miou == pytest.approx(1.0, abs=1e-6)

    # dice values {1.0, 0.5} -> mDSC 0.75
    gt = np.zeros((4, 4), dtype=np.float32)
    gt[0, 0] = gt[0, 1] = 1.0
    half = np.zeros((4, 4), dtype=np.float32)
    half[0, 0] = half[0, 2] = 1.0  # tp=1, fp=1, fn=1 -> dice 0.5
    s_perfect = _mask_sample(gt, "p")
    s_half = _mask_sample(gt, "h")
    model = _StubModel([gt[np.newaxis], half[np.newaxis]])
    report = evaluate_dataset(model, [s_perfect, s_half])
    assert report.per_image[0].dice == pytest.approx(1.0, abs=1e-6)
    assert report.per_image[1].dice == pytest.approx(0.5, abs=1e-6)
    assert report.aggregate.mdsc == pytest.approx(0.75, abs=1e-6)
    assert report.aggregate.mdsc == pytest.approx((report.per_image[0].dice + report.per_image[1].dice) / 2, abs=1e-12)


def test_evaluate_dataset_empty():
    with pytest.raises(ContractError):
        evaluate_dataset(_StubModel([np.ones((1, 2, 2))]), [])


def test_evaluate_dataset_matches_oracle_end_to_end():
    model = TransRUPNet(ModelConfig.tiny(input_size=(32, 32)), seed=0)
    samples = synth_dataset(4, 32, seed=5)
    report = evaluate_dataset(model, samples)
    for s, m in zip(samples, report.per_image):
        pred = model.predict_mask(Tensor(s.image.data[np.newaxis])).data[0]
        tp, fp, fn, _ = counting_oracle(pred, s.mask.data)
        expected = metric_oracle(tp, fp, fn)
        assert m.dice == pytest.approx(expected[0], abs=1e-6)
        assert m.f2 == pytest.approx(expected[4], abs=1e-6)


def test_evaluate_dataset_permutation_invariant():
    model = TransRUPNet(ModelConfig.tiny(input_size=(32, 32)), seed=0)
    samples = synth_dataset(5, 32, seed=6)
    fwd = evaluate_dataset(model, samples).aggregate
    rev = evaluate_dataset(model, samples[::-1]).aggregate
    assert fwd.mdsc == pytest.approx(rev.mdsc, abs=1e-9)
    assert fwd.f2 == pytest.approx(rev.f2, abs=1e-9)


def test_report_csv_format(tmp_path):
    m1 = np.ones((2, 2), dtype=np.float32)
    report = evaluate_dataset(_StubModel([m1[np.newaxis]]), [_mask_sample(m1, "img0")])
    out = tmp_path / "report.csv"
    report.write_csv(out)
    lines = out.read_text().splitlines()
    assert lines[0] == "image,dice,iou,recall,precision,f2"
    assert lines[1].startswith("img0,")
    assert lines[-1].startswith("AGGREGATE,")
    assert len(lines) == 3


class StubClock:
    def __init__(self, step_s):
        self.t = 0.0
        self.step = step_s

    def __call__(self):
        now = self.t
        self.t += self.step
        return now


def test_measure_fps_stub_2125ms():
    stats = measure_fps(lambda x: x, (1, 3, 4, 4), n_warmup=3, n_timed=100, clock=StubClock(0.02125))
    assert stats.fps == pytest.approx(47.0588, abs=0.01)
    assert 47.05 <= stats.fps <= 47.07


def test_measure_fps_stub_one_second():
    stats = measure_fps(lambda x: x, (1, 3, 4, 4), n_warmup=0, n_timed=5, clock=StubClock(1.0))
    assert stats.fps == pytest.approx(1.0, abs=1e-9)
    assert len(stats.per_frame_ms) == 5
    assert stats.n_frames == 5
    assert stats.fps == pytest.approx(stats.n_frames / stats.total_seconds)


def test_measure_fps_non_monotonic_clock():
    class Backwards:
        def __init__(self):
            self.t = 100.0

        def __call__(self):
            self.t -= 1.0
            return self.t

    with pytest.raises(ContractError):
        measure_fps(lambda x: x, (1, 3, 4, 4), n_warmup=0, n_timed=2, clock=Backwards())


def test_measure_fps_requires_frames():
    with pytest.raises(ContractError):
        measure_fps(lambda x: x, (1, 3, 4, 4), n_warmup=0, n_timed=0)


def test_fps_stats_text_format():
    stats = FpsStats(n_frames=4, total_seconds=0.4, fps=10.0, per_frame_ms=[100.0, 100.0, 100.0, 100.0])
    text = stats.to_text()
    kv = dict(line.split("=") for line in text.strip().splitlines())
    assert set(kv) == {"n_frames", "total_seconds", "fps", "p50_ms", "p95_ms"}
    assert float(kv["fps"]) == pytest.approx(10.0)
    assert float(kv["p50_ms"]) == pytest.approx(100.0)
