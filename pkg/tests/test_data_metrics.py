import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dupsample.data_metrics import (
    ConfusionMatrix,
    LabelFormatError,
    SynthSpec,
    generate,
    generate_dataset,
    miou,
    one_hot,
    read_labelmap,
    write_labelmap,
)


def set_miou(pred, gt, classes):
    """Per-class pixel-set intersection over union, averaged over present classes."""
    ious = []
    for c in range(classes):
        p = {ij for ij in zip(*np.nonzero(pred == c))}
        g = {ij for ij in zip(*np.nonzero(gt == c))}
        if p | g:
            ious.append(len(p & g) / len(p | g))
    return sum(ious) / len(ious)


class TestGenerate:
    def test_stripes(self):
        m = generate(SynthSpec("stripes", 8, 8, 2, period=4))
        assert (m == np.array([0, 0, 0, 0, 1, 1, 1, 1])[None, :]).all()

    def test_checker(self):
        m = generate(SynthSpec("checker", 4, 4, 2, period=2))
        assert m.tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [1, 1, 0, 0], [1, 1, 0, 0]]

    def test_same_seed_same_map(self):
        spec = SynthSpec("blobs", 32, 32, 5, seed=11)
        np.testing.assert_array_equal(generate(spec), generate(spec))
        a = generate_dataset(spec, 3)
        b = generate_dataset(spec, 3)
        assert all((x == y).all() for x, y in zip(a, b))

    def test_zero_blobs_is_background(self):
        assert not generate(SynthSpec("blobs", 9, 7, 3, seed=1, n_blobs=0)).any()

    def test_blobs_use_valid_classes(self):
        m = generate(SynthSpec("blobs", 32, 32, 4, seed=2, n_blobs=10))
        assert m.min() >= 0 and m.max() < 4

    @pytest.mark.parametrize("kw", [dict(classes=1), dict(period=0), dict(radius=(0, 3)), dict(kind="dots")])
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            SynthSpec(**kw)

    def test_blobs_spatially_correlated(self):
        # lag-1 autocorrelation of the one-hot indicator, pooled over classes
        for seed in range(20):
            m = generate(SynthSpec("blobs", 32, 32, 4, seed=seed))
            oh = one_hot(m, 4)
            oh = oh - oh.mean(axis=(0, 1))
            num = np.sum(oh[1:] * oh[:-1]) + np.sum(oh[:, 1:] * oh[:, :-1])
            assert num > 0


class TestOneHot:
    def test_single(self):
        assert one_hot(np.array([[2]]), 3)[0, 0].tolist() == [0, 0, 1]

    def test_argmax_and_counts(self):
        m = generate(SynthSpec("blobs", 16, 16, 5, seed=4))
        oh = one_hot(m, 5)
        np.testing.assert_array_equal(oh.argmax(axis=2), m)
        np.testing.assert_array_equal(oh.sum(axis=(0, 1)), np.bincount(m.ravel(), minlength=5))
        assert (oh.sum(axis=2) == 1).all()

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            one_hot(np.array([[3]]), 3)


class TestMiou:
    def test_perfect(self):
        m = generate(SynthSpec("blobs", 16, 16, 4, seed=0))
        assert miou(m, m, 4).miou == 1.0

    def test_hand_counted(self):
        rep = miou(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]), 2)
        assert rep.per_class_iou[0] == pytest.approx(0.5)
        assert rep.per_class_iou[1] == pytest.approx(2 / 3)
        assert rep.miou == pytest.approx(7 / 12)
        assert rep.pixel_acc == pytest.approx(0.75)

    def test_all_wrong_binary(self):
        gt = np.array([[0, 1], [1, 0]])
        assert miou(1 - gt, gt, 2).miou == 0.0

    def test_absent_classes_excluded(self):
        rep = miou(np.zeros((2, 2), int), np.zeros((2, 2), int), 5)
        assert rep.miou == 1.0
        assert np.isnan(rep.per_class_iou[1:]).all()

    def test_ignore_mask(self):
        gt = np.array([[0, 1], [1, 1]])
        pred = np.array([[0, 1], [1, 0]])
        ignore = np.array([[False, False], [False, True]])
        assert miou(pred, gt, 2, ignore).miou == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            miou(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)

    def test_confusion_invariants(self, rng):
        cm = ConfusionMatrix(3)
        for _ in range(4):
            cm.update(rng.integers(0, 3, (5, 5)), rng.integers(0, 3, (5, 5)))
        assert cm.total == 100 and (cm.counts >= 0).all()

    @given(st.integers(2, 6), st.integers(0, 2 ** 32 - 1))
    def test_relabel_symmetry(self, c, seed):
        rng = np.random.default_rng(seed)
        gt = rng.integers(0, c, (8, 8))
        pred = rng.integers(0, c, (8, 8))
        perm = rng.permutation(c)
        assert miou(perm[pred], perm[gt], c).miou == pytest.approx(miou(pred, gt, c).miou, abs=1e-12)

    @settings(max_examples=100)
    @given(st.integers(1, 16), st.integers(1, 16), st.integers(2, 5), st.integers(0, 2 ** 32 - 1))
    def test_matches_set_oracle(self, h, w, c, seed):
        rng = np.random.default_rng(seed)
        gt = rng.integers(0, c, (h, w))
        pred = np.where(rng.random((h, w)) < 0.6, gt, rng.integers(0, c, (h, w)))
        assert miou(pred, gt, c).miou == set_miou(pred, gt, c)

    def test_csv(self):
        text = miou(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]), 3).to_csv()
        lines = text.splitlines()
        assert lines[0] == "class,iou"
        assert lines[1] == "0,0.5"
        assert lines[3] == "2,"
        assert lines[4] == "miou,0.583333333"


class TestLabelFiles:
    def test_round_trip(self, tmp_path):
        m = generate(SynthSpec("blobs", 13, 9, 6, seed=5))
        p = tmp_path / "m.dupl"
        write_labelmap(p, m, 6)
        back, c = read_labelmap(p)
        assert c == 6
        np.testing.assert_array_equal(back, m)
        write_labelmap(tmp_path / "again.dupl", back, c)
        assert (tmp_path / "again.dupl").read_bytes() == p.read_bytes()

    def test_header_arithmetic(self, tmp_path):
        # magic + four u32 fields (version, H, W, C) = 20 bytes, then one byte per pixel
        p = tmp_path / "one.dupl"
        write_labelmap(p, np.zeros((1, 1), int), 2)
        data = p.read_bytes()
        assert len(data) == 21
        assert data[:4] == b"DUPL" and data[-1:] == b"\x00"

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.dupl"
        p.write_bytes(b"NOPE" + bytes(17))
        with pytest.raises(LabelFormatError, match="magic"):
            read_labelmap(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.dupl"
        write_labelmap(p, np.zeros((3, 3), int), 2)
        p.write_bytes(p.read_bytes()[:-2])
        with pytest.raises(LabelFormatError, match="truncated"):
            read_labelmap(p)

    def test_label_exceeds_declared_classes(self, tmp_path):
        p = tmp_path / "x.dupl"
        write_labelmap(p, np.ones((2, 2), int), 2)
        data = bytearray(p.read_bytes())
        data[-1] = 7
        p.write_bytes(bytes(data))
        with pytest.raises(LabelFormatError):
            read_labelmap(p)

    def _pgm(self, tmp_path, pixels, maxval=255, comment=False):
        h, w = pixels.shape
        head = b"P5\n" + (b"# labels\n" if comment else b"") + f"{w} {h}\n{maxval}\n".encode()
        p = tmp_path / "m.pgm"
        p.write_bytes(head + pixels.astype(np.uint8).tobytes())
        return p

    def test_pgm_read(self, tmp_path):
        px = np.array([[0, 1, 2], [3, 2, 1]])
        labels, c = read_labelmap(self._pgm(tmp_path, px, comment=True), classes=4)
        np.testing.assert_array_equal(labels, px)
        assert c == 4

    def test_pgm_value_over_classes_rejected(self, tmp_path):
        px = np.array([[0, 9], [1, 2]])
        with pytest.raises(LabelFormatError):
            read_labelmap(self._pgm(tmp_path, px, maxval=255), classes=8)

    def test_pgm_maxval_too_large(self, tmp_path):
        p = tmp_path / "big.pgm"
        p.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(LabelFormatError, match="maxval"):
            read_labelmap(p, classes=2)
