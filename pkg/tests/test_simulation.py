import gzip
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covbalance import (ConvolutionalDgp, Dataset, FullyConnectedDgp,
                        GeneratedStudy, ImageStore, Method, ReplicationReport,
                        RngStream, ShallowDgp, SchemaError, downscale,
                        generate, load_idx, replicate, synthetic_digit_images,
                        true_att, write_idx)
from covbalance.studies import est_raw

from conftest import write_idx_images, write_idx_labels


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def test_shallow_treated_fraction_near_half():
    study = generate(ShallowDgp(100_000), RngStream(1))
    frac = study.data.n1 / study.data.n
    assert abs(frac - 0.5) < 0.01
    assert np.array_equal(study.y0, study.y1)  # no effect
    assert true_att(ShallowDgp(100)) == 0.0


def test_fully_connected_treated_fraction_and_truth():
    study = generate(FullyConnectedDgp(100_000), RngStream(2))
    frac = study.data.n1 / study.data.n
    assert abs(frac - 0.5) < 0.01
    assert true_att(FullyConnectedDgp(100)) == -1.0


def test_fully_connected_sum_symmetry():
    # sum(X) restricted to the treated arm averages to zero: the parity
    # indicator is invariant under the global sign flip of X
    total = 0.0
    count = 0
    for chunk in range(10):
        study = generate(FullyConnectedDgp(200_000), RngStream(3, chunk))
        s = study.data.x.sum(axis=1)
        total += s[study.data.t == 1].sum()
        count += study.data.n1
    assert count >= 1_000_000 * 0.49
    assert abs(total / count) < 0.01


def test_fully_connected_raw_bias_is_negative():
    # the treated side misses the fat tails of exp(sum X)
    errs = []
    for rep in range(40):
        study = generate(FullyConnectedDgp(1000), RngStream(4, rep))
        d = study.data
        errs.append(d.y[d.t == 1].mean() - d.y[d.t == 0].mean()
                    - study.sample_att)
    assert np.mean(errs) < -3.0


def test_fc_effect_is_sum_minus_one():
    study = generate(FullyConnectedDgp(500), RngStream(5))
    s = study.data.x.sum(axis=1)
    assert np.allclose(study.y1 - study.y0, s - 1.0)


def test_convolutional_hand_built_truth():
    # four images, two digits; brightness known exactly
    images = np.stack([
        np.full((4, 4), 0.10), np.full((4, 4), 0.20),
        np.full((4, 4), 0.30), np.full((4, 4), 0.40),
    ])
    store = ImageStore(images, np.array([3, 3, 7, 7]))
    spec = ConvolutionalDgp(n=40, treated_fractions=(0.0,) * 3 + (0.5,)
                            + (0.0,) * 3 + (0.5,) + (0.0,) * 2)
    study = generate(spec, RngStream(6), image_store=store)
    d = study.data
    assert d.n1 > 0
    bright = d.x.mean(axis=1)
    # treated are the lightest half of each drawn digit group
    assert set(np.round(bright[d.t == 1], 2)) <= {0.10, 0.30}
    expected = bright[d.t == 1].mean() - 1.0
    assert abs(true_att(spec, study) - expected) < 1e-12
    assert abs(study.sample_att - expected) < 1e-12


def test_convolutional_zero_fractions_give_no_treated():
    store = synthetic_digit_images(300, RngStream(7), side=8)
    spec = ConvolutionalDgp(n=50, treated_fractions=(0.0,) * 10)
    study = generate(spec, RngStream(8), image_store=store)
    assert study.data.n1 == 0
    with pytest.raises(ValueError):
        study.data.require_arms()


def test_convolutional_draws_only_available_digits():
    images = np.zeros((4, 4, 4))
    store = ImageStore(images, np.array([0, 0, 1, 1]))
    spec = ConvolutionalDgp(n=60)
    study = generate(spec, RngStream(9), image_store=store)
    assert set(np.unique(study.y0)) <= {0.0, 1.0, 2.0}  # clip(digit + noise)


def test_convolutional_outcome_formula():
    store = synthetic_digit_images(500, RngStream(10), side=8)
    spec = ConvolutionalDgp(n=80)
    study = generate(spec, RngStream(11), image_store=store)
    assert np.all(study.y0 >= 0.0) and np.all(study.y0 <= 9.0)
    bright = study.data.x.mean(axis=1)
    assert np.allclose(study.y1 - study.y0, bright - 1.0)


# ---------------------------------------------------------------------------
# IDX parsing
# ---------------------------------------------------------------------------

def test_idx_round_trip_hand_fixture(tmp_path):
    pixels = np.array([[[0, 128], [255, 7]], [[1, 2], [3, 4]]], dtype=np.uint8)
    labels = [5, 9]
    img_path = tmp_path / "imgs.idx"
    lab_path = tmp_path / "labs.idx"
    write_idx_images(img_path, pixels)
    write_idx_labels(lab_path, labels)
    store = load_idx(str(img_path), str(lab_path))
    assert store.images.shape == (2, 2, 2)
    assert np.array_equal(store.labels, labels)
    assert np.array_equal(store.images, pixels.astype(float) / 255.0)


def test_idx_gzip_transparent(tmp_path):
    pixels = np.arange(16, dtype=np.uint8).reshape(1, 4, 4)
    raw_img = struct.pack(">IIII", 2051, 1, 4, 4) + pixels.tobytes()
    raw_lab = struct.pack(">II", 2049, 1) + bytes([3])
    plain_i, plain_l = tmp_path / "a.idx", tmp_path / "b.idx"
    gz_i, gz_l = tmp_path / "a.idx.gz", tmp_path / "b.idx.gz"
    plain_i.write_bytes(raw_img)
    plain_l.write_bytes(raw_lab)
    with gzip.open(gz_i, "wb") as fh:
        fh.write(raw_img)
    with gzip.open(gz_l, "wb") as fh:
        fh.write(raw_lab)
    a = load_idx(str(plain_i), str(plain_l))
    b = load_idx(str(gz_i), str(gz_l))
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)


def test_idx_wrong_magic_rejected(tmp_path):
    lab_path = tmp_path / "labs.idx"
    write_idx_labels(lab_path, [1, 2])
    # labels file offered as images: magic 2049 != 2051
    with pytest.raises(SchemaError):
        load_idx(str(lab_path), str(lab_path))


def test_idx_truncated_and_mismatched(tmp_path):
    img_path = tmp_path / "imgs.idx"
    lab_path = tmp_path / "labs.idx"
    write_idx_images(img_path, np.zeros((2, 2, 2), dtype=np.uint8))
    write_idx_labels(lab_path, [1, 2, 3])  # count mismatch
    with pytest.raises(SchemaError):
        load_idx(str(img_path), str(lab_path))
    img_path.write_bytes(img_path.read_bytes()[:-1])  # truncated payload
    with pytest.raises(SchemaError):
        load_idx(str(img_path), str(lab_path))


def test_library_writer_round_trips(tmp_path):
    store = synthetic_digit_images(20, RngStream(12), side=8)
    ip, lp = tmp_path / "i.idx.gz", tmp_path / "l.idx.gz"
    write_idx(store, str(ip), str(lp), compress=True)
    again = load_idx(str(ip), str(lp))
    assert np.array_equal(again.labels, store.labels)
    assert np.max(np.abs(again.images - store.images)) <= 0.5 / 255.0


# ---------------------------------------------------------------------------
# Downscaling
# ---------------------------------------------------------------------------

def test_downscale_identity_and_constant():
    img = RngStream(13).generator().uniform(size=(6, 6))
    assert np.array_equal(downscale(img, 1), img)
    const = np.full((4, 4), 0.37)
    assert np.allclose(downscale(const, 2), 0.37)


def test_downscale_checkerboard():
    img = np.array([[1.0, 0.0, 1.0, 1.0],
                    [0.0, 1.0, 1.0, 1.0],
                    [0.0, 0.0, 0.5, 0.5],
                    [0.0, 0.0, 0.5, 0.5]])
    out = downscale(img, 2)
    assert np.allclose(out, [[0.5, 1.0], [0.0, 0.5]])


def test_downscale_non_divisible_rejected():
    with pytest.raises(ValueError):
        downscale(np.zeros((5, 4)), 2)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1),
       st.sampled_from([1, 2, 4]))
def test_downscale_preserves_mean_brightness(seed, factor):
    img = RngStream(seed).generator().uniform(size=(8, 8))
    assert abs(downscale(img, factor).mean() - img.mean()) < 1e-12


# ---------------------------------------------------------------------------
# Replication engine
# ---------------------------------------------------------------------------

def _zero_noise_spec(rng):
    gen = rng.generator()
    x = gen.normal(size=(8, 2))
    xs = np.vstack([x, x])
    t = np.array([1] * 8 + [0] * 8)
    y = np.exp(xs[:, 0])
    data = Dataset(xs, t, y)
    return GeneratedStudy(data, y.copy(), y.copy())


def _matched_estimate(study, rng, memo):
    d = study.data
    return float(d.y[d.t == 1].mean() - d.y[d.t == 0].mean())


def test_replicate_zero_noise_oracle_weights():
    report = replicate(_zero_noise_spec, [Method("matched", _matched_estimate)],
                       reps=4, base_seed=9)
    row = report.stats("matched")
    assert row.bias == 0.0 and row.se == 0.0 and row.rmse == 0.0
    assert row.failures == 0


def test_replicate_reproducible_and_parallel_identical():
    spec = ShallowDgp(60)
    methods = [Method("raw", est_raw)]
    serial = replicate(spec, methods, reps=6, base_seed=5, n_jobs=1)
    serial2 = replicate(spec, methods, reps=6, base_seed=5, n_jobs=1)
    parallel = replicate(spec, methods, reps=6, base_seed=5, n_jobs=2)
    assert serial.stats("raw").errors == serial2.stats("raw").errors
    assert serial.stats("raw").errors == parallel.stats("raw").errors


def test_replicate_rmse_identity_and_failures():
    def flaky(study, rng, memo):
        if rng.generator().uniform() < 0.5:
            raise RuntimeError("boom")
        return est_raw(study, rng, memo)

    report = replicate(ShallowDgp(50), [Method("flaky", flaky)],
                       reps=12, base_seed=3)
    row = report.stats("flaky")
    assert 0 < row.failures < 12
    assert abs(row.rmse ** 2 - (row.bias ** 2 + row.se ** 2)) < 1e-9


def test_replicate_requires_two_reps():
    with pytest.raises(ValueError):
        replicate(ShallowDgp(50), [Method("raw", est_raw)], reps=1, base_seed=0)


def test_report_round_trip():
    report = replicate(ShallowDgp(50), [Method("raw", est_raw)],
                       reps=3, base_seed=11)
    doc = report.to_dict()
    again = ReplicationReport.from_dict(doc)
    assert again.to_dict() == doc


def test_shallow_raw_positive_bias_and_scale():
    report = replicate(ShallowDgp(300), [Method("raw", est_raw)],
                       reps=200, base_seed=17)
    row = report.stats("raw")
    assert row.bias > 0.1  # treated sit above the diagonal
