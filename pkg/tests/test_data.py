import gzip
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from homoode import data as D
from homoode.models import ImplicitModel, ModelConfig
from homoode.shared_init import SharedInit


def mlp(**kw):
    kw.setdefault("channels", 8)
    return ImplicitModel(ModelConfig(kind="homoode", arch="mlp", input_dim=2, num_classes=2, **kw))


# ---------------------------------------------------------------- IDX

@pytest.mark.parametrize("gz", [False, True])
def test_idx_roundtrip_is_bit_identical(tmp_path, gz):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
    labs = rng.integers(0, 10, size=5, dtype=np.uint8)
    suffix = ".gz" if gz else ""
    D.save_idx(tmp_path / f"i{suffix}", imgs)
    D.save_idx(tmp_path / f"l{suffix}", labs)
    back = D.read_idx(tmp_path / f"i{suffix}", D.IDX_IMAGES)
    np.testing.assert_array_equal(back, imgs)
    ds = D.load_mnist_idx(tmp_path / f"i{suffix}", tmp_path / f"l{suffix}", "test")
    assert ds.images.shape == (5, 1, 28, 28)
    np.testing.assert_array_equal(ds.labels, labs)
    np.testing.assert_allclose(ds.images, (imgs[:, None] / 255.0 - 0.1307) / 0.3081)
    # re-serializing the reloaded bytes reproduces the file
    D.save_idx(tmp_path / "again", back)
    assert (tmp_path / "again").read_bytes() == (
        gzip.open(tmp_path / "i.gz").read() if gz else (tmp_path / "i").read_bytes())


def test_idx_bad_magic_and_truncation(tmp_path):
    D.save_idx(tmp_path / "l", np.zeros(10, np.uint8))
    with pytest.raises(D.FormatError):
        D.read_idx(tmp_path / "l", D.IDX_IMAGES)
    (tmp_path / "junk").write_bytes(b"\x12\x34\x56\x78" + bytes(20))
    with pytest.raises(D.FormatError):
        D.read_idx(tmp_path / "junk")
    raw = (tmp_path / "l").read_bytes()
    (tmp_path / "short").write_bytes(raw[:-3])
    with pytest.raises(OSError):
        D.read_idx(tmp_path / "short")
    (tmp_path / "tiny").write_bytes(raw[:2])
    with pytest.raises(OSError):
        D.read_idx(tmp_path / "tiny")
    with pytest.raises(OSError):
        D.read_idx(tmp_path / "absent")


def test_mismatched_counts(tmp_path):
    D.save_idx(tmp_path / "i", np.zeros((3, 2, 2), np.uint8))
    D.save_idx(tmp_path / "l", np.zeros(4, np.uint8))
    with pytest.raises(D.FormatError):
        D.load_mnist_idx(tmp_path / "i", tmp_path / "l")


def test_missing_mnist_is_reported(tmp_path):
    with pytest.raises(D.DataUnavailableError):
        D.find_mnist_dir(tmp_path)


def _mnist_dir():
    try:
        return D.find_mnist_dir()
    except D.DataUnavailableError:
        return None


needs_mnist = pytest.mark.skipif(_mnist_dir() is None, reason="MNIST IDX files not available")


@needs_mnist
def test_official_test_split_header_and_histogram():
    ds = D.load_mnist(split="test")
    assert ds.images.shape == (10000, 1, 28, 28)
    counts = np.bincount(ds.labels, minlength=10)
    assert counts.min() >= 892 and counts.max() <= 1135


@needs_mnist
def test_mnist_subset_sizes():
    tr, te = D.mnist_subset(n_train=100, n_test=50)
    assert len(tr) == 100 and len(te) == 50


# ---------------------------------------------------------------- synthetic sets

def test_noise_free_circles_have_exact_radii_and_balance():
    ds = D.synth_circles(200, 0.0, seed=1)
    r = np.linalg.norm(ds.images, axis=1)
    np.testing.assert_allclose(r[ds.labels == 0], 1.0, atol=1e-12)
    np.testing.assert_allclose(r[ds.labels == 1], 0.5, atol=1e-12)
    assert np.bincount(ds.labels).tolist() == [100, 100]
    # a radius threshold separates the classes perfectly
    assert np.all((r < 0.75) == (ds.labels == 1))


@pytest.mark.parametrize("maker", [D.synth_circles, D.synth_moons])
def test_synthetic_sets_are_seeded(maker):
    a, b = maker(64, 0.1, seed=5), maker(64, 0.1, seed=5)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, maker(64, 0.1, seed=6).images)
    assert np.bincount(a.labels).tolist() == [32, 32]
    with pytest.raises(ValueError):
        maker(63)


def test_digits_split():
    tr, te = D.load_digits_split()
    assert len(te) == 397 and len(tr) == 1400
    assert tr.images.shape[1:] == (1, 8, 8)
    assert abs(np.concatenate([tr.images, te.images]).mean()) < 1e-12


def test_dataset_validation():
    with pytest.raises(ValueError):
        D.Dataset(np.zeros((2, 2)), [0, 0, 1])
    with pytest.raises(ValueError):
        D.Dataset(np.zeros((2, 2)), [0, 5], num_classes=2)
    with pytest.raises(ValueError):
        D.Dataset(np.full((1, 2), np.nan), [0])


def test_substreams_are_independent_and_reproducible():
    a = D.substream(3, "data").random(4)
    np.testing.assert_array_equal(a, D.substream(3, "data").random(4))
    assert not np.array_equal(a, D.substream(3, "dropout").random(4))
    assert not np.array_equal(a, D.substream(4, "data").random(4))


# ---------------------------------------------------------------- augmentation

def test_augment_identity_and_flip_involution():
    x = np.random.default_rng(0).normal(size=(6, 1, 5, 5))
    np.testing.assert_array_equal(D.augment(x, 0, False, seed=1), x)
    flipped = D.augment(x, 0, True, seed=2)
    changed = ~np.all(flipped == x, axis=(1, 2, 3))
    np.testing.assert_array_equal(flipped[changed][..., ::-1], x[changed])
    with pytest.raises(ValueError):
        D.augment(x, -1)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_crop_keeps_shape_and_content_window(pad, seed):
    x = np.random.default_rng(seed).normal(size=(3, 2, 6, 6))
    out, oy, ox = D.augment(x, pad, False, seed, return_offsets=True)
    assert out.shape == x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    for i in range(3):
        np.testing.assert_array_equal(out[i], xp[i, :, oy[i]:oy[i] + 6, ox[i]:ox[i] + 6])


def test_crop_offsets_are_uniform():
    pad = 2
    _, oy, ox = D.augment(np.zeros((10**4, 1, 4, 4)), pad, False, seed=7, return_offsets=True)
    k = 2 * pad + 1
    counts = np.bincount(oy * k + ox, minlength=k * k)
    assert chisquare(counts).pvalue > 0.01


def test_augment_never_touches_labels():
    ds = D.synth_circles(32, 0.05, seed=0)
    before = ds.labels.copy()
    imgs = np.random.default_rng(0).normal(size=(32, 1, 4, 4))
    D.augment(imgs, 1, True, seed=0)
    np.testing.assert_array_equal(ds.labels, before)


# ---------------------------------------------------------------- optimizer

def test_adam_first_step_moves_by_lr():
    from homoode.tensor import Tensor
    p = Tensor(np.array([1.0, -1.0]))
    opt = D.Adam([p], lr=0.1)
    opt.step([np.array([3.0, -0.5])])
    np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-7)


# ---------------------------------------------------------------- training

def test_zero_epochs_leave_model_unchanged():
    m = mlp()
    before = {n: t.data.copy() for n, t in m.params.items()}
    log_ = D.train_loop(m, D.synth_circles(16, 0.05), cfg=D.TrainConfig(epochs=0))
    assert log_.rows == [] and log_.skipped_batches == 0
    for n, t in m.params.items():
        np.testing.assert_array_equal(t.data, before[n])


def test_memorizes_sixteen_samples():
    ds = D.synth_moons(16, 0.1, seed=3)
    log_ = D.train_loop(mlp(channels=16), ds, cfg=D.TrainConfig(epochs=200, batch_size=16, lr=1e-2))
    assert min(r.loss for r in log_.rows) < 0.05


def test_training_is_deterministic():
    ds = D.synth_circles(32, 0.05, seed=2)
    test = D.synth_circles(16, 0.05, seed=9, split="test")
    cfg = D.TrainConfig(epochs=3, batch_size=8)
    runs = []
    for _ in range(2):
        log_ = D.train_loop(mlp(), ds, test, cfg, SharedInit.zeros(8, update_every=2))
        runs.append([(r.epoch, r.split, r.accuracy, r.mean_nfe, r.loss) for r in log_.rows])
    assert runs[0] == runs[1]


def test_dropout_runs_are_reproducible():
    ds = D.synth_circles(32, 0.05, seed=2)
    cfg = D.TrainConfig(epochs=2, batch_size=8)
    a = D.train_loop(mlp(dropout=0.3), ds, cfg=cfg).rows
    b = D.train_loop(mlp(dropout=0.3), ds, cfg=cfg).rows
    for ra, rb in zip(a, b):
        assert abs(ra.loss - rb.loss) <= 1e-10


def test_nfe_log_is_sum_of_forward_counters(monkeypatch):
    seen = []
    real = D.train_step

    def spy(*args, **kw):
        out = real(*args, **kw)
        seen.append(out[2].nfe)
        return out

    monkeypatch.setattr(D, "train_step", spy)
    log_ = D.train_loop(mlp(), D.synth_circles(24, 0.05), cfg=D.TrainConfig(epochs=2, batch_size=8))
    assert log_.total_nfe == sum(seen) and log_.forwards == len(seen) == 6


def test_shared_init_updates_on_schedule():
    si = SharedInit.zeros(8, update_every=2)
    D.train_loop(mlp(), D.synth_circles(32, 0.05), cfg=D.TrainConfig(epochs=1, batch_size=8),
                 shared_init=si)
    assert si.step_counter == 4 and si.updates == 2
    assert np.any(si.vector != 0)


def test_failed_batches_are_skipped_and_counted():
    m = mlp()
    m.solver = m.solver.replace(atol=1e-12, rtol=1e-12, max_steps=1)
    log_ = D.train_loop(m, D.synth_circles(16, 0.05), D.synth_circles(8, 0.05, split="test"),
                        D.TrainConfig(epochs=1, batch_size=8))
    assert log_.skipped_batches == 2
    assert log_.last("test").accuracy == 0.0


def test_adjoint_training_step_matches_direct_direction():
    ds = D.synth_circles(16, 0.05, seed=4)
    cfg_d = D.TrainConfig(epochs=1, batch_size=16)
    cfg_a = D.TrainConfig(epochs=1, batch_size=16, backward="adjoint")
    md, ma = mlp(), mlp()
    md.solver = ma.solver = md.solver.replace(atol=1e-9, rtol=1e-9)
    D.train_loop(md, ds, cfg=cfg_d)
    D.train_loop(ma, ds, cfg=cfg_a)
    for n in md.params:
        np.testing.assert_allclose(ma.params[n].data, md.params[n].data, atol=1e-6)


def test_metric_csv_roundtrip(tmp_path):
    log_ = D.MetricLog()
    log_.append(D.MetricRow(1, "train", 0.5, 26.0, 0.69, 1.25))
    log_.append(D.MetricRow(1, "test", 0.25, 20.0, 1.1, 1.5))
    path = tmp_path / "m.csv"
    log_.to_csv(path, comment="config_hash=abc")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_hash=abc"
    assert lines[1] == ",".join(D.METRIC_HEADER)
    back = D.MetricLog.read_csv(path)
    assert [(r.epoch, r.split, r.accuracy) for r in back.rows] == [(1, "train", 0.5), (1, "test", 0.25)]
    with pytest.raises(ValueError):
        log_.append(D.MetricRow(0, "train", 0, 0, 0, 0))


def test_bad_train_config():
    with pytest.raises(ValueError):
        D.TrainConfig(backward="reverse")
    with pytest.raises(ValueError):
        D.TrainConfig(batch_size=0)


def test_env_var_locates_mnist(tmp_path, monkeypatch):
    D.save_idx(tmp_path / "t10k-images-idx3-ubyte", np.zeros((2, 28, 28), np.uint8))
    D.save_idx(tmp_path / "t10k-labels-idx1-ubyte", np.array([3, 4], np.uint8))
    monkeypatch.setenv(D.MNIST_ENV, os.fspath(tmp_path))
    ds = D.load_mnist(split="test")
    assert ds.labels.tolist() == [3, 4]
