import math

import numpy as np
import pytest
from scipy.stats import chi2

from aniso_sr.autodiff import load_weights
from aniso_sr.autoencoder import AeConfig, Autoencoder
from aniso_sr.phantom import phantom_set
from aniso_sr.trainer import (NumericalAbort, TrainConfig, TrainConfigError, apply_augmentation,
                              augment, make_rng, reconstruction_mse, sample_patch, train,
                              validation_slices)
from aniso_sr.volume_io import Slice, Volume, VolumeShapeError

TINY = AeConfig(base_channels=4)


def _small_cfg(**kw):
    base = dict(patch=16, batch_size=2, lr=1e-3, max_steps=6, val_interval=2,
                early_stop_patience=50, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# -- configuration ----------------------------------------------------------------


def test_defaults():
    cfg = TrainConfig()
    assert cfg.patch == 128 and cfg.lr == 1e-5 and cfg.batch_size == 16
    assert cfg.intensity_scale_range == (0.9, 1.1) and cfg.intensity_shift_range == (-0.1, 0.1)


@pytest.mark.parametrize("kw", [{"patch": 40}, {"batch_size": 0}, {"lr": 0.0},
                                {"intensity_scale_range": (1.1, 0.9)}, {"val_interval": 0}])
def test_invalid_config(kw):
    with pytest.raises(TrainConfigError):
        TrainConfig(**kw).validate()


def test_overrides_coerce_types():
    cfg = TrainConfig().with_overrides({"patch": "64", "lr": "3e-4", "rot90": "false",
                                        "intensity_shift_range": "-0.05, 0.05"})
    assert cfg.patch == 64 and cfg.lr == 3e-4 and cfg.rot90 is False
    assert cfg.intensity_shift_range == (-0.05, 0.05)
    with pytest.raises(TrainConfigError):
        TrainConfig().with_overrides({"nonsense": "1"})
    with pytest.raises(TrainConfigError):
        TrainConfig().with_overrides({"patch": "big"})


# -- sampling ----------------------------------------------------------------


def test_single_offset_returns_full_slice():
    v = Volume(np.random.default_rng(0).random((1, 32, 32)), (1, 1, 1))
    rng = make_rng(0)
    for _ in range(5):
        np.testing.assert_array_equal(sample_patch([v], rng, 32).data, v.data[0])


def test_sampling_is_deterministic():
    vols = phantom_set(3, seed=1, size=32)
    r1, r2 = make_rng(7), make_rng(7)
    seq1 = [sample_patch(vols, r1, 16).data.tobytes() for _ in range(20)]
    seq2 = [sample_patch(vols, r2, 16).data.tobytes() for _ in range(20)]
    assert seq1 == seq2


def test_small_slices_are_reflect_padded():
    v = Volume(np.arange(100.0).reshape(1, 10, 10), (1, 1, 1))
    p = sample_patch([v], make_rng(0), 16).data
    assert p.shape == (16, 16)
    # reflect padding of 3 on each side: row 0 of the patch mirrors row 3
    np.testing.assert_array_equal(p[0, 3:13], v.data[0, 3])


def test_empty_training_set():
    with pytest.raises(TrainConfigError):
        sample_patch([], make_rng(0), 16)


def test_offsets_uniform_chi_square():
    # 1x256x256 with 128 patches -> 129x129 offsets; encode each offset in the patch corner
    size, patch = 256, 128
    rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    v = Volume((rows * size + cols).astype(np.float64)[None], (1, 1, 1))
    rng = make_rng(11)
    draws = 10_000
    # collapse offsets into 4x4 coarse bins so expected counts are large
    bins = np.zeros((4, 4))
    edges = np.linspace(0, size - patch + 1, 5)
    for _ in range(draws):
        corner = int(sample_patch([v], rng, patch).data[0, 0])
        r, c = divmod(corner, size)
        bins[np.searchsorted(edges, r, "right") - 1, np.searchsorted(edges, c, "right") - 1] += 1
    widths = np.diff(edges)
    expected = draws * np.outer(widths, widths) / (size - patch + 1) ** 2
    stat = float(((bins - expected) ** 2 / expected).sum())
    assert stat < chi2.ppf(0.9999, df=15)
    # every cell within 4 sigma of its multinomial expectation
    p = expected / draws
    assert np.all(np.abs(bins - expected) < 4 * np.sqrt(draws * p * (1 - p)))


# -- augmentation ----------------------------------------------------------------


def test_augmentation_identity():
    s = Slice(np.random.default_rng(0).random((8, 8)))
    np.testing.assert_array_equal(apply_augmentation(s, 0, 1.0, 0.0).data, s.data)


def test_four_rotations_are_identity():
    s = Slice(np.random.default_rng(1).random((8, 8)))
    out = s
    for _ in range(4):
        out = apply_augmentation(out, 1, 1.0, 0.0)
    np.testing.assert_array_equal(out.data, s.data)


def test_constant_patch_affine():
    out = apply_augmentation(Slice(np.full((4, 4), 0.5)), 0, 1.1, 0.05)
    np.testing.assert_allclose(out.data, 0.6, atol=1e-7)


def test_augmentation_clamps():
    out = apply_augmentation(Slice(np.array([[0.0, 1.0]])), 0, 1.1, 0.1)
    np.testing.assert_allclose(out.data, [[0.1, 1.0]], atol=1e-7)


def test_rotation_needs_square():
    with pytest.raises(VolumeShapeError):
        apply_augmentation(Slice(np.zeros((4, 6))), 1, 1.0, 0.0)


def test_augment_draws_within_ranges():
    s = Slice(np.full((8, 8), 0.5))
    rng = make_rng(3)
    cfg = TrainConfig()
    values = [float(augment(s, rng, cfg).data[0, 0]) for _ in range(200)]
    assert min(values) >= 0.5 * 0.9 - 0.1 - 1e-6 and max(values) <= 0.5 * 1.1 + 0.1 + 1e-6
    assert max(values) - min(values) > 0.1


# -- training loop ----------------------------------------------------------------


def test_zero_steps_leaves_model_unchanged():
    m = Autoencoder(TINY)
    before = m.state()
    report = train(m, phantom_set(2, size=16), [], _small_cfg(max_steps=0))
    assert report.train_loss == [] and report.val_loss == [] and report.best_step is None
    assert m.state().equals(before)


def test_constant_slice_loss_drops_tenfold():
    v = Volume(np.full((1, 32, 32), 0.3), (1, 1, 1))
    cfg = _small_cfg(max_steps=500, patch=32, rot90=False, intensity_scale_range=(1.0, 1.0),
                     intensity_shift_range=(0.0, 0.0), batch_size=1, val_interval=1000)
    report = train(Autoencoder(TINY), [v], [], cfg)
    first = float(np.mean(report.train_loss[:5]))
    last = float(np.mean(report.train_loss[-5:]))
    assert last < first / 10


def test_same_seed_same_losses_and_weights(tmp_path):
    vols = phantom_set(4, size=16)
    runs = []
    for k in range(2):
        m = Autoencoder(TINY)
        log = tmp_path / f"log{k}.csv"
        report = train(m, vols[:3], vols[3:], _small_cfg(log_path=str(log)))
        runs.append((report.train_loss, m.state(), log.read_bytes()))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1].equals(runs[1][1])
    assert runs[0][2] == runs[1][2]


def test_log_rows_and_columns(tmp_path):
    vols = phantom_set(3, size=16)
    log = tmp_path / "log.csv"
    train(Autoencoder(TINY), vols[:2], vols[2:], _small_cfg(max_steps=5, log_path=str(log)))
    lines = log.read_text().splitlines()
    assert lines[0] == "step,loss,val_loss"
    assert len(lines) == 6
    assert lines[2].split(",")[2] != "" and lines[1].split(",")[2] == ""


def test_best_checkpoint_reproduces_best_val(tmp_path):
    vols = phantom_set(4, size=16)
    ckpt = tmp_path / "best.bin"
    m = Autoencoder(TINY)
    report = train(m, vols[:3], vols[3:], _small_cfg(max_steps=8, checkpoint_path=str(ckpt)))
    assert report.best_val_loss == min(report.val_loss)
    assert report.val_steps[report.val_loss.index(report.best_val_loss)] == report.best_step
    fresh = Autoencoder(TINY, seed=42)
    fresh.load_state(load_weights(ckpt, fresh.fingerprint))
    again = reconstruction_mse(fresh, validation_slices(vols[3:]))
    assert abs(again - report.best_val_loss) < 1e-6
    assert abs(reconstruction_mse(m, validation_slices(vols[3:])) - report.best_val_loss) < 1e-6


def test_early_stopping_after_patience():
    vols = phantom_set(3, size=16)
    # lr so large that validation cannot keep improving
    cfg = _small_cfg(max_steps=200, val_interval=1, early_stop_patience=2, lr=0.5)
    report = train(Autoencoder(TINY), vols[:2], vols[2:], cfg)
    assert report.stopped_early
    assert len(report.train_loss) < 200
    best_index = report.val_loss.index(report.best_val_loss)
    assert len(report.val_loss) - 1 - best_index == 2


def test_nan_loss_aborts_with_step():
    v = Volume(np.full((1, 16, 16), 0.5), (1, 1, 1))
    m = Autoencoder(TINY)
    first = next(iter(m.parameters().values()))
    first.data[...] = np.nan
    with pytest.raises(NumericalAbort) as info:
        train(m, [v], [], _small_cfg())
    assert info.value.step == 1


def test_every_recorded_loss_is_finite():
    vols = phantom_set(3, size=16)
    report = train(Autoencoder(TINY), vols[:2], vols[2:], _small_cfg())
    assert all(math.isfinite(x) for x in report.train_loss + report.val_loss)
