import csv
import math

import numpy as np
import pytest

from comet import kernel as K
from comet.augment import MaskSpec
from comet.datamodel import LeveledDataset
from comet.encoder import EncoderConfig, init_params, load_checkpoint
from comet.errors import ConfigError, DataError, TrainingError
from comet.ingest import SynthConfig, synth_generate
from comet.losses import LossWeights
from comet.trainer import (
    HISTORY_COLUMNS,
    AdamState,
    TrainConfig,
    adam_update,
    clip_by_global_norm,
    pretrain,
    write_history_csv,
)

TINY = EncoderConfig(input_dim=3, proj_hidden=8, proj_out=8, blocks=2, conv_hidden=8, out_dim=16)


def small_ds(seed=0, patients=4, trials=2, samples=4, T=16):
    return synth_generate(SynthConfig(patients=patients, trials=trials, samples=samples, timestamps=T), seed)


# ---------------------------------------------------------------- adam


def test_adam_first_step():
    p = K.Tensor(np.array([0.0]))
    st = AdamState()
    adam_update([p], [np.array([1.0])], st, lr=0.1)
    assert abs(p.data[0] + 0.1) < 1e-7 and st.step == 1


def test_adam_zero_grads():
    p = K.Tensor(np.array([1.5, -2.0]))
    st = AdamState()
    adam_update([p], [np.zeros(2)], st, lr=0.1)
    assert p.data.tolist() == [1.5, -2.0] and st.step == 1


def test_adam_two_step_recurrence():
    p = K.Tensor(np.array([1.0]))
    st = AdamState()
    g, lr, b1, b2, eps = 0.5, 0.01, 0.9, 0.999, 1e-8
    theta, m, v = 1.0, 0.0, 0.0
    for t in (1, 2):
        adam_update([p], [np.array([g])], st, lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    assert math.isclose(p.data[0], theta, rel_tol=1e-14)


def test_adam_rejects_nan_gradient():
    p = K.Tensor(np.array([1.0]), name="w")
    with pytest.raises(TrainingError, match="w"):
        adam_update([p], [np.array([np.nan])], AdamState(), 0.1)


def test_clip_by_global_norm():
    g = [np.array([3.0]), np.array([4.0])]
    out = clip_by_global_norm(g, 1.0)
    assert np.allclose([out[0][0], out[1][0]], [0.6, 0.8])
    assert clip_by_global_norm(g, 10.0) is g


# ---------------------------------------------------------------- config


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=-1)
    with pytest.raises(ConfigError):
        TrainConfig(masks=[MaskSpec()] * 3)
    with pytest.raises(ConfigError):
        TrainConfig(dtype="float16")
    cfg = TrainConfig()
    assert (cfg.lr, cfg.batch_size, cfg.epochs) == (1e-4, 256, 100)
    assert [m.kind for m in cfg.masks] == ["all_true", "all_true", "continuous", "continuous"]


# ---------------------------------------------------------------- pretrain


def test_epochs_zero_returns_init():
    ds = small_ds()
    r = pretrain(ds, TINY, TrainConfig(epochs=0, seed=3, dtype="float64"))
    assert r.history == [] and r.params.equals(init_params(TINY, 3))


def test_pretrain_deterministic_float64():
    ds = small_ds()
    cfg = TrainConfig(epochs=2, batch_size=8, seed=5, dtype="float64", lr=1e-3)
    a, b = pretrain(ds, TINY, cfg), pretrain(ds, TINY, cfg)
    assert a.history == b.history and a.params.equals(b.params)
    assert len(a.history) == 2 and a.steps == 2 * math.ceil(len(ds) / 8)
    assert all(math.isfinite(v) for rec in a.history for v in rec.values())


def test_history_columns_and_checkpoint(tmp_path):
    ds = small_ds()
    ckpt = tmp_path / "enc.ckpt"
    r = pretrain(ds, TINY, TrainConfig(epochs=1, batch_size=8, seed=1, checkpoint=str(ckpt)))
    assert load_checkpoint(ckpt, dtype=np.float32).equals(r.params)
    path = tmp_path / "h.csv"
    write_history_csv(r.history, path)
    rows = list(csv.reader(open(path)))
    assert tuple(rows[0]) == HISTORY_COLUMNS == ("epoch", "L_total", "L_P", "L_R", "L_S", "L_O")
    assert rows[1][0] == "1" and float(rows[1][1]) == r.history[0]["total"]


def test_parameter_count_constant():
    ds = small_ds()
    init = init_params(TINY, 0)
    r = pretrain(ds, TINY, TrainConfig(epochs=1, batch_size=8, seed=0))
    assert r.params.n_parameters() == init.n_parameters()
    assert r.params.names() == init.names()


def _passes(ds, lambdas, batch_size, masks=None):
    cfg = TrainConfig(epochs=1, batch_size=batch_size, seed=0, weights=LossWeights.from_lambdas(lambdas))
    if masks is not None:
        cfg = TrainConfig(epochs=1, batch_size=batch_size, seed=0, weights=cfg.weights, masks=masks)
    r = pretrain(ds, TINY, cfg)
    return r.encode_passes / r.steps


def test_switched_off_blocks_skip_passes():
    ds = small_ds()
    # one batch holding the whole set: every block has eligible anchors
    n = len(ds)
    assert _passes(ds, (0.25, 0.25, 0.25, 0.25), n) == 3  # all_true shared + trial + patient
    assert _passes(ds, (0, 0, 1, 0), n) == 1
    assert _passes(ds, (0, 0, 0.5, 0.5), n) == 1
    assert _passes(ds, (0, 1, 0, 0), n) == 1
    assert _passes(ds, (0.5, 0.5, 0, 0), n) == 2
    masks = [MaskSpec("binomial"), MaskSpec("binomial"), MaskSpec("all_true"), MaskSpec("all_true")]
    assert _passes(ds, (0.25, 0.25, 0.25, 0.25), n, masks) == 3


def test_group_block_without_anchor_skips_pass():
    # 4 samples per trial in sorted order: batch shuffle puts one trial (one patient) per batch
    ds = small_ds()
    assert _passes(ds, (0.25, 0.25, 0.25, 0.25), 4) == 1
    r = pretrain(ds, TINY, TrainConfig(epochs=1, batch_size=4, seed=0, weights=LossWeights.from_lambdas((1, 0, 0, 0))))
    assert r.encode_passes == 0 and r.history[0]["total"] == 0.0
    assert r.params.equals(init_params(TINY, 0).copy(dtype=np.float32))


def test_pretrain_data_errors():
    empty = LeveledDataset(np.zeros((0, 4, 3)), [], [], [])
    with pytest.raises(DataError):
        pretrain(empty, TINY, TrainConfig(epochs=1))
    with pytest.raises(DataError):
        pretrain(small_ds(), EncoderConfig(input_dim=5), TrainConfig(epochs=1))


def test_nan_input_aborts_with_location():
    ds = small_ds()
    ds.values[3, 2, 1] = np.nan
    with pytest.raises(TrainingError, match=r"epoch 0, batch \d+"):
        pretrain(ds, TINY, TrainConfig(epochs=1, batch_size=8, seed=0))


def test_loss_decreases_over_training():
    drops = []
    for seed in range(41, 46):
        ds = small_ds(seed, patients=4, trials=2, samples=8, T=16)
        r = pretrain(ds, TINY, TrainConfig(epochs=20, batch_size=16, seed=seed, dtype="float64"))
        drops.append(r.history[0]["total"] - r.history[-1]["total"])
    assert np.median(drops) > 0
