import csv

import numpy as np
import pytest

from pc2m.area import class_frequencies, js_divergence
from pc2m.config import ConfigError, RunConfig
from pc2m.network import init_params
from pc2m.synth import DatasetSpec, gen_dataset, patch_labels, save_dataset
from pc2m.train import (
    EPOCH_COLUMNS,
    NumericalAbort,
    encoder_config,
    evaluate,
    load_checkpoint,
    load_data,
    save_checkpoint,
    save_outputs,
    score_predictions,
    sweep,
    train,
    training_labels,
    write_report_csv,
)

SMALL = RunConfig(image_count=20, epochs=3, batch_size=8)


@pytest.fixture(scope="module")
def data():
    return load_data(SMALL)


@pytest.fixture(scope="module")
def run(data):
    return train(SMALL, data, step_log=True)


def test_gamma_zero_freezes_area(data):
    res = train(SMALL.replace(gamma=0.0), data)
    nu_d = class_frequencies([data[i].labels for i in res.train_idx], SMALL.class_count)
    for a in res.area_history:
        assert np.array_equal(a, nu_d)
    assert all(r.js_prev == 0.0 for r in res.epochs)


def test_reproducible(run, data):
    again = train(SMALL, data, step_log=True)
    assert [r.__dict__ | {"wall_time": 0} for r in again.epochs] == [r.__dict__ | {"wall_time": 0} for r in run.epochs]
    assert all(again.params[k].tobytes() == run.params[k].tobytes() for k in run.params)
    assert [s.total for s in again.steps] == [s.total for s in run.steps]


def test_epoch_barrier(run):
    assert run.area.epoch == len(run.epochs) == SMALL.epochs
    assert len(run.area_history) == SMALL.epochs + 1
    for prev, cur, rec in zip(run.area_history, run.area_history[1:], run.epochs):
        assert rec.js_prev == pytest.approx(js_divergence(cur, prev), abs=1e-15)
        assert rec.a_tilde == list(cur)


def test_warmup_touches_only_classifier(data):
    res = train(SMALL.replace(epochs=2, warmup_epochs=1), data)
    fresh = init_params(res.encoder, SMALL.seed)
    one = train(SMALL.replace(epochs=1, warmup_epochs=0), data)
    assert not np.array_equal(one.params["block0.wq"], fresh["block0.wq"])
    warm = train(SMALL.replace(epochs=1, warmup_epochs=1), data)
    for name in fresh:
        same = np.array_equal(warm.params[name], fresh[name])
        assert same == (name != "proj"), name
    assert res.epochs[0].match == 0.0 and res.epochs[1].match != 0.0


def test_evaluate_matches_last_record(run, data):
    ev = evaluate(run.params, [data[i] for i in run.val_idx], run.encoder)
    assert ev["miou"] == run.epochs[-1].miou
    assert ev["confusion"].sum() == len(run.val_idx) * run.encoder.n_patches


def test_random_checkpoint_near_chance():
    cfg = RunConfig()
    full = load_data(cfg)
    enc = encoder_config(cfg)
    scores = [evaluate(init_params(enc, s), full[:40], enc)["miou"] for s in range(3)]
    assert max(scores) < 0.3


def test_perfect_predictions(data):
    pred = np.stack([patch_labels(x.mask, 8) for x in data])
    assert score_predictions(pred, data, 8, 5)["miou"] == 1.0


def test_class_count_mismatch(run, data):
    params = dict(run.params, proj=np.zeros((64, 3)))
    with pytest.raises(ValueError):
        evaluate(params, data, run.encoder)


def test_checkpoint_round_trip(run, tmp_path):
    path = tmp_path / "ck.bin"
    save_checkpoint(path, run, run.encoder)
    params, enc, area = load_checkpoint(path)
    assert enc == run.encoder
    assert all(np.array_equal(params[k], run.params[k]) for k in run.params)
    assert np.array_equal(area.a_tilde, run.area.a_tilde) and area.epoch == run.area.epoch


def test_outputs_written(run, tmp_path):
    save_outputs(tmp_path, run)
    with open(tmp_path / "epochs.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][: len(EPOCH_COLUMNS)] == EPOCH_COLUMNS
    assert len(rows) == SMALL.epochs + 1
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3]
    with open(tmp_path / "steps.csv") as fh:
        steps = list(csv.reader(fh))
    assert steps[0] == ["step", "L_match", "L_MCE", "L_PC2M", "grad_norm"] and len(steps) == len(run.steps) + 1
    for s in steps[1:]:
        assert float(s[3]) == pytest.approx(float(s[1]) + float(s[2]))
    ev = evaluate(run.params, gen_dataset(DatasetSpec(image_count=4)), run.encoder)
    write_report_csv(tmp_path / "report.csv", ev, (0.5, 0.25))
    text = (tmp_path / "report.csv").read_text()
    assert "miou" in text and "f1_macro,0.25" in text


def test_nan_aborts_with_dump():
    data = gen_dataset(DatasetSpec(image_count=10))
    for x in data:
        x.image[0, 0, 0] = np.nan
    with pytest.raises(NumericalAbort) as info:
        train(RunConfig(image_count=10, epochs=2, batch_size=4), data)
    assert "batch" in info.value.dump and np.isnan(info.value.dump["probs"]).any()


def test_modes_only_change_labels(data):
    train_idx = np.arange(5)
    pseudo = [frozenset({0, 1})] * 5
    assert training_labels(SMALL, data, train_idx) == [data[i].labels for i in train_idx]
    assert training_labels(SMALL.replace(mode="unsupervised"), data, train_idx, pseudo) == pseudo
    mixed = training_labels(SMALL.replace(mode="beta-mix", beta=1.0), data, train_idx, pseudo)
    assert mixed == pseudo
    with pytest.raises(ValueError):
        training_labels(SMALL.replace(mode="unsupervised"), data, train_idx)


def test_sweep_rows_and_errors(data):
    rows = sweep(SMALL.replace(epochs=2), "gamma", [0.0, 0.5], data)
    assert [r.value for r in rows] == [0.0, 0.5]
    assert rows[0].miou == train(SMALL.replace(epochs=2, gamma=0.0), data).epochs[-1].miou
    with pytest.raises(ValueError):
        sweep(SMALL, "lr", [0.1, 0.2], data)
    with pytest.raises(ValueError):
        sweep(SMALL, "gamma", [0.1], data)


def test_data_dir(tmp_path):
    spec = DatasetSpec(image_count=6)
    save_dataset(tmp_path, gen_dataset(spec))
    loaded = load_data(RunConfig(data_dir=str(tmp_path)))
    assert len(loaded) == 6
    with pytest.raises(ConfigError):
        load_data(RunConfig(data_dir=str(tmp_path), image_size=32))
    with pytest.raises(ConfigError):
        load_data(RunConfig(data_dir=str(tmp_path / "missing")))
    (tmp_path / "images.bin").write_bytes(b"junk")
    with pytest.raises(ConfigError):
        load_data(RunConfig(data_dir=str(tmp_path)))


def test_dataset_with_more_classes_rejected(run):
    wide = gen_dataset(DatasetSpec(image_count=6, class_count=7, class_weights=(0, 0, 0, 0, 0, 1)))
    with pytest.raises(ValueError):
        evaluate(run.params, wide, run.encoder)
