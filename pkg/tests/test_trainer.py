import math

import numpy as np
import pytest

from boxrefine.data import synthetic_dataset
from boxrefine.geometry import Box7
from boxrefine.synthetic import Proposal, ProposalNoise, SceneConfig
from boxrefine.trainer import (
    JitterConfig, NumericError, TrainConfig, _epoch_samples, _prepare, bench, clip_gradients, jitter_proposal,
    learning_rate, load_checkpoint, refine, save_checkpoint, train, train_step,
)
from boxrefine.network import OptimizerState, init_model, poly_lr

SMALL = dict(points_per_proposal=32, widths=(16, 16, 32), batch_size=32)


@pytest.fixture(scope="module")
def dataset():
    return synthetic_dataset(SceneConfig(), 12, 0, ProposalNoise(0.3, 0.15, 0.1), 1.0, 0.25)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(variant="voxel")
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(dtype="float16")
    a, b = TrainConfig(), TrainConfig(jitter={"center": 0.5, "size": 0.05, "heading": 0.17})
    assert a.digest() == b.digest()
    assert TrainConfig(seed=1).digest() != a.digest()


def test_jitter_proposal():
    b = Box7(0, 0, 0, 2, 4, 1.5)
    rng = np.random.default_rng(0)
    assert jitter_proposal(b, rng, JitterConfig(0, 0, 0)) == b
    j = jitter_proposal(b, rng, JitterConfig())
    assert np.max(np.abs(j.center - b.center)) <= 0.5


def test_learning_rate_schedule():
    cfg = TrainConfig(lr0=0.02)
    assert learning_rate(0, 100, cfg) == 0.02
    assert learning_rate(50, 100, cfg) == pytest.approx(0.01)
    warm = TrainConfig(warmup_iters=10)
    assert learning_rate(0, 100, warm) < learning_rate(9, 100, warm) <= 0.02


def test_clip_gradients():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    norm = clip_gradients(g, 1.0)
    assert norm == pytest.approx(5.0)
    assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)
    g = {"a": np.array([0.3])}
    clip_gradients(g, 1.0)
    assert g["a"][0] == 0.3


def test_epoch_samples_mix(dataset):
    tr = dataset.subset("train")
    cfg = TrainConfig(**SMALL)
    s = _epoch_samples(tr, cfg, np.random.default_rng(0))
    n_base = sum(len(v) for v in tr.proposals.values())
    assert len(s) == 2 * n_base
    assert sum(x.key is not None for x in s) == n_base


def test_prepare_labels_and_targets(dataset):
    tr = dataset.subset("train")
    cfg = TrainConfig(**SMALL, variant="boundary_offset")
    s = _epoch_samples(tr, cfg, np.random.default_rng(0))[:40]
    batch, labels, targets = _prepare(s, tr, cfg, tr.classes, None, np.random.default_rng(1))
    assert batch.features.shape == (40, 32, 9)
    assert set(labels) <= {0, 1, 2}
    assert not targets[labels == 0].any()
    assert np.all(np.abs(targets[labels > 0, 6]) <= math.pi / 2)


def test_fixed_batch_loss_halves(dataset):
    tr = dataset.subset("train")
    cfg = TrainConfig(points_per_proposal=64, batch_size=64, dtype="float64")
    s = _epoch_samples(tr, cfg, np.random.default_rng(0))[:64]
    batch, labels, targets = _prepare(s, tr, cfg, tr.classes, None, np.random.default_rng(1))
    model = init_model(np.random.default_rng(0), input_channels=3, num_classes=2)
    opt = OptimizerState.for_model(model)
    losses = [train_step(model, opt, batch, labels, targets, cfg, poly_lr(i, 200))[2] for i in range(200)]
    assert np.mean(losses[-10:]) < 0.5 * losses[0]


def test_train_logs_every_step(dataset, tmp_path):
    tr = dataset.subset("train")
    cfg = TrainConfig(**SMALL, epochs=1)
    ckpt, records = train(tr, cfg, tmp_path)
    n = 2 * sum(len(v) for v in tr.proposals.values())
    assert len(records) == math.ceil(n / cfg.batch_size)
    assert ckpt.epoch == 1 and ckpt.iteration == len(records)
    assert (tmp_path / "checkpoint_epoch001.bxr").exists()
    assert len((tmp_path / "train_log.jsonl").read_text().splitlines()) == len(records)


def test_train_is_deterministic_and_resumable(dataset, tmp_path):
    tr = dataset.subset("train")
    cfg = TrainConfig(**SMALL, epochs=3, variant="virtual_points")
    full, _ = train(tr, cfg, tmp_path / "a")
    again, _ = train(tr, cfg, tmp_path / "b")
    assert (tmp_path / "a/checkpoint_last.bxr").read_bytes() == (tmp_path / "b/checkpoint_last.bxr").read_bytes()
    part, _ = train(tr, cfg, tmp_path / "c", stop_after_epoch=1)
    resumed, _ = train(tr, cfg, tmp_path / "c", resume=load_checkpoint(tmp_path / "c/checkpoint_epoch001.bxr"))
    for k, v in full.model.params.items():
        np.testing.assert_array_equal(resumed.model.params[k], v)
    assert (tmp_path / "a/checkpoint_last.bxr").read_bytes() == (tmp_path / "c/checkpoint_last.bxr").read_bytes()
    assert (tmp_path / "a/train_log.jsonl").read_text() == (tmp_path / "c/train_log.jsonl").read_text()
    with pytest.raises(ValueError):
        train(tr, TrainConfig(**SMALL, epochs=4), resume=resumed)


def test_checkpoint_roundtrip(dataset, tmp_path):
    tr = dataset.subset("train")
    ckpt, _ = train(tr, TrainConfig(**SMALL, epochs=1, variant="anchor"))
    save_checkpoint(ckpt, tmp_path / "x.bxr")
    back = load_checkpoint(tmp_path / "x.bxr")
    for k, v in ckpt.model.params.items():
        np.testing.assert_array_equal(back.model.params[k], v)
        assert back.model.params[k].dtype == v.dtype
        np.testing.assert_array_equal(back.optimizer.buffers[k], ckpt.optimizer.buffers[k])
    assert back.config == ckpt.config and back.anchors == ckpt.anchors
    save_checkpoint(back, tmp_path / "y.bxr")
    assert (tmp_path / "x.bxr").read_bytes() == (tmp_path / "y.bxr").read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_aborts(dataset):
    tr = dataset.subset("train")
    cfg = TrainConfig(**SMALL, epochs=1, lr0=1e30, max_grad_norm=0)
    with pytest.raises(NumericError):
        train(tr, cfg)


def test_refine_contract(dataset):
    tr, va = dataset.subset("train"), dataset.subset("val")
    ckpt, _ = train(tr, TrainConfig(**SMALL, epochs=1))
    props = [(f, p) for f in sorted(va.proposals) for p in va.proposals[f]]
    far = Proposal(Box7(500, 500, 0, 2, 4, 1.5), "vehicle", 0.6)
    props.append((props[0][0], far))
    out = refine(ckpt, props, va.clouds)
    assert len(out) == len(props)
    assert out[-1].empty and out[-1].score == 0.0 and out[-1].box == far.box
    assert refine(ckpt, props[-1:], va.clouds, pass_through_empty=True)[0].score == 0.6
    for r in out:
        assert 0.0 <= r.score <= 1.0 and r.cls in va.classes
    with pytest.raises(ValueError):
        refine(ckpt, props, va.clouds, variant="anchor")


def test_refine_zero_head_keeps_geometry(dataset):
    va = dataset.subset("val")
    ckpt, _ = train(dataset.subset("train"), TrainConfig(**SMALL, epochs=1))
    ckpt.model.params["reg_out.W"][...] = 0
    ckpt.model.params["reg_out.b"][...] = 0
    ckpt.model.touch()
    props = [(f, p) for f in sorted(va.proposals) for p in va.proposals[f]]
    for r, (_, p) in zip(refine(ckpt, props, va.clouds), props):
        assert r.box == p.box


def test_bench_rows():
    m = init_model(np.random.default_rng(0), input_channels=3)
    res = bench(m, [16, 32], batch=4, repeats=2, warmup=1)
    assert res["parameters"] == 43339
    assert [r["points"] for r in res["rows"]] == [16, 32]
    with pytest.raises(ValueError):
        bench(m, [32, 16])
