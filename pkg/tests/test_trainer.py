import numpy as np
import pytest

from tendo.engine.tensor import Tensor
from tendo.io import load_checkpoint, save_checkpoint
from tendo.models.classifier import ClassifierConfig, build_classifier
from tendo.models.nasunet import NASUNetConfig, build_nasunet
from tendo.synthdata import classification_spec, generate_dataset, segmentation_spec
from tendo.trainer import (Adam, ClassificationTask, Phase, Schedule, SegmentationTask, TrainingError, adam_step,
                           classification_schedule, cross_validate, fold_seed, run_schedule,
                           segmentation_schedule)

TOY_SPEC = segmentation_spec(size=32, tendon_major=(9.0, 13.0), tendon_minor=(3.0, 5.0), center_jitter=3.0)
TOY_CFG = NASUNetConfig(levels=1, repeats=1, base_filters=8, input_size=(32, 32))


@pytest.fixture(scope="module")
def toy_data():
    return generate_dataset(TOY_SPEC, 10, 0, k=0)


def _params(**arrays):
    return {k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True) for k, v in arrays.items()}


def test_adam_first_step():
    ps = _params(a=[0.5, -2.0])
    opt = Adam(ps, lambda k: "new", {"new": 1e-3})
    adam_step(ps, {"a": np.ones(2)}, opt)
    np.testing.assert_allclose(ps["a"].data, [0.5 - 1e-3, -2.0 - 1e-3], rtol=0, atol=1e-10)


def test_adam_zero_grads_and_groups():
    ps = _params(a=[1.0, 2.0], b=[1.0, 2.0], c=[3.0])
    opt = Adam(ps, lambda k: {"a": "backbone", "b": "new", "c": "frozen"}[k],
               {"backbone": 1e-3, "new": 3e-3, "frozen": 0.0})
    before_c = ps["c"].data.copy()
    adam_step(ps, {"a": np.zeros(2), "b": np.zeros(2), "c": np.ones(1)}, opt)
    assert ps["a"].data.tolist() == [1.0, 2.0]
    assert ps["c"].data.tobytes() == before_c.tobytes()
    ps2 = _params(a=[0.0], b=[0.0])
    opt2 = Adam(ps2, lambda k: "backbone" if k == "a" else "new", {"backbone": 1e-3, "new": 3e-3})
    adam_step(ps2, {"a": np.array([0.7]), "b": np.array([0.7])}, opt2)
    assert ps2["b"].data[0] / ps2["a"].data[0] == pytest.approx(3.0)


def test_adam_nan_aborts():
    ps = _params(a=[1.0])
    opt = Adam(ps, lambda k: "new", {"new": 1e-3})
    with pytest.raises(TrainingError, match="non-finite"):
        adam_step(ps, {"a": np.array([np.nan])}, opt)


def test_adam_state_round_trip(tmp_path):
    # training parameters are float32, the checkpoint precision
    ps = {"a": Tensor(np.arange(3, dtype=np.float32), requires_grad=True)}
    opt = Adam(ps, lambda k: "new", {"new": 1e-2})
    for g in ([1, 2, 3], [0.5, -1, 2]):
        adam_step(ps, {"a": np.array(g, np.float32)}, opt)
    save_checkpoint(tmp_path / "o.ckpt", opt.state_dict())
    other = Adam({"a": Tensor(np.arange(3, dtype=np.float32))}, lambda k: "new", {"new": 1e-2})
    other.load_state_dict(load_checkpoint(tmp_path / "o.ckpt"))
    assert other.step_count == 2
    assert other.m["a"].tobytes() == opt.m["a"].tobytes() and other.v["a"].tobytes() == opt.v["a"].tobytes()


def test_schedule_defaults():
    seg = segmentation_schedule()
    assert [(p.dataset, p.epochs) for p in seg.phases] == [("pretrain", 200), ("target", 100)]
    assert seg.phases[0].group_lrs() == {"backbone": 1e-3, "new": 3e-3}
    assert seg.phases[1].group_lrs() == {"backbone": 4e-4, "new": 4e-4}
    cls = classification_schedule(pretrain_epochs=5)
    assert cls.phases[0].group_lrs() == {"backbone": 1e-3, "new": 5e-3}
    assert cls.phases[1].group_lrs() == {"backbone": 5e-4, "new": 5e-4}
    with pytest.raises(ValueError):
        Schedule((Phase("target", 1, {"all": -1.0}),)).validate()


def test_zero_epoch_phase_leaves_model(toy_data):
    m = build_nasunet(TOY_CFG, 0)
    before = {k: v.copy() for k, v in m.state_dict().items()}
    run_schedule(m, Schedule((Phase("target", 0, {"all": 1e-3}),)), {"target": toy_data}, 0, SegmentationTask())
    after = m.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_toy_loss_decreases(toy_data):
    wins = 0
    for seed in range(5):
        m = build_nasunet(TOY_CFG, seed)
        log = run_schedule(m, Schedule((Phase("target", 5, {"all": 1e-3}),), 4), {"target": toy_data}, seed,
                           SegmentationTask()).log
        losses = [row[3] for row in log]
        wins += all(b < a for a, b in zip(losses, losses[1:]))
    assert wins >= 4


def test_frozen_group_unchanged(toy_data):
    m = build_nasunet(TOY_CFG, 1)
    enc = {k: v.data.copy() for k, v in m.named_parameters().items() if k.startswith("encoder.")}
    sched = Schedule((Phase("target", 1, {"backbone": 0.0, "new": 1e-3}),), 4)
    run_schedule(m, sched, {"target": toy_data}, 0, SegmentationTask())
    params = m.named_parameters()
    assert all(params[k].data.tobytes() == v.tobytes() for k, v in enc.items())
    assert any(not k.startswith("encoder.") for k in params)


def test_resume_is_bit_exact(toy_data, tmp_path):
    sched = Schedule((Phase("target", 2, {"backbone": 1e-3, "new": 3e-3}), Phase("target", 2, {"all": 4e-4})), 4)
    full = build_nasunet(TOY_CFG, 2)
    full_log = run_schedule(full, sched, {"target": toy_data}, 7, SegmentationTask()).log
    part = build_nasunet(TOY_CFG, 2)
    ck, lg = tmp_path / "run.ckpt", tmp_path / "log.csv"
    run_schedule(part, sched, {"target": toy_data}, 7, SegmentationTask(), log_path=lg, checkpoint_path=ck,
                 stop_after=(1, 0))
    resumed = build_nasunet(TOY_CFG, 99)
    log = run_schedule(resumed, sched, {"target": toy_data}, 7, SegmentationTask(), log_path=lg,
                       checkpoint_path=ck, resume=True).log
    assert [r[:3] for r in log] == [r[:3] for r in full_log]
    assert log[-1][3] == full_log[-1][3]
    a, b = full.state_dict(), resumed.state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_divergence_saves_last_good(toy_data, tmp_path):
    m = build_nasunet(TOY_CFG, 3)
    sched = Schedule((Phase("target", 1, {"all": 1e-3}),), 4)

    class Exploding(SegmentationTask):
        def loss(self, out, y):
            from tendo.engine import ops
            return ops.mul(super().loss(out, y), float("nan"))

    with pytest.raises(TrainingError, match="loss became nan"):
        run_schedule(m, sched, {"target": toy_data}, 0, Exploding(), checkpoint_path=tmp_path / "c.ckpt")
    assert (tmp_path / "c.ckpt").exists()


def test_missing_dataset_rejected(toy_data):
    with pytest.raises(KeyError):
        run_schedule(build_nasunet(TOY_CFG), Schedule((Phase("pretrain", 1, {"all": 1e-3}),)),
                     {"target": toy_data}, 0, SegmentationTask())


@pytest.fixture(scope="module")
def cv_result():
    data = generate_dataset(classification_spec(size=32, tendon_major=(9.0, 12.0), tendon_minor=(3.0, 4.0)), 30, 0,
                            k=3)
    for s in data:
        s.fold = int(s.id[1:]) % 3  # equal-sized folds
    cfg = ClassifierConfig(NASUNetConfig(levels=1, repeats=1, base_filters=4, input_size=(32, 32)), width=0.05)
    sched = Schedule((Phase("target", 1, {"all": 1e-3}),), 8)
    res = cross_validate(lambda s: build_classifier(cfg, s), data, ClassificationTask("PI"), sched, 5, k=3)
    return data, res


def test_cv_every_sample_predicted_once(cv_result):
    data, res = cv_result
    seen = [sid for f in res.folds for sid in f.ids]
    assert sorted(seen) == sorted(s.id for s in data)
    assert set(res.predictions) == {s.id for s in data}


def test_cv_aggregate_acc_is_pooled(cv_result):
    data, res = cv_result
    correct = sum(int((res.predictions[s.id][1] >= 0.5) == bool(s.label)) for s in data)
    assert res.aggregate.acc == pytest.approx(correct / len(data))
    assert res.aggregate.acc == pytest.approx(np.mean([f.report.acc for f in res.folds]))


def test_cv_fold_seeds_differ(cv_result):
    _, res = cv_result
    assert len({f.seed for f in res.folds}) == 3
    assert [f.seed for f in res.folds] == [fold_seed(5, k) for k in range(3)]


def test_cv_requires_folds():
    data = generate_dataset(classification_spec(), 6, 0, k=0)
    with pytest.raises(ValueError, match="fold"):
        cross_validate(lambda s: None, data, ClassificationTask("OI"), Schedule(()), 0, k=5)
