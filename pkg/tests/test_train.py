import csv

import numpy as np
import pytest

from ggnn_iml.data import make_samples
from ggnn_iml.model import IMLModel, LossWeights, ModelConfig
from ggnn_iml.tensor import Tensor
from ggnn_iml.train import (
    Checkpoint, CheckpointError, OptimizerState, PlateauState, TrainConfig, TrainState, adamw_step,
    batch_loss, decode_checkpoint, encode_checkpoint, eval_loss, init_state, load_checkpoint,
    model_from_checkpoint, plateau_schedule, train_loop, train_step,
)
from ggnn_iml.vssd import BackboneConfig


def small_cfg(**kw):
    model = ModelConfig(BackboneConfig(stage_dims=(4, 4, 8, 8), stage_depths=(1, 1, 1, 1), state_dim=2),
                        fpn_dim=8, ppm_dim=8, k=3)
    cfg = TrainConfig(epochs=4, batch_size=4, lr_init=1e-3, seed=3, loss=LossWeights(), model=model)
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture(scope="module")
def tiny_data():
    return make_samples(8, 32, 0.5, 11), make_samples(4, 32, 0.5, 12)


# --- AdamW -------------------------------------------------------------------------------------

def one_param(value):
    return {"w": Tensor(np.array([value], dtype=np.float64))}


def test_adamw_first_step_hand_value():
    p = one_param(0.0)
    adamw_step(p, {"w": np.array([1.0])}, OptimizerState(lr=0.1, weight_decay=0.0))
    assert abs(p["w"].data[0] - (-0.1 / (1 + 1e-8))) <= 1e-12


def test_adamw_zero_gradient_is_a_no_op():
    p = one_param(0.7)
    st = OptimizerState(lr=0.1, weight_decay=0.0)
    adamw_step(p, {"w": np.array([0.0])}, st)
    assert p["w"].data[0] == 0.7
    assert st.t == 1


def test_adamw_decoupled_decay_only():
    p = one_param(1.0)
    adamw_step(p, {"w": np.array([0.0])}, OptimizerState(lr=0.1, weight_decay=0.1))
    assert p["w"].data[0] == pytest.approx(0.99, abs=1e-15)


def test_adamw_moments_mirror_parameters():
    p = {"a": Tensor(np.ones((2, 3))), "b": Tensor(np.ones(4))}
    st = OptimizerState()
    rng = np.random.default_rng(0)
    for _ in range(3):
        adamw_step(p, {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4)}, st)
    assert st.m["a"].shape == (2, 3) and st.v["b"].shape == (4,)
    assert all((v >= 0).all() for v in st.v.values())


def test_adamw_rejects_non_finite_gradient_by_name():
    p = one_param(0.0)
    st = OptimizerState()
    with pytest.raises(FloatingPointError, match="'w'"):
        adamw_step(p, {"w": np.array([np.nan])}, st)
    assert st.t == 0 and p["w"].data[0] == 0.0


# --- plateau -------------------------------------------------------------------------------------

def test_plateau_flat_losses_decay_after_sixth_epoch():
    st = PlateauState()
    lrs = [plateau_schedule(1.0, st) for _ in range(6)]
    assert lrs[:5] == [1e-4] * 5
    assert lrs[5] == pytest.approx(9e-5, rel=1e-15)


def test_plateau_improving_never_decays():
    st = PlateauState()
    assert {plateau_schedule(1.0 / (i + 1), st) for i in range(40)} == {1e-4}


def test_plateau_improvement_on_last_patience_epoch_resets():
    st = PlateauState()
    for loss in (1.0, 2.0, 2.0, 2.0, 2.0, 0.5):
        plateau_schedule(loss, st)
    assert st.decays == 0 and st.bad_epochs == 0


def test_plateau_equality_is_not_improvement():
    st = PlateauState(patience=1)
    plateau_schedule(1.0, st)
    plateau_schedule(1.0, st)
    assert st.decays == 1


def test_plateau_lr_is_exact_power_and_monotone():
    st = PlateauState()
    prev = st.lr
    for i in range(200):
        lr = plateau_schedule(5.0, st)
        assert lr <= prev
        prev = lr
    assert st.lr == st.lr_init * 0.9 ** st.decays
    assert st.decays == 39


# --- checkpoint file ---------------------------------------------------------------------------

def test_checkpoint_layout_and_dtypes():
    t = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([7], dtype=np.int64),
         "c": np.zeros((), dtype=np.float64), "d": np.frombuffer(b"hi", dtype=np.uint8)}
    raw = encode_checkpoint(t)
    assert raw[:4] == b"GGNN"
    assert int.from_bytes(raw[4:8], "little") == 1 and int.from_bytes(raw[8:12], "little") == 4
    back = decode_checkpoint(raw)
    assert list(back) == list(t)
    for k in t:
        assert back[k].dtype == t[k].dtype and back[k].shape == t[k].shape
        np.testing.assert_array_equal(back[k], t[k])


def test_checkpoint_corruption_detected(tmp_path):
    raw = bytearray(encode_checkpoint({"w": np.ones(8, np.float32)}))
    raw[30] ^= 1
    with pytest.raises(CheckpointError, match="checksum"):
        decode_checkpoint(bytes(raw))
    good = encode_checkpoint({"w": np.ones(8, np.float32)})
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(good[:-10])
    bad_version = good[:4] + (2).to_bytes(4, "little") + good[8:]
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(bad_version)
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOPE" + good[4:])
    with pytest.raises(CheckpointError, match="x.ckpt"):
        load_checkpoint(p)


def test_save_load_save_is_byte_identical(tmp_path):
    state = init_state(small_cfg())
    state.rng.integers(0, 10, 3)  # advance the stream off its initial position
    state.to_checkpoint(small_cfg()).save(tmp_path / "a.ckpt")
    back, cfg = TrainState.from_checkpoint(load_checkpoint(tmp_path / "a.ckpt"))
    back.to_checkpoint(cfg).save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert back.rng.integers(0, 2**62) == state.rng.integers(0, 2**62)


def test_mismatched_shapes_name_the_tensor():
    ckpt = init_state(small_cfg()).to_checkpoint(small_cfg())
    model = IMLModel(small_cfg().model, seed=0)
    state = {k[len("param."):]: v for k, v in ckpt.tensors.items() if k.startswith("param.")}
    first = next(iter(state))
    state[first] = np.zeros(state[first].shape + (1,), np.float32)
    with pytest.raises(ValueError, match=first.replace(".", r"\.")):
        model.load_state_dict(state)


# --- loop --------------------------------------------------------------------------------------

def test_two_epoch_bookkeeping(tiny_data, tmp_path):
    train, val = tiny_data
    cfg = small_cfg(epochs=2)
    res = train_loop(cfg, train, val, log_path=tmp_path / "log.csv", ckpt_path=tmp_path / "best.ckpt")
    assert [r.epoch for r in res.log] == [1, 2]
    model, _ = model_from_checkpoint(load_checkpoint(tmp_path / "best.ckpt"))
    best_val = min(r.val_loss for r in res.log)
    assert eval_loss(model, val, cfg.loss, cfg.batch_size) == pytest.approx(best_val, abs=1e-6)
    raw = (tmp_path / "log.csv").read_bytes()
    assert b"\r" not in raw
    rows = list(csv.reader(raw.decode().splitlines()))
    assert rows[0] == ["epoch", "train_loss", "val_loss", "lr", "seconds"]
    assert len(rows) == 3 and float(rows[1][3]) == cfg.lr_init


def test_runs_are_bit_deterministic(tiny_data):
    train, val = tiny_data
    a = train_loop(small_cfg(epochs=2), train, val)
    b = train_loop(small_cfg(epochs=2), train, val)
    assert [(r.train_loss, r.val_loss) for r in a.log] == [(r.train_loss, r.val_loss) for r in b.log]


def test_resume_equals_uninterrupted_run(tiny_data, tmp_path):
    train, val = tiny_data
    full = train_loop(small_cfg(epochs=4), train, val)
    train_loop(small_cfg(epochs=2), train, val, last_ckpt_path=tmp_path / "e2.ckpt")
    state, _ = TrainState.from_checkpoint(load_checkpoint(tmp_path / "e2.ckpt"))
    rest = train_loop(small_cfg(epochs=4), train, val, state=state)
    assert [r.epoch for r in rest.log] == [3, 4]
    assert [(r.train_loss, r.val_loss, r.lr) for r in rest.log] == \
           [(r.train_loss, r.val_loss, r.lr) for r in full.log[2:]]
    for (n, p), (_, q) in zip(full.state.model.named_parameters(), rest.state.model.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data, err_msg=n)


def test_bayar_constraint_holds_after_steps(tiny_data):
    train, _ = tiny_data
    state = init_state(small_cfg())
    for _ in range(3):
        train_step(state, train[:4], LossWeights())
        w = state.model.bayar.kernels.data
        k = w.shape[-1] // 2
        np.testing.assert_allclose(w[..., k, k], -1.0, atol=1e-6)
        np.testing.assert_allclose(w.sum(axis=(-1, -2)), 0.0, atol=1e-5)


def test_single_step_descent_rate(tiny_data):
    train, _ = tiny_data
    wins = 0
    for seed in range(100):
        state = init_state(small_cfg(seed=seed, lr_init=1e-4))
        state.opt.lr = 1e-4
        batch = train[seed % 5: seed % 5 + 4]
        before = train_step(state, batch, LossWeights())
        after = batch_loss(state.model, batch, LossWeights()).item()
        wins += after < before
    assert wins >= 95


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train_loop(small_cfg(), [], make_samples(2, 32, 0.5, 0))


def test_non_finite_loss_reports_epoch_and_batch(tiny_data):
    train, val = tiny_data
    cfg = small_cfg(epochs=1)
    state = init_state(cfg)
    for p in state.model.parameters():
        p.data = np.full_like(p.data, np.nan)
    with pytest.raises(FloatingPointError, match="epoch 1, batch 0"):
        train_loop(cfg, train, val, state=state)


def test_checkpoint_object_roundtrip(tmp_path):
    c = Checkpoint({"x": np.arange(3, dtype=np.uint64)})
    c.save(tmp_path / "c.ckpt")
    np.testing.assert_array_equal(Checkpoint.load(tmp_path / "c.ckpt").tensors["x"], c.tensors["x"])
