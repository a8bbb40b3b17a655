import numpy as np
import pytest

from latentfluid.errors import ContractViolation, DataFormatError
from latentfluid.params import (
    Adam,
    ParamStore,
    adam_step,
    lr_cosine,
    lr_exp_decay,
    lr_halving,
)
from latentfluid.tape import Tensor, backward, tsum


def _toy_store():
    store = ParamStore(metadata={"stage": "A", "note": "unit"})
    rng = np.random.default_rng(0)
    store.param("enc.w", rng.normal(size=(4, 3)))
    store.param("enc.b", rng.normal(size=(3,)))
    store.param("head.w", rng.normal(size=(3, 1)))
    return store


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    store = _toy_store()
    # populate optimizer state so it round-trips too
    g = {n: np.full_like(store[n].value, 0.25) for n in store.names()}
    adam_step(store, g, lr=1e-3, t=1)
    store.opt_step = 1
    path = tmp_path / "ck.lipc"
    store.save(path)
    loaded = ParamStore.load(path)
    assert loaded.metadata == store.metadata
    assert loaded.opt_step == 1
    assert loaded.names() == store.names()
    for n in store.names():
        assert loaded[n].value.tobytes() == store[n].value.tobytes()
        for slot in ("m", "v"):
            assert loaded.opt_state[n][slot].tobytes() == store.opt_state[n][slot].tobytes()
    # and the raw file bytes are reproducible
    assert loaded.to_bytes() == store.to_bytes()
    assert loaded.checksum() == store.checksum()


def test_checkpoint_parse_errors(tmp_path):
    path = tmp_path / "bad.lipc"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(DataFormatError) as ei:
        ParamStore.load(path)
    assert "byte 0" in str(ei.value)

    store = _toy_store()
    blob = store.to_bytes()
    path.write_bytes(blob[: len(blob) - 5])
    with pytest.raises(DataFormatError) as ei:
        ParamStore.load(path)
    assert "truncated" in str(ei.value)


def test_duplicate_param_rejected():
    store = ParamStore()
    store.param("a", np.zeros(2))
    with pytest.raises(ContractViolation):
        store.param("a", np.zeros(2))


def test_adam_matches_reference_implementation():
    # independent oracle: textbook Adam in plain numpy
    rng = np.random.default_rng(3)
    w0 = rng.normal(size=(5,))
    grads = [rng.normal(size=(5,)) for _ in range(7)]
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8

    w_ref = w0.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w_ref = w_ref - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)

    store = ParamStore()
    store.param("w", w0)
    for t, g in enumerate(grads, start=1):
        adam_step(store, {"w": g}, lr=lr, beta1=b1, beta2=b2, eps=eps, t=t)
    assert np.allclose(store["w"].value, w_ref, rtol=0, atol=1e-15)


def test_adam_wrapper_uses_tensor_grads_and_respects_name_filter():
    store = _toy_store()
    x = Tensor(np.ones((2, 4)))
    loss = tsum((x @ store["enc.w"]) + store["enc.b"])
    backward(loss)
    before_head = store["head.w"].value.copy()
    before_enc = store["enc.w"].value.copy()
    opt = Adam(store, lr=0.1, names=store.names("enc."))
    opt.step()
    assert np.array_equal(store["head.w"].value, before_head)
    assert not np.array_equal(store["enc.w"].value, before_enc)
    assert store.opt_step == 1


def test_lr_schedules():
    assert lr_halving(1.0, 0) == 1.0
    assert lr_halving(1.0, 24999) == 1.0
    assert lr_halving(1.0, 25000) == 0.5
    assert lr_halving(1.0, 29999) == 0.5
    assert lr_halving(1.0, 30000) == 0.25
    assert lr_exp_decay(1.0, 0, 100, gamma=0.1) == 1.0
    assert np.isclose(lr_exp_decay(1.0, 100, 100, gamma=0.1), 0.1)
    assert np.isclose(lr_cosine(2.0, 0, 10), 2.0)
    assert np.isclose(lr_cosine(2.0, 10, 10), 0.0)
    assert np.isclose(lr_cosine(2.0, 5, 10), 1.0)


def test_clone_subset_and_copy_values():
    store = _toy_store()
    enc = store.clone_subset("enc.")
    assert enc.names() == ["enc.w", "enc.b"]
    enc["enc.w"].value[:] = 7.0
    assert not np.array_equal(enc["enc.w"].value, store["enc.w"].value)
    store.copy_values_from(enc)
    assert np.array_equal(store["enc.w"].value, enc["enc.w"].value)
