import struct
from dataclasses import replace

import numpy as np
import pytest

from physattn import diffkernel as dk
from physattn.errors import ConfigError, DataError, DimensionError
from physattn.model import (
    ABLATIONS,
    ModelConfig,
    build,
    checkpoint_bytes,
    count_params,
    expected_param_count,
    load_checkpoint,
    model_from_bytes,
    save_checkpoint,
)
from physattn.spectral import hybrid_loss

import reference as ref

TINY = ModelConfig(d_model=8, heads=2, layers=1, window=8, horizon=3, seed=3)


def inputs(cfg, batch=None, seed=0):
    rng = np.random.default_rng(seed)
    lead = () if batch is None else (batch,)
    return (rng.normal(size=lead + (cfg.window, cfg.wave_channels)),
            rng.normal(size=lead + (cfg.window, cfg.resp_channels)))


def perturb(model, seed=0, scale=0.3):
    """Move every parameter off its initial value so no path is trivially zero."""
    rng = np.random.default_rng(seed)
    for p in model.params.values():
        if p.trainable:
            p.value.data = p.value.data + rng.normal(scale=scale, size=p.value.data.shape)


# --- config -----------------------------------------------------------------


def test_defaults():
    c = ModelConfig()
    assert (c.d_model, c.heads, c.layers, c.window, c.horizon, c.dt, c.dropout, c.lam, c.ablation) == \
        (64, 4, 5, 48, 12, 0.05, 0.1, 0.6, "full")
    assert c.d_head == 16


def test_invalid_config_lists_every_violation():
    with pytest.raises(ConfigError) as exc:
        ModelConfig(d_model=10, heads=4, lam=1.5, layers=0).validate()
    msg = str(exc.value)
    assert "heads" in msg and "lam" in msg and "layers" in msg


@pytest.mark.parametrize("bad", [dict(horizon=0), dict(window=1), dict(ablation="nope"), dict(dropout=1.0)])
def test_config_rejections(bad):
    with pytest.raises(ConfigError):
        build(replace(TINY, **bad))


def test_config_text_round_trip():
    c = replace(TINY, lam=0.2, ablation="no_gcf", dt=0.05)
    assert ModelConfig.from_text(c.to_text()) == c
    with pytest.raises(ConfigError):
        ModelConfig.from_mapping({"bogus": "1"})


# --- build / forward --------------------------------------------------------


def test_same_seed_same_parameter_bytes():
    assert checkpoint_bytes(build(TINY)) == checkpoint_bytes(build(TINY))
    assert checkpoint_bytes(build(TINY)) != checkpoint_bytes(build(replace(TINY, seed=4)))


def test_initial_bias_parameters():
    m = build(replace(TINY, heads=4))
    th = m.params["layer0.dbsa.theta_p"].value.data
    np.testing.assert_allclose(np.logaddexp(0, th), 0.5, rtol=1e-12)
    np.testing.assert_allclose(m.params["layer0.bca1.w"].value.data, [[0.25, 0.5, 0.75, 1.0]])
    np.testing.assert_allclose(m.params["layer0.bca2.w"].value.data, [[0.25, 0.5, 0.75, 1.0]])
    assert np.all(m.params["gcf.q_global"].value.data == 0)


def test_no_dbsa_decay_is_zero_and_frozen():
    m = build(replace(TINY, ablation="no_dbsa"))
    names = {p.name for p in m.trainable()}
    assert "layer0.dbsa.theta_p" not in names and "layer0.dbsa.theta_f" not in names
    assert np.all(m.layers[0].dbsa.bias_matrix(8).data == 0)


def test_no_pdgbca_phase_is_zero_and_frozen():
    m = build(replace(TINY, ablation="no_pdgbca"))
    names = {p.name for p in m.trainable()}
    assert "layer0.bca1.w" not in names and "layer0.bca2.w" not in names
    assert np.all(m.layers[0].bca1.bias_matrix(8).data == 0)


@pytest.mark.parametrize("N", [6, 12, 24, 48])
def test_horizon_output_lengths(N):
    cfg = replace(TINY, window=48, horizon=N)
    m = build(cfg)
    w, r = inputs(cfg, batch=2)
    assert m.forward(w, r).shape == (2, N, cfg.out_channels)
    assert m.forward(w[0], r[0]).shape == (N, cfg.out_channels)


def test_eval_forward_is_bitwise_deterministic():
    m = build(TINY)
    perturb(m)
    w, r = inputs(TINY, batch=3)
    np.testing.assert_array_equal(m.forward(w, r).data, m.forward(w, r).data)


def test_training_forward_uses_dropout():
    m = build(TINY)
    w, r = inputs(TINY, batch=3)
    a = m.forward(w, r, training=True, rng=np.random.default_rng(0)).data
    b = m.forward(w, r).data
    assert not np.array_equal(a, b)


def test_forward_shape_errors():
    m = build(TINY)
    w, r = inputs(TINY)
    with pytest.raises(DimensionError):
        m.forward(w[:-1], r[:-1])
    with pytest.raises(DimensionError):
        m.forward(w[:, :2], r)


@pytest.mark.parametrize("ablation", ABLATIONS)
def test_matches_straight_line_reference(ablation):
    cfg = replace(TINY, ablation=ablation)
    m = build(cfg)
    perturb(m, seed=1)
    w, r = inputs(cfg, seed=2)
    np.testing.assert_allclose(m.forward(w, r).data, ref.model_forward(m, w, r), rtol=0, atol=1e-10)


def test_batched_forward_equals_per_window():
    m = build(TINY)
    perturb(m)
    w, r = inputs(TINY, batch=4)
    batched = m.forward(w, r).data
    for b in range(4):
        np.testing.assert_allclose(batched[b], m.forward(w[b], r[b]).data, rtol=0, atol=1e-13)


def test_no_dbsa_equals_full_with_vanishing_decay():
    full = build(TINY)
    perturb(full, seed=5)
    ablated = build(replace(TINY, ablation="no_dbsa"))
    ablated.load_state(full.state())
    for li in range(TINY.layers):
        for k in ("theta_p", "theta_f"):
            full.params[f"layer{li}.dbsa.{k}"].value.data[:] = -800.0  # softplus underflows to 0
    w, r = inputs(TINY, batch=2)
    np.testing.assert_allclose(ablated.forward(w, r).data, full.forward(w, r).data, rtol=0, atol=1e-12)


# --- parameter counting -----------------------------------------------------


@pytest.mark.parametrize("ablation", ABLATIONS)
def test_count_matches_formula(ablation):
    for cfg in (replace(ModelConfig(), ablation=ablation), replace(TINY, ablation=ablation, layers=3)):
        assert count_params(build(cfg)) == expected_param_count(cfg)


def test_default_count_enumerated():
    m = build(ModelConfig())
    assert count_params(m) == sum(p.value.data.size for p in m.params.values() if p.trainable) == 414674


def test_count_structure():
    base = ModelConfig()
    assert expected_param_count(replace(base, ablation="no_gcf")) < expected_param_count(base)
    assert expected_param_count(replace(base, d_model=128)) > 2 * expected_param_count(base)


# --- gradients --------------------------------------------------------------


def test_full_model_gradcheck_tiny():
    cfg = replace(TINY, window=16, horizon=4, lam=0.6)
    m = build(cfg)
    perturb(m, seed=7, scale=0.2)
    w, r = inputs(cfg, batch=2, seed=8)
    target = dk.Tensor(np.random.default_rng(9).normal(size=(2, 4, 2)))
    details = {}
    err = dk.grad_check(lambda: hybrid_loss(m.forward(w, r), target, 0.6), m.trainable(), details=details)
    assert err < 1e-3
    for name in ("layer0.dbsa.theta_p", "layer0.dbsa.theta_f", "layer0.bca1.w", "layer0.bca2.w", "gcf.q_global"):
        assert name in details


def test_every_trainable_parameter_receives_gradient():
    cfg = replace(TINY, layers=2)
    alive = set()
    for seed in range(5):
        m = build(replace(cfg, seed=seed))
        w, r = inputs(cfg, batch=3, seed=seed)
        target = dk.Tensor(np.random.default_rng(seed).normal(size=(3, cfg.horizon, 2)))
        with dk.Tape() as tape:
            loss = hybrid_loss(m.forward(w, r), target, 0.6)
        tape.backward(loss)
        alive |= {p.name for p in m.trainable() if p.value.grad is not None and np.any(p.value.grad != 0)}
    assert alive == {p.name for p in build(cfg).trainable()}


# --- checkpoints ------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = build(replace(TINY, ablation="no_gcf", lam=0.3))
    perturb(m)
    save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == m.config
    for k, p in m.params.items():
        assert p.value.data.tobytes() == back.params[k].value.data.tobytes()
    assert checkpoint_bytes(back) == (tmp_path / "m.ckpt").read_bytes()
    w, r = inputs(TINY, batch=2)
    np.testing.assert_array_equal(back.forward(w, r).data, m.forward(w, r).data)


def test_checkpoint_layout():
    m = build(TINY)
    blob = checkpoint_bytes(m)
    assert blob[:4] == b"PANT"
    assert struct.unpack_from("<I", blob, 4)[0] == 1
    (n,) = struct.unpack_from("<I", blob, 8)
    text = blob[12:12 + n].decode("utf-8")
    assert "d_model=8" in text.splitlines()
    off = 12 + n
    (k,) = struct.unpack_from("<I", blob, off)
    name = blob[off + 4:off + 4 + k].decode()
    rows, cols = struct.unpack_from("<QQ", blob, off + 4 + k)
    first = next(iter(m.params.values()))
    assert name == first.name and (rows, cols) == first.value.data.shape
    data = np.frombuffer(blob, "<f8", rows * cols, off + 4 + k + 16)
    np.testing.assert_array_equal(data, first.value.data.ravel())


def test_checkpoint_rejects_garbage():
    with pytest.raises(DataError):
        model_from_bytes(b"NOPE" + bytes(20))
    blob = bytearray(checkpoint_bytes(build(TINY)))
    blob[4] = 9
    with pytest.raises(DataError):
        model_from_bytes(bytes(blob))
