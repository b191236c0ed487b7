import re

import numpy as np
import pytest

import reference as ref
from mctrans.data import BOS
from mctrans.gradcheck import random_batch
from mctrans.model import (CheckpointError, FusionError, Model, ModelConfig, ModelParams,
                           build_model, decode_forward, early_fusion_forward, late_fusion_forward,
                           load_checkpoint, save_checkpoint)
from mctrans.tensor import ConfigError, ShapeError, Tape, Tensor, precision
from mctrans.training import LossConfig, batch_losses


def small_config(**kw):
    base = dict(channel_dims=[5, 4], vocab_size=11, d_model=8, d_ff=12, anchor_classes=[3, 0])
    base.update(kw)
    return ModelConfig(**base)


def random_inputs(cfg, rng, lengths=None, batch=2, u=4):
    lengths = lengths or [[int(rng.integers(2, 6)) for _ in cfg.channel_dims] for _ in range(batch)]
    feats, masks = [], []
    for i, dim in enumerate(cfg.channel_dims):
        t_max = max(l[i] for l in lengths)
        x = np.zeros((batch, t_max, dim))
        m = np.zeros((batch, t_max), dtype=bool)
        for b, l in enumerate(lengths):
            x[b, :l[i]] = rng.normal(size=(l[i], dim))
            m[b, :l[i]] = True
        feats.append(x)
        masks.append(m)
    y = rng.integers(4, cfg.vocab_size, size=(batch, u))
    y[:, 0] = BOS
    return feats, masks, y


# -- construction -----------------------------------------------------------

def test_build_is_deterministic():
    a, b = build_model(small_config(), 3), build_model(small_config(), 3)
    assert list(a) == list(b)
    for k in a:
        assert a[k].data.tobytes() == b[k].data.tobytes()
    c = build_model(small_config(), 4)
    assert any(a[k].data.tobytes() != c[k].data.tobytes() for k in a)


def expected_parameter_count(D, G, anchors, d, f, enc, dec):
    """Independent count of every weight in the two-block encoder / two-stage decoder."""
    n = len(D)
    attn = 3 * (d * d + d) + 2 * d
    ff = d * f + f + f * d + d + 2 * d
    embed = sum(dim * d + d + 2 * d for dim in D)          # projection + batch-norm affine
    encoder = enc * n * 2 * (attn + ff)
    anchor = sum(d * g + g for g in anchors if g)
    words = G * d + d
    cross = (d * d + d) + 2 * d + ff + n * 2 * (d * d + d)
    decoder = dec * (attn + cross)
    out = d * G + G
    return embed + encoder + anchor + words + decoder + out


def test_parameter_count_regression():
    cfg = ModelConfig(channel_dims=[1024, 1024], vocab_size=100, d_model=128, d_ff=256,
                      enc_layers=2, dec_layers=2, anchor_classes=[52, 36])
    count = build_model(cfg, 0).count()
    assert count == expected_parameter_count([1024, 1024], 100, [52, 36], 128, 256, 2, 2)
    assert count == 1_625_404


def test_initial_values_respect_xavier_bounds():
    params = build_model(small_config(d_model=16, d_ff=24), 1)
    for address, t in params.items():
        leaf = address.rsplit(".", 1)[-1]
        if leaf == "gamma":
            assert np.all(t.data == 1.0)
        elif t.data.ndim == 1:
            assert np.all(t.data == 0.0)
        else:
            fan_in, fan_out = t.shape
            assert np.abs(t.data).max() <= np.sqrt(6.0 / (fan_in + fan_out)), address


def test_invalid_configs():
    with pytest.raises(ConfigError):
        small_config(fusion_mode="middle")
    with pytest.raises(ConfigError):
        small_config(enc_layers=0)
    with pytest.raises(ConfigError):
        small_config(anchor_classes=[1])
    with pytest.raises(ConfigError):
        small_config(d_model=7)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict(dict(small_config().to_dict(), colour="red"))


# -- encoder ----------------------------------------------------------------

def test_encoder_shapes_for_ragged_channels(rng):
    cfg = small_config(d_model=16, d_ff=16, anchor_classes=[52, 36])
    model = Model.build(cfg, 0)
    x = [rng.normal(size=(1, 5, 5)), rng.normal(size=(1, 9, 4))]
    enc = model.encode(x, mode="infer")
    assert [h.shape for h in enc.h_e] == [(1, 5, 16), (1, 9, 16)]
    assert [a.shape for a in enc.anchor_logits] == [(1, 5, 52), (1, 9, 36)]


def test_one_channel_model_equals_standard_transformer(rng):
    cfg = ModelConfig(channel_dims=[5], vocab_size=11, d_model=8, d_ff=12)
    model = Model.build(cfg, 2)
    feats, masks, y = random_inputs(cfg, rng, lengths=[[4], [6]])
    logits, _ = model.forward(feats, masks, y, mode="train", update_stats=False)
    p = {k: t.data for k, t in model.params.items()}
    want = ref.standard_transformer_logits(p, cfg, feats[0], masks[0], y)
    assert np.abs(logits.data - want).max() < 1e-10


def test_decoder_is_causal(rng):
    model = Model.build(small_config(), 0)
    feats, masks, y = random_inputs(model.config, rng, u=6)
    enc = model.encode(feats, masks)
    base = decode_forward(model, enc, y).data
    for u in range(5):
        y2 = y.copy()
        y2[:, u + 1:] = rng.integers(4, 11, size=y2[:, u + 1:].shape)
        out = decode_forward(model, enc, y2).data
        assert out[:, :u + 1].tobytes() == base[:, :u + 1].tobytes()


def test_decoder_input_must_start_with_bos(rng):
    model = Model.build(small_config(), 0)
    feats, masks, y = random_inputs(model.config, rng)
    y[:, 0] = 5
    with pytest.raises(ValueError):
        decode_forward(model, model.encode(feats, masks), y)


def test_every_channel_influences_logits(rng):
    model = Model.build(small_config(), 0)
    feats, masks, y = random_inputs(model.config, rng)
    base = model.forward(feats, masks, y, mode="infer")[0].data
    for i in range(2):
        moved = [f.copy() for f in feats]
        moved[i][masks[i]] += rng.normal(size=moved[i][masks[i]].shape)
        assert not np.allclose(model.forward(moved, masks, y, mode="infer")[0].data, base)


# -- fusion baselines -------------------------------------------------------

def test_early_fusion_concatenates_features():
    cfg = ModelConfig(channel_dims=[1024, 1024], vocab_size=20, d_model=16, d_ff=16,
                      fusion_mode="early")
    params = build_model(cfg, 0)
    assert params["emb.ch0.W"].shape == (2048, 16)
    assert "emb.ch1.W" not in params


def test_early_fusion_rejects_ragged_channels(rng):
    model = Model.build(small_config(fusion_mode="early", anchor_classes=None), 0)
    x = [rng.normal(size=(1, 4, 5)), rng.normal(size=(1, 5, 4))]
    with pytest.raises(FusionError):
        early_fusion_forward(model, x, None, np.array([[BOS, 5]]))


def test_early_fusion_equals_single_channel_on_joined_features(rng):
    early = Model.build(small_config(fusion_mode="early", anchor_classes=None), 7)
    single = Model.build(small_config(channel_dims=[9], fusion_mode="single", anchor_classes=None), 7)
    a, b = rng.normal(size=(2, 6, 5)), rng.normal(size=(2, 6, 4))
    y = np.array([[BOS, 5, 6], [BOS, 7, 4]])
    got = early_fusion_forward(early, [a, b], None, y, mode="train")
    want, _ = single.forward([np.concatenate([a, b], axis=-1)], None, y, mode="train")
    assert got.data.tobytes() == want.data.tobytes()


def test_late_fusion_with_one_channel_matches_single_model(rng):
    single = Model.build(ModelConfig(channel_dims=[5], vocab_size=11, d_model=8, d_ff=12,
                                     fusion_mode="single"), 1)
    late = Model.build(ModelConfig(channel_dims=[5], vocab_size=11, d_model=8, d_ff=12,
                                   fusion_mode="late"), 1)
    for k, t in single.params.items():
        if not k.startswith("out."):
            late.params[f"late.m0.{k}"].data[...] = t.data
    # an identity layer between the branch output and the shared projection
    late.params["out.W"].data[...] = np.eye(8) @ single.params["out.W"].data
    late.params["out.b"].data[...] = single.params["out.b"].data
    feats, masks, y = random_inputs(single.config, rng)
    got = late_fusion_forward(late, feats, masks, y, mode="infer").data
    want = single.forward(feats, masks, y, mode="infer")[0].data
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_late_fusion_projection_width():
    params = build_model(ModelConfig(channel_dims=[3, 3, 3], vocab_size=10, d_model=128, d_ff=8,
                                     enc_layers=1, dec_layers=1, fusion_mode="late"), 0)
    assert params["out.W"].shape == (384, 10)


def test_late_fusion_gradient_reaches_every_branch():
    cfg = small_config(channel_dims=[5, 4, 6], anchor_classes=[3, 0, 2], fusion_mode="late")
    model = Model.build(cfg, 0)
    batch = random_batch(cfg, seed=3)
    with Tape() as tape:
        loss, _, _ = batch_losses(model, batch, LossConfig(), "train")
    tape.backward(loss, model.params.values())
    for i in range(3):
        grads = [t.grad for k, t in model.params.items() if k.startswith(f"late.m{i}.")]
        assert sum(float(np.abs(g).sum()) for g in grads) > 0
        for k, t in model.params.items():
            if k.startswith(f"late.m{i}.") and k.endswith(("W_q", "W_v", "ff.W1", "ff.W2")):
                assert np.abs(t.grad).max() > 0, k


def test_late_fusion_branch_count_mismatch(rng):
    model = Model.build(small_config(fusion_mode="late"), 0)
    with pytest.raises(ShapeError):
        late_fusion_forward(model, [rng.normal(size=(1, 3, 5))], None, np.array([[BOS]]))


# -- invariances ------------------------------------------------------------

def test_checkpoint_roundtrip_is_bit_exact(tmp_path, rng):
    with precision(32):
        model = Model.build(small_config(), 5)
        feats, masks, y = random_inputs(model.config, rng)
        model.forward(feats, masks, y, mode="train")           # move the running statistics
        before = model.forward(feats, masks, y, mode="infer")[0].data
        path = tmp_path / "m.ckpt"
        model.save(path, vocab=["<pad>", "<bos>", "<eos>", "<unk>"], extra={"step": 3})
        loaded, vocab, extra = Model.load(path)
        after = loaded.forward(feats, masks, y, mode="infer")[0].data
    assert before.dtype == np.float32
    assert before.tobytes() == after.tobytes()
    assert extra == {"step": 3} and vocab[:2] == ["<pad>", "<bos>"]
    for k, t in model.params.items():
        assert t.data.tobytes() == loaded.params[k].data.tobytes()
    for k, s in model.params.norm_states.items():
        assert s.running_var.tobytes() == loaded.params.norm_states[k].running_var.tobytes()


def test_corrupt_checkpoint_is_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, small_config(), build_model(small_config(), 0))
    raw = path.read_bytes()
    (tmp_path / "short.ckpt").write_bytes(raw[:-10])
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_batch_invariance_in_32_bit(rng):
    with precision(32):
        model = Model.build(small_config(), 2)
        lengths = [[3, 5], [6, 2], [4, 4]]
        feats, masks, y = random_inputs(model.config, rng, lengths=lengths, batch=3)
        feats = [f.astype(np.float32) for f in feats]
        batched = model.forward(feats, masks, y, mode="infer")[0].data
        for b, l in enumerate(lengths):
            alone = model.forward([f[b:b + 1, :l[i]] for i, f in enumerate(feats)], None,
                                  y[b:b + 1], mode="infer")[0].data
            np.testing.assert_allclose(alone[0], batched[b], atol=1e-6)


def permute_channels(params: ModelParams, perm):
    """Rename every per-channel address so channel ``perm[k]`` becomes channel ``k``."""
    inverse = {old: new for new, old in enumerate(perm)}

    def rename(address):
        return re.sub(r"ch(\d+)", lambda m: f"ch{inverse[int(m.group(1))]}", address)

    tensors = {rename(k): Tensor(t.data.copy()) for k, t in params.items()}
    states = {rename(k): s for k, s in params.norm_states.items()}
    return ModelParams(tensors, states)


def test_channel_permutation_with_parameters_is_invariant(rng):
    cfg = small_config(channel_dims=[5, 4, 6], anchor_classes=[0, 0, 0])
    model = Model.build(cfg, 9)
    feats, masks, y = random_inputs(cfg, rng, batch=2)
    base = model.forward(feats, masks, y, mode="infer")[0].data
    perm = [2, 0, 1]
    moved = Model(ModelConfig(**dict(cfg.to_dict(), channel_dims=[cfg.channel_dims[p] for p in perm])),
                  permute_channels(model.params, perm))
    out = moved.forward([feats[p] for p in perm], [masks[p] for p in perm], y, mode="infer")[0].data
    assert np.abs(out - base).max() < 1e-10
