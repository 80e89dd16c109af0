import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icipnet import autodiff as ad
from icipnet.autodiff import ShapeError, Tensor
from icipnet.checks import probe_model
from icipnet.gradcheck import gradcheck
from icipnet.pipeline import (ConfigError, ICIPNet, ModelConfig, config_from_dict, format_config,
                              init_params, load_checkpoint, load_config, merge_indices, parse_key_values,
                              patchify, save_checkpoint, tiny_config, upsample_indices)
from icipnet.rng import Rng


@pytest.fixture(scope="module")
def tiny():
    return ICIPNet(tiny_config())


def inputs(cfg, B=2, seed=0):
    rng = Rng(seed)
    images = rng.child(0).uniform((B, cfg.image_size, cfg.image_size, 3))
    ids = rng.child(1).integers(0, cfg.vocab_size, size=B * cfg.text_len).reshape(B, cfg.text_len)
    return images, ids


# -- config --------------------------------------------------------------------------

def test_default_config_is_desk_scale():
    cfg = ModelConfig()
    assert (cfg.image_size, cfg.patch_size, cfg.channels[0], cfg.prompt_dim) == (64, 4, 16, 32)
    assert cfg.prompt_counts == (4, 4, 4, 4) and cfg.text_len == 8 and cfg.vocab_size == 32
    assert cfg.loss_lambda == 0.1 and cfg.dfm_softmax is False


@pytest.mark.parametrize("bad", [dict(image_size=60), dict(channels=(16, 32, 48, 96)),
                                 dict(loss_lambda=1.5), dict(prompt_counts=(4, 0, 4, 4)),
                                 dict(weight_init="xavier"), dict(channels=(16, 32, 64))])
def test_config_rejects_invalid(bad):
    with pytest.raises(ConfigError):
        ModelConfig(**bad)


def test_stage_plan_token_counts():
    for cfg in (ModelConfig(), tiny_config(), ModelConfig(image_size=128, patch_size=2)):
        plan = cfg.plan()
        assert plan[0].tokens == (cfg.image_size // cfg.patch_size) ** 2
        for a, b in zip(plan, plan[1:]):
            assert b.tokens * 4 == a.tokens and b.channels == 2 * a.channels


def test_config_text_round_trip(tmp_path):
    cfg = ModelConfig(prompt_counts=(3, 5, 8, 2), dfm_softmax=True, loss_lambda=0.25, init_std=0.03)
    text = format_config(cfg)
    assert "dfm.softmax = on" in text
    (tmp_path / "c.txt").write_text(text)
    assert load_config(tmp_path / "c.txt") == cfg


def test_config_parsing_errors():
    assert parse_key_values("# comment\nimage_size = 32  # trailing\n\n") == {"image_size": "32"}
    with pytest.raises(ConfigError):
        parse_key_values("image_size 32")
    with pytest.raises(ConfigError):
        config_from_dict({"nonsense": "1"})
    with pytest.raises(ConfigError):
        config_from_dict({"dfm.softmax": "maybe"})
    assert config_from_dict({"dfm.softmax": "off"}).dfm_softmax is False


# -- parameters -----------------------------------------------------------------------

def test_init_params_registered_and_deterministic():
    a, b = init_params(tiny_config()), init_params(tiny_config())
    assert list(a) == list(b)
    assert all(np.array_equal(a[k].data, b[k].data) and a[k].requires_grad for k in a)
    c = init_params(tiny_config(seed=1))
    assert not np.array_equal(a["embed.patch.w"].data, c["embed.patch.w"].data)


def test_init_scales():
    p = init_params(ModelConfig())
    for i in range(1, 5):
        assert np.all(p[f"gate.stage{i}.w"].data == 0) and np.all(p[f"gate.stage{i}.b"].data == 0)
        assert p[f"bif.stage{i}.lambda.base"].item() == pytest.approx(0.8 - 0.6 * np.exp(-0.3 * (i - 1)))
    assert abs(p["icip.stage1.T"].data.std() - 0.02) < 0.01
    w = p["stage4.mix.w1"].data
    assert abs(w.std() - w.shape[0] ** -0.5) < 0.1 * w.shape[0] ** -0.5
    fixed = init_params(ModelConfig(weight_init="fixed"))["stage4.mix.w1"].data
    assert abs(fixed.std() - 0.02) < 0.002


def test_adding_a_tensor_does_not_shift_others():
    base = init_params(tiny_config())
    more = init_params(tiny_config(use_icip=False))
    assert all(np.array_equal(base[k].data, more[k].data) for k in base)


# -- index helpers ---------------------------------------------------------------------

def test_patchify_layout():
    img = np.arange(4 * 4 * 3, dtype=float).reshape(1, 4, 4, 3)
    p = patchify(img, 2)
    assert p.shape == (1, 4, 12)
    np.testing.assert_array_equal(p[0, 1].reshape(2, 2, 3), img[0, 0:2, 2:4])
    np.testing.assert_array_equal(p[0, 2].reshape(2, 2, 3), img[0, 2:4, 0:2])


def test_merge_and_upsample_indices():
    m = merge_indices(4)
    assert m.shape == (4, 4)
    assert m[:, 0].tolist() == [0, 1, 4, 5] and m[:, 3].tolist() == [10, 11, 14, 15]
    up = upsample_indices(2, 2)
    assert up.reshape(4, 4).tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]


# -- stages ---------------------------------------------------------------------------

def test_embed_text_examples(tiny):
    cfg = tiny.config
    pad = tiny.embed_text(np.zeros((1, cfg.text_len), dtype=int)).data
    p = tiny.params
    expected = (p["text.embed"].data[0] + p["text.pos"].data) @ p["text.proj.w"].data + p["text.proj.b"].data
    np.testing.assert_allclose(pad[0], expected, rtol=1e-14)
    ids = np.array([[1, 2, 3, 0]])
    swapped = np.array([[2, 1, 3, 0]])
    diff = np.any(tiny.embed_text(ids).data != tiny.embed_text(swapped).data, axis=-1)[0]
    assert diff.tolist() == [True, True, False, False]
    with pytest.raises(IndexError):
        tiny.embed_text(np.array([[cfg.vocab_size, 0, 0, 0]]))
    with pytest.raises(ShapeError):
        tiny.embed_text(np.zeros((1, cfg.text_len + 1), dtype=int))


def test_encode_stage_shapes_and_residual():
    model = ICIPNet(tiny_config())
    cfg = model.config
    V1 = Tensor(Rng(1).normal((2, cfg.tokens(1), cfg.channels[0])))
    V2 = model.encode_stage(V1, 2)
    assert V2.shape == (2, cfg.tokens(1) // 4, cfg.channels[1])
    for k in ("w2", "b2"):
        model.params[f"stage2.mix.{k}"] = Tensor(np.zeros(model[f"stage2.mix.{k}"].shape))
    merged = ad.linear(ad.concat([ad.take(V1, idx, axis=1) for idx in merge_indices(cfg.grid(1))], axis=2),
                       model["stage2.merge.w"], model["stage2.merge.b"])
    assert np.array_equal(model.encode_stage(V1, 2).data, merged.data)
    with pytest.raises(ShapeError):
        model.encode_stage(V1, 3)


def test_fuse_stage_zero_gate_is_identity(tiny):
    cfg = tiny.config
    for i in range(1, 5):
        V = Tensor(Rng(i).normal((2, cfg.tokens(i), cfg.channels[i - 1])))
        L = Tensor(Rng(10 + i).normal((2, cfg.text_len, cfg.prompt_dim)))
        out = tiny.fuse_stage(V, L, i)
        assert out.shape == V.shape
        assert np.array_equal(out.data, V.data)


def test_zero_gates_match_fusion_free_baseline(tiny):
    images, ids = inputs(tiny.config)
    variants = [ICIPNet(tiny.config.replace(use_icip=a, use_bif=b), tiny.params)
                for a in (False, True) for b in (False, True)]
    logits = [v(images, ids).data for v in variants]
    assert all(np.array_equal(logits[0], x) for x in logits[1:])


def test_decoder_zero_weights_predict_background(tiny):
    model = ICIPNet(tiny.config, dict(tiny.params))
    for name in list(model.params):
        if name.startswith("decoder."):
            model.params[name] = Tensor(np.zeros(model[name].shape))
    images, ids = inputs(model.config)
    logits = model(images, ids).data
    assert logits.shape == (2, 16, 16, 2) and np.all(logits == 0)
    assert np.all(model.predict(images, ids) == 0)


def test_forward_shape_determinism_and_batch_independence(tiny):
    images, ids = inputs(tiny.config, B=3)
    a = tiny(images, ids).data
    assert a.shape == (3, 16, 16, 2)
    assert a.tobytes() == tiny(images, ids).data.tobytes()
    doubled = tiny(np.concatenate([images[:1], images[:1]]), np.concatenate([ids[:1], ids[:1]])).data
    assert np.array_equal(doubled[0], doubled[1])
    alone = tiny(images[1:2], ids[1:2]).data[0]
    np.testing.assert_allclose(alone, a[1], rtol=1e-12, atol=1e-14)


def test_forward_rejects_mismatched_batch(tiny):
    images, ids = inputs(tiny.config, B=2)
    with pytest.raises(ShapeError):
        tiny(images, ids[:1])
    with pytest.raises(ShapeError):
        tiny(images[:, :8], ids)


@pytest.mark.parametrize("part", ["embed_text", "encode_stage", "fuse_stage", "decode"])
def test_stage_gradchecks(part):
    from icipnet.checks import run_checks
    (result,) = run_checks(only={part})
    assert result.error < 1e-4


def test_full_model_gradcheck_on_a_few_entries():
    from icipnet.training import LossConfig, total_loss
    model = probe_model()
    images, ids = inputs(model.config)
    target = (Rng(3).uniform((2, 16, 16)) > 0.6).astype(np.uint8)
    params = [model["decoder.head.w"], model["bif.stage3.lambda.q2"], model["icip.stage1.T"],
              model["gate.stage2.w"], model["text.embed"]]
    err = gradcheck(lambda: total_loss(model(images, ids), target, LossConfig()), params, max_entries=3,
                    rng=Rng(4))
    assert err < 1e-4


# -- checkpoints ---------------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path, tiny):
    model = probe_model()
    save_checkpoint(model, tmp_path / "ck")
    manifest = (tmp_path / "ck" / "manifest.txt").read_text().splitlines()
    assert manifest[0].split("\t") == ["embed.patch.w", "12x4"]
    back = load_checkpoint(tmp_path / "ck")
    assert back.config == model.config
    images, ids = inputs(model.config)
    assert back(images, ids).data.tobytes() == model(images, ids).data.tobytes()


def test_checkpoint_detects_tampering(tmp_path):
    model = ICIPNet(tiny_config())
    save_checkpoint(model, tmp_path / "ck")
    (tmp_path / "ck" / "decoder.head.b.icit").unlink()
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "ck")
    save_checkpoint(model, tmp_path / "ck2")
    lines = (tmp_path / "ck2" / "manifest.txt").read_text().splitlines()
    (tmp_path / "ck2" / "manifest.txt").write_text("\n".join(lines[1:]) + "\n")
    with pytest.raises(ShapeError, match="lacks"):
        load_checkpoint(tmp_path / "ck2")


@settings(max_examples=10, deadline=None)
@given(st.sampled_from([1, 2]), st.integers(1, 3))
def test_logits_shape_for_valid_configs(patch, B):
    cfg = tiny_config(patch_size=patch, image_size=8 * patch * 2)
    model = ICIPNet(cfg)
    images, ids = inputs(cfg, B=B)
    assert model(images, ids).shape == (B, cfg.image_size, cfg.image_size, 2)
