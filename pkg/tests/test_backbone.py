import numpy as np
import pytest
import torch

from conftest import SMALL_SPEC
from mlmp import core
from mlmp.adaptation import AdaptConfig, adapt_batch, predict
from mlmp.backbone import (
    TEMPLATES,
    TOY_MAGIC,
    BackboneSpec,
    TextBank,
    adaptable_params,
    encode_texts,
    load_toy,
    make_toy_backbone,
    norm_parameter_count,
    parameter_checksum,
    patch_majority,
    save_toy,
    text_call_count,
)
from mlmp.datasets import registry


def test_seeded_construction_is_deterministic():
    a, b = make_toy_backbone(SMALL_SPEC, 0), make_toy_backbone(SMALL_SPEC, 0)
    assert parameter_checksum(a) == parameter_checksum(b)
    assert parameter_checksum(a) != parameter_checksum(make_toy_backbone(SMALL_SPEC, 1))


def test_layer_token_shapes(toy_model, toy_images):
    tokens = toy_model.encode_image(toy_model.preprocess(toy_images[0][:2]))
    assert tokens.tokens.shape == (2, 4, 17, 16)
    assert tokens.spatial.shape == (2, 4, 16, 16)
    for layer in range(1, 5):
        assert toy_model.project(tokens.layer(layer)).shape == (2, 17, 8)


def test_wrong_image_size_names_expected_size(toy_model):
    with pytest.raises(ValueError, match="32x32"):
        toy_model.encode_image(torch.zeros(1, 3, 40, 40, dtype=torch.float64))


def test_project_rejects_wrong_width(toy_model):
    with pytest.raises(ValueError, match="token_dim"):
        toy_model.project(torch.zeros(3, 5, dtype=torch.float64))


@pytest.mark.parametrize("field", ["depth", "token_dim", "patch_size"])
def test_spec_validation(field):
    with pytest.raises(ValueError, match=field):
        BackboneSpec(**{field: 0})


def test_layer_two_is_composition_of_public_blocks(toy_model, toy_images):
    x = toy_model.preprocess(toy_images[0][:1])
    v = toy_model.visual
    patches = v.patch_embed(x).flatten(2).transpose(1, 2)
    h = v.ln_pre(torch.cat([v.cls_token.expand(1, 1, -1), patches], dim=1) + v.pos_embed)
    manual = v.blocks[1](v.blocks[0](h))
    assert torch.equal(toy_model.encode_image(x).layer(2), manual)


def test_projection_head_is_shared_across_layers(toy_model, toy_images):
    tokens = toy_model.encode_image(toy_model.preprocess(toy_images[0][:1]))
    before = [toy_model.project(tokens.layer(i)) for i in range(1, 5)]
    with torch.no_grad():
        toy_model.visual.proj.weight.mul_(2.0)
    after = [toy_model.project(tokens.layer(i)) for i in range(1, 5)]
    for b, a in zip(before, after):
        torch.testing.assert_close(a, 2.0 * b)


def test_norm_parameter_counts(toy_model):
    params = adaptable_params(toy_model)
    # ln_pre + 2 per block + ln_post, each with scale and shift of width D'
    assert params.numel() == (1 + 2 * 4 + 1) * 2 * 16 == norm_parameter_count(SMALL_SPEC)
    assert all("ln" in n for n in params.names)
    vit_l = BackboneSpec(depth=24, token_dim=1024, embed_dim=768, patch_size=14, input_side=224)
    assert norm_parameter_count(vit_l) == 102_400


def test_adaptable_params_exclude_everything_else(toy_model):
    selected = {id(p) for p in adaptable_params(toy_model).parameters()}
    others = [n for n, p in toy_model.named_parameters() if id(p) not in selected]
    assert "visual.proj.weight" in others and "visual.patch_embed.weight" in others
    assert not any(".ln" in n for n in others)


def test_no_norm_layers_is_an_error():
    with pytest.raises(ValueError, match="no normalization"):
        adaptable_params(torch.nn.Linear(2, 2))


def test_snapshot_restore_round_trips_under_optimizer_steps(toy_model, toy_bank, toy_images):
    params = adaptable_params(toy_model)
    snap = params.snapshot()
    checksum = params.checksum()
    opt = torch.optim.Adam(params.parameters(), lr=1e-2)
    x = toy_model.preprocess(toy_images[0][:2])
    for i in range(3):
        for _ in range(i + 1):
            opt.zero_grad()
            tokens = toy_model.encode_image(x)
            core.final_loss(tokens, toy_model.project(tokens.cls[:, -1]), toy_bank, toy_model.project).backward()
            opt.step()
        assert params.checksum() != checksum
        params.restore(snap)
        assert params.checksum() == checksum


def test_restore_rejects_foreign_snapshot(toy_model):
    with pytest.raises(KeyError):
        adaptable_params(toy_model).restore({"nope": torch.zeros(1)})


def test_toy_serialization_round_trip(tmp_path, toy_model, toy_images):
    path = tmp_path / "toy.bin"
    save_toy(toy_model, path)
    raw = path.read_bytes()
    assert raw[:8] == TOY_MAGIC
    n_values = sum(p.numel() for p in toy_model.state_dict().values())
    assert len(raw) == 32 + 8 * n_values
    loaded = load_toy(path)
    assert parameter_checksum(loaded) == parameter_checksum(toy_model)
    x = toy_model.preprocess(toy_images[0][:1])
    assert torch.equal(loaded.encode_image(x).tokens, toy_model.encode_image(x).tokens)


def test_load_rejects_bad_magic(tmp_path, toy_model):
    path = tmp_path / "toy.bin"
    save_toy(toy_model, path)
    path.write_bytes(b"NOTATOY!" + path.read_bytes()[8:])
    with pytest.raises(ValueError, match="magic"):
        load_toy(path)


def test_load_rejects_truncated_payload(tmp_path, toy_model):
    path = tmp_path / "toy.bin"
    save_toy(toy_model, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError, match="expected"):
        load_toy(path)


# -- text bank -------------------------------------------------------------------


def test_bank_has_one_vector_per_template_and_class(toy_model):
    bank = encode_texts(toy_model, registry("v20").classes, TEMPLATES, cache_dir="")
    assert bank.embeddings.shape == (7, 20, 8)
    assert len(bank) == 140
    assert not bank.embeddings.flags.writeable


def test_bank_is_deterministic(toy_model):
    a = encode_texts(toy_model, ["cat", "dog"], cache_dir="")
    b = encode_texts(make_toy_backbone(SMALL_SPEC, 0), ["cat", "dog"], cache_dir="")
    assert np.array_equal(a.embeddings, b.embeddings)


def test_bank_rows_follow_template_then_class_order(toy_model):
    bank = encode_texts(toy_model, ["Cat", "dog"], ["a {class}", "art of the {class}."], cache_dir="")
    direct = toy_model.encode_text(["art of the cat."]).numpy()[0]
    np.testing.assert_array_equal(bank.embeddings[1, 0], direct)


@pytest.mark.parametrize("classes,msg", [([], "empty"), (["a", "a"], "duplicate")])
def test_bank_input_errors(toy_model, classes, msg):
    with pytest.raises(ValueError, match=msg):
        encode_texts(toy_model, classes, cache_dir="")


def test_bank_rejects_zero_vectors():
    with pytest.raises(ValueError):
        TextBank(np.zeros((1, 2, 3)), ["{class}"], ["a", "b"])


def test_bank_cache_skips_reencoding(tmp_path, toy_model, monkeypatch):
    monkeypatch.setenv("MLMP_CACHE_DIR", str(tmp_path))
    first = encode_texts(toy_model, ["cat", "dog"])
    calls = text_call_count(toy_model)
    second = encode_texts(toy_model, ["cat", "dog"])
    assert text_call_count(toy_model) == calls
    assert np.array_equal(first.embeddings, second.embeddings)
    assert list(tmp_path.glob("textbank-*.npy"))


def test_adapt_and_predict_never_encode_text(toy_model, toy_bank, toy_images):
    calls = text_call_count(toy_model)
    adapt_batch(toy_model, toy_images[0][:2], toy_bank, AdaptConfig(steps=2))
    predict(toy_model, toy_images[0][:2], toy_bank)
    assert text_call_count(toy_model) == calls


# -- differentiability -----------------------------------------------------------


def test_jvp_matches_finite_differences(toy_model, toy_images):
    params = adaptable_params(toy_model).parameters()
    x = toy_model.preprocess(toy_images[0][:2])
    w = torch.randn(2, 4, 17, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64)

    def scalar():
        tokens = toy_model.encode_image(x).tokens
        return (toy_model.project(tokens) * w).sum()

    grads = torch.autograd.grad(scalar(), params)
    gen = torch.Generator().manual_seed(1)
    eps = 1e-6
    for _ in range(20):
        direction = [torch.randn(p.shape, generator=gen, dtype=torch.float64) for p in params]
        analytic = sum((g * d).sum() for g, d in zip(grads, direction)).item()
        with torch.no_grad():
            for p, d in zip(params, direction):
                p.add_(eps * d)
            plus = scalar().item()
            for p, d in zip(params, direction):
                p.sub_(2 * eps * d)
            minus = scalar().item()
            for p, d in zip(params, direction):
                p.add_(eps * d)
        numeric = (plus - minus) / (2 * eps)
        assert abs(numeric - analytic) <= 1e-4 * max(abs(analytic), 1e-8)


def test_patch_majority_votes_and_ignores():
    labels = np.full((4, 4), 255, dtype=np.uint8)
    labels[:2, :2] = [[1, 1], [2, 255]]
    labels[2:, 2:] = 0
    out = patch_majority(labels, grid=2)
    assert out.tolist() == [[1, -1, -1, 0]]
