import numpy as np
import pytest
import torch

from mlmp.backbone import TEMPLATES, BackboneSpec, encode_texts, make_toy_backbone
from mlmp.datasets import registry, resize_image, resize_label, toy_samples

SMALL_SPEC = BackboneSpec(depth=4, token_dim=16, embed_dim=8, patch_size=8, input_side=32)


@pytest.fixture(autouse=True)
def _isolate_cache(monkeypatch):
    monkeypatch.delenv("MLMP_CACHE_DIR", raising=False)


@pytest.fixture
def toy_model():
    return make_toy_backbone(SMALL_SPEC, seed=0)


@pytest.fixture
def toy_bank(toy_model):
    return encode_texts(toy_model, registry("toy").classes, TEMPLATES, cache_dir="")


@pytest.fixture
def toy_images():
    samples = toy_samples(4, seed=3)
    images = np.stack([resize_image(s.image, SMALL_SPEC.input_side) for s in samples])
    labels = np.stack([resize_label(s.label, SMALL_SPEC.input_side) for s in samples])
    return images, labels


def random_simplex(rng, rows, k):
    logits = rng.normal(size=(rows, k)) * rng.uniform(0.1, 5.0)
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


def as_t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
