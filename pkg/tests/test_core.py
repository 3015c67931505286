import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import as_t, random_simplex
from mlmp import core
from mlmp.backbone import LayerTokens, TextBank


def loop_entropy(p):
    total = 0.0
    for row in p:
        s = 0.0
        for v in row:
            if v > 0:
                s -= v * math.log(v)
        total += s
    return total / len(p)


def brute_probs(f, t, tau):
    out = np.zeros((len(f), len(t)))
    for i, fi in enumerate(f):
        cos = [float(fi @ tk) / (np.linalg.norm(fi) * np.linalg.norm(tk)) for tk in t]
        m = max(cos)
        e = [math.exp((c - m) / tau) for c in cos]
        out[i] = [v / sum(e) for v in e]
    return out


# -- entropy ---------------------------------------------------------------


def test_batch_entropy_matches_loop():
    rng = np.random.default_rng(0)
    for _ in range(50):
        b, n, k = rng.integers(1, 4), rng.integers(1, 17), rng.integers(2, 9)
        p = random_simplex(rng, b * n, k)
        got = core.batch_entropy(as_t(p.reshape(b, n, k))).item()
        assert abs(got - loop_entropy(p)) < 1e-12


@pytest.mark.parametrize("k", [1, 2, 3, 8, 171])
def test_uniform_rows_give_log_k(k):
    p = torch.full((5, k), 1.0 / k, dtype=torch.float64)
    assert abs(core.batch_entropy(p).item() - math.log(k)) < 1e-12


def test_one_hot_rows_have_zero_entropy():
    p = torch.eye(4, dtype=torch.float64)
    assert core.batch_entropy(p).item() == 0.0


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (6, 5), elements=st.floats(-30, 30)))
def test_entropy_bounded_by_log_k(logits):
    p = torch.softmax(as_t(logits), dim=-1)
    h = core.batch_entropy(p).item()
    assert -1e-12 <= h <= math.log(5) + 1e-12


# -- probabilities -------------------------------------------------------------


def test_probability_map_matches_brute_force():
    rng = np.random.default_rng(1)
    f, t = rng.normal(size=(20, 8)), rng.normal(size=(4, 8))
    got = core.probability_map(as_t(f), as_t(t), 0.01).probs.numpy()
    assert np.max(np.abs(got - brute_probs(f, t, 0.01))) < 1e-10


def test_probability_map_invariant_to_row_scaling():
    rng = np.random.default_rng(2)
    f, t = rng.normal(size=(6, 8)), rng.normal(size=(3, 8))
    a = core.probability_map(as_t(f), as_t(t)).probs
    b = core.probability_map(as_t(f * 7.5), as_t(t * 0.2)).probs
    assert torch.allclose(a, b, atol=1e-12)


def test_probability_rows_sum_to_one():
    rng = np.random.default_rng(3)
    p = core.probability_map(as_t(rng.normal(size=(2, 9, 8))), as_t(rng.normal(size=(5, 8)))).probs
    assert p.shape == (2, 9, 5)
    assert torch.allclose(p.sum(-1), torch.ones(2, 9, dtype=torch.float64), atol=1e-12)


def test_zero_feature_row_is_rejected_with_its_index():
    f = torch.ones(3, 4, dtype=torch.float64)
    f[1] = 0
    with pytest.raises(ValueError, match=r"row \(1,\)"):
        core.probability_map(f, torch.ones(2, 4, dtype=torch.float64))


@pytest.mark.parametrize("tau", [0.0, -0.1])
def test_nonpositive_temperature_is_rejected(tau):
    with pytest.raises(ValueError, match="temperature"):
        core.probability_map(torch.ones(1, 2), torch.ones(1, 2), tau)


# -- confidence weights and fusion ---------------------------------------------


def test_weights_sum_to_one_and_order_by_entropy():
    rng = np.random.default_rng(4)
    for _ in range(200):
        h = rng.uniform(0, 3, size=rng.integers(1, 20))
        a = core.confidence_weights(h, 1.0).alpha.numpy()
        assert abs(a.sum() - 1) < 1e-12
        order = np.argsort(h)
        assert np.all(np.diff(a[order]) < 0) or len(set(h)) < len(h)


def test_beta_zero_is_uniform():
    a = core.confidence_weights(np.array([0.1, 2.0, 0.5]), 0.0).alpha.numpy()
    np.testing.assert_allclose(a, 1 / 3, atol=1e-12)


def test_weights_match_explicit_softmax():
    h = np.array([0.3, 1.1, 0.7, 2.4])
    expected = np.exp(-2.0 * h) / np.exp(-2.0 * h).sum()
    np.testing.assert_allclose(core.confidence_weights(h, 2.0).alpha.numpy(), expected, atol=1e-15)


def test_large_entropy_scale_stays_finite():
    a = core.confidence_weights(np.array([1e4, 1e4 + 1, 2e4]), 50.0).alpha
    assert torch.isfinite(a).all() and abs(a.sum().item() - 1) < 1e-12


@pytest.mark.parametrize("h,beta,msg", [([], 1.0, "at least one"), ([1.0], -1.0, "beta"),
                                        ([np.nan], 1.0, "finite")])
def test_weight_errors(h, beta, msg):
    with pytest.raises(ValueError, match=msg):
        core.confidence_weights(np.array(h, dtype=float), beta)


def test_fuse_layers_matches_explicit_sum():
    rng = np.random.default_rng(5)
    q = rng.normal(size=(3, 2, 4, 6))
    a = np.array([0.2, 0.5, 0.3])
    expected = sum(a[i] * q[i] for i in range(3))
    np.testing.assert_allclose(core.fuse_layers(as_t(q), as_t(a)).numpy(), expected, atol=1e-14)


def test_fuse_layers_single_layer_is_identity():
    q = as_t(np.random.default_rng(6).normal(size=(1, 2, 4, 6)))
    assert torch.equal(core.fuse_layers(q, torch.ones(1, dtype=torch.float64)), q[0])


def test_fuse_layers_length_mismatch():
    with pytest.raises(ValueError, match="2 weights for 3 layers"):
        core.fuse_layers(torch.zeros(3, 1, 2), torch.ones(2) / 2)


def test_fuse_projects_after_averaging():
    rng = np.random.default_rng(7)
    tokens = LayerTokens(as_t(rng.normal(size=(2, 3, 5, 4))))
    w = as_t(rng.normal(size=(4, 3)))
    project = lambda x: torch.tanh(x @ w)  # nonlinear: order matters
    alpha = as_t([0.1, 0.6, 0.3])
    q_bar = sum(alpha[i] * tokens.spatial[:, i] for i in range(3))
    torch.testing.assert_close(core.fuse_layers(tokens, alpha, project), project(q_bar))


# -- losses ----------------------------------------------------------------


def _layers_and_text(seed=8, t=7):
    rng = np.random.default_rng(seed)
    tokens = LayerTokens(as_t(rng.normal(size=(2, 4, 10, 6))))
    w = as_t(rng.normal(size=(6, 5)))
    text = rng.normal(size=(t, 3, 5))
    cls = as_t(rng.normal(size=(2, 5)))
    return tokens, (lambda x: x @ w), text, cls


def test_uaml_is_entropy_of_fused_projection():
    tokens, project, text, _ = _layers_and_text()
    f_bar = project(tokens.spatial.mean(dim=1))
    p = brute_probs(f_bar.reshape(-1, 5).numpy(), text[0], 0.01)
    assert abs(core.uaml_loss(tokens, project, as_t(text[0])).item() - loop_entropy(p)) < 1e-10


def test_ile_is_mean_cls_entropy():
    _, _, text, cls = _layers_and_text()
    p = brute_probs(cls.numpy(), text[2], 0.01)
    assert abs(core.ile_loss(cls, as_t(text[2])).item() - loop_entropy(p)) < 1e-10


def test_final_loss_is_template_mean():
    tokens, project, text, cls = _layers_and_text()
    singles = [core.final_loss(tokens, cls, as_t(text[t:t + 1]), project).item() for t in range(7)]
    total = core.final_loss(tokens, cls, as_t(text), project).item()
    assert abs(total - np.mean(singles)) < 1e-12


def test_duplicated_template_equals_single():
    tokens, project, text, cls = _layers_and_text()
    one = core.final_loss(tokens, cls, as_t(text[:1]), project)
    two = core.final_loss(tokens, cls, as_t(np.concatenate([text[:1], text[:1]])), project)
    assert one.item() == two.item()


def test_final_loss_accepts_text_bank():
    tokens, project, text, cls = _layers_and_text()
    bank = TextBank(text, [f"t{i} {{class}}" for i in range(7)], ["a", "b", "c"])
    a = core.final_loss(tokens, cls, bank, project)
    b = core.final_loss(tokens, cls, as_t(text), project)
    assert a.item() == b.item()


def test_without_ile_only_uaml_remains():
    tokens, project, text, cls = _layers_and_text()
    got = core.final_loss(tokens, cls, as_t(text[:2]), project, use_ile=False).item()
    expected = np.mean([core.uaml_loss(tokens, project, as_t(text[t])).item() for t in range(2)])
    assert abs(got - expected) < 1e-12


def test_entropy_weights_are_not_differentiated():
    tokens, project, text, _ = _layers_and_text()
    q = tokens.tokens.clone().requires_grad_(True)
    layers = LayerTokens(q)
    core.uaml_loss(layers, project, as_t(text[0]), beta=1.0).backward()
    g_live = q.grad.clone()

    alpha = core.fusion_weights(LayerTokens(q.detach()), project, as_t(text[0]), beta=1.0).alpha
    q2 = tokens.tokens.clone().requires_grad_(True)
    f_bar = core.fuse_layers(LayerTokens(q2), alpha, project)
    core.batch_entropy(core.probability_map(f_bar, as_t(text[0]))).backward()
    torch.testing.assert_close(g_live, q2.grad)


def test_final_loss_rejects_bad_text_shape():
    tokens, project, _, cls = _layers_and_text()
    with pytest.raises(ValueError, match=r"\(T, K, D\)"):
        core.final_loss(tokens, cls, torch.zeros(2, 2, 2, 5), project)


# -- gradient variance probe -----------------------------------------------------


@pytest.mark.parametrize("t", [1, 3, 7])
def test_probe_variance_shrinks_with_template_count(t):
    rng = np.random.default_rng(t)
    g = rng.normal(size=(1000, t, 8))
    rep = core.gradient_variance_probe(g)
    assert np.all((rep.ensemble_variance > 0.8 / t) & (rep.ensemble_variance < 1.2 / t))
    assert np.all(rep.predicted_variance <= rep.bound + 1e-15)


def test_probe_identical_templates_have_no_reduction():
    base = np.random.default_rng(0).normal(size=(500, 1, 4))
    rep = core.gradient_variance_probe(np.repeat(base, 5, axis=1))
    np.testing.assert_allclose(rep.ensemble_variance, rep.sigma2, rtol=1e-12)


def test_probe_bootstrap_on_single_draw():
    g = np.random.default_rng(1).normal(size=(7, 3))
    rep = core.gradient_variance_probe(g, n_resamples=4000, seed=0)
    np.testing.assert_allclose(rep.ensemble_mean, g.mean(axis=0))
    np.testing.assert_allclose(rep.ensemble_variance, g.var(axis=0) / 7, rtol=0.15)


def test_probe_rejects_ragged_input():
    with pytest.raises(ValueError):
        core.gradient_variance_probe([[1.0, 2.0], [3.0]])
