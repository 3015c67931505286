"""Entropy-based objectives for multi-level, multi-prompt adaptation.

All functions are pure and differentiable (torch). Shapes follow the
convention ``(..., tokens, dim)``: leading batch axes are flattened when an
entropy averages "over the batch".
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .backbone import LayerTokens, TextBank

LOGIT_SCALE = 100.0
DEFAULT_TAU = 1.0 / LOGIT_SCALE

ProjectFn = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class ProbabilityMap:
    probs: torch.Tensor  # (..., K), rows sum to 1
    tau: float

    @property
    def num_classes(self) -> int:
        return self.probs.shape[-1]


@dataclass(frozen=True)
class FusionWeights:
    entropies: torch.Tensor
    alpha: torch.Tensor
    beta: float


@dataclass
class GradientProbeReport:
    gradients: np.ndarray  # (T, P) or (R, T, P)
    ensemble_mean: np.ndarray  # (P,)
    ensemble_variance: np.ndarray  # (P,) measured Var of the template-averaged gradient
    template_variance: np.ndarray  # (T, P) per-template variance
    sigma2: np.ndarray  # (P,) max over templates of template_variance
    bound: np.ndarray  # (P,) sigma2 / T
    predicted_variance: np.ndarray  # (P,) (1/T^2) * sum_t Var(g_t)

    @property
    def num_templates(self) -> int:
        return self.template_variance.shape[0]


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _check_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = torch.linalg.vector_norm(x, dim=-1)
    zero = (norms == 0).nonzero()
    if zero.numel():
        raise ValueError(f"{what} row {tuple(zero[0].tolist())} has zero norm")
    return norms


def similarity_logits(features, text, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Cosine similarity of every feature row to every text row, divided by ``tau``."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    f = _as_tensor(features)
    t = _as_tensor(text).to(f.dtype)
    fn = f / _check_rows(f, "feature").unsqueeze(-1)
    tn = t / _check_rows(t, "text").unsqueeze(-1)
    return fn @ tn.transpose(-2, -1) / tau


def probability_map(features, text, tau: float = DEFAULT_TAU) -> ProbabilityMap:
    """softmax_k(cos(f_i, t_k) / tau) for every feature row."""
    logits = similarity_logits(features, text, tau)
    return ProbabilityMap(torch.softmax(logits, dim=-1), float(tau))


def batch_entropy(p) -> torch.Tensor:
    """Mean Shannon entropy (nats) over all rows; ``0 log 0 = 0``."""
    probs = p.probs if isinstance(p, ProbabilityMap) else _as_tensor(p)
    rows = probs.reshape(-1, probs.shape[-1])
    return -torch.special.xlogy(rows, rows).sum(dim=-1).mean()


def _entropy_of_logits(logits: torch.Tensor) -> torch.Tensor:
    # Same quantity as batch_entropy(softmax(logits)), stable in the log domain.
    logp = torch.log_softmax(logits, dim=-1)
    ent = -(logp.exp() * logp).sum(dim=-1)
    return ent.reshape(-1).mean()


def layer_entropy(q_layer, project: ProjectFn, text, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Batch entropy of one layer's spatial tokens seen through the shared head.

    ``q_layer`` holds spatial rows only, shape ``(..., N, D')``.
    """
    return batch_entropy(probability_map(project(_as_tensor(q_layer)), text, tau))


def confidence_weights(h, beta: float) -> FusionWeights:
    """alpha_l = softmax(-beta * h_l)."""
    h = _as_tensor(h)
    if h.numel() == 0:
        raise ValueError("need at least one layer entropy")
    if beta < 0:
        raise ValueError(f"sharpness beta must be >= 0, got {beta}")
    if not torch.isfinite(h).all():
        raise ValueError("layer entropies must be finite")
    z = -beta * h
    z = z - z.max()
    w = torch.exp(z)
    return FusionWeights(h, w / w.sum(), float(beta))


def fuse_layers(layers, alpha, project: Optional[ProjectFn] = None) -> torch.Tensor:
    """Weighted sum of layer tokens over the layer axis, then optionally projected.

    ``layers`` is ``(L, ..., D')`` or a :class:`LayerTokens` (layer axis 1,
    spatial rows only). Projection is applied after averaging.
    """
    if isinstance(layers, LayerTokens):
        q = layers.spatial.movedim(1, 0)
    else:
        q = _as_tensor(layers)
    a = alpha.alpha if isinstance(alpha, FusionWeights) else _as_tensor(alpha)
    a = a.to(q.dtype)
    if a.ndim != 1 or a.shape[0] != q.shape[0]:
        raise ValueError(f"{a.shape[0] if a.ndim else 0} weights for {q.shape[0]} layers")
    q_bar = torch.tensordot(a, q, dims=([0], [0]))
    return project(q_bar) if project is not None else q_bar


def layer_entropies(layers: LayerTokens, project: ProjectFn, text, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """h^l for every layer of ``layers`` (spatial rows, entropy over the whole batch)."""
    sp = layers.spatial
    return torch.stack([layer_entropy(sp[:, i], project, text, tau) for i in range(layers.depth)])


def fusion_weights(
    layers: LayerTokens, project: ProjectFn, text, tau: float = DEFAULT_TAU, beta: float = 0.0
) -> FusionWeights:
    """Confidence weights for ``layers``; entropies are treated as constants.

    At beta = 0 the weights are uniform and no entropy pass is needed.
    """
    if beta == 0:
        h = torch.zeros(layers.depth, dtype=layers.tokens.dtype)
        return confidence_weights(h, 0.0)
    with torch.no_grad():
        h = layer_entropies(layers, project, text, tau)
    return confidence_weights(h, beta)


def uaml_loss(
    layers: LayerTokens, project: ProjectFn, text, tau: float = DEFAULT_TAU, beta: float = 0.0
) -> torch.Tensor:
    """Spatial entropy of the uncertainty-weighted multi-level fused features."""
    text = _as_tensor(text)
    weights = fusion_weights(layers, project, text, tau, beta)
    f_bar = fuse_layers(layers, weights, project)
    return _entropy_of_logits(similarity_logits(f_bar, text, tau))


def ile_loss(cls_features, text, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Mean entropy of the per-image CLS class distribution, ``(B, D)`` input."""
    return _entropy_of_logits(similarity_logits(_as_tensor(cls_features), text, tau))


def final_loss(
    layers: LayerTokens,
    cls_features,
    text_bank,
    project: ProjectFn,
    tau: float = DEFAULT_TAU,
    beta: float = 0.0,
    use_ile: bool = True,
) -> torch.Tensor:
    """Mean over templates of (UAML + ILE).

    ``text_bank`` is a :class:`TextBank` or a ``(T, K, D)`` tensor.
    """
    texts = _template_stack(text_bank, layers.tokens.dtype)
    total = 0.0
    for t in range(texts.shape[0]):
        term = uaml_loss(layers, project, texts[t], tau, beta)
        if use_ile:
            term = term + ile_loss(cls_features, texts[t], tau)
        total = total + term
    return total / texts.shape[0]


def _template_stack(text_bank, dtype) -> torch.Tensor:
    if isinstance(text_bank, TextBank):
        return text_bank.stacked(dtype)
    t = _as_tensor(text_bank).to(dtype)
    if t.ndim == 2:
        t = t.unsqueeze(0)
    if t.ndim != 3 or t.shape[0] < 1:
        raise ValueError(f"expected (T, K, D) text features, got {tuple(t.shape)}")
    return t


def gradient_variance_probe(
    gradients: Sequence, n_resamples: int = 1000, seed: int = 0
) -> GradientProbeReport:
    """Empirical check of the 1/T variance reduction of template-averaged gradients.

    ``gradients`` is either ``(T, P)`` -- one gradient per template -- or
    ``(R, T, P)`` -- R independent realisations of the T template gradients.

    * ``(R, T, P)``: the ensemble gradient of each realisation is the mean over
      T; its variance is measured across the R realisations.
    * ``(T, P)``: templates are treated as draws from a pool; the ensemble
      variance is measured by bootstrap resampling T templates with
      replacement ``n_resamples`` times using ``seed``.

    In both cases ``sigma2`` is the largest per-template variance and
    ``bound = sigma2 / T``.
    """
    g = np.asarray(gradients, dtype=np.float64)
    if g.dtype == object or g.ndim not in (2, 3):
        raise ValueError("gradients must be equal-length vectors: (T, P) or (R, T, P)")
    if g.shape[-2] < 1:
        raise ValueError("need at least one template gradient")

    if g.ndim == 3:
        n_templates = g.shape[1]
        ensemble = g.mean(axis=1)  # R, P
        mean = ensemble.mean(axis=0)
        ens_var = ensemble.var(axis=0, ddof=1) if g.shape[0] > 1 else np.zeros(g.shape[-1])
        tmpl_var = g.var(axis=0, ddof=1) if g.shape[0] > 1 else np.zeros(g.shape[1:])
    else:
        n_templates = g.shape[0]
        mean = g.mean(axis=0)
        tmpl_var = np.broadcast_to(g.var(axis=0), g.shape).copy()
        rng = np.random.default_rng(seed)
        picks = rng.integers(0, n_templates, size=(n_resamples, n_templates))
        boot = g[picks].mean(axis=1)
        ens_var = boot.var(axis=0, ddof=1) if n_resamples > 1 else np.zeros(g.shape[-1])

    sigma2 = tmpl_var.max(axis=0)
    return GradientProbeReport(
        gradients=g,
        ensemble_mean=mean,
        ensemble_variance=ens_var,
        template_variance=tmpl_var,
        sigma2=sigma2,
        bound=sigma2 / n_templates,
        predicted_variance=tmpl_var.sum(axis=0) / n_templates**2,
    )
