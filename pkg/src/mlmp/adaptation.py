"""Test-time adaptation loop, adapted prediction and sliding-window inference."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import core
from .backbone import AdaptableParams, TextBank, adaptable_params
from .datasets import resize_image

log = logging.getLogger(__name__)


def default_layer_range(depth: int) -> Tuple[int, int]:
    """Inclusive 1-based block interval covering the last 75% of blocks."""
    start = min(math.ceil(depth / 4) + 1, depth)
    return start, depth


@dataclass(frozen=True)
class AdaptConfig:
    steps: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 2
    layer_range: Optional[Tuple[int, int]] = None  # None -> last 75% of blocks
    templates: Optional[Tuple[int, ...]] = None  # 0-based ids into the bank; None -> all
    tau: float = core.DEFAULT_TAU
    beta_adapt: float = 0.0
    beta_eval: float = 1.0
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    reset_per_batch: bool = True
    use_ile: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.templates is not None and len(self.templates) == 0:
            raise ValueError("templates must be nonempty")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.layer_range is not None:
            lo, hi = self.layer_range
            if lo < 1 or hi < lo:
                raise ValueError(f"bad layer_range {self.layer_range}")

    def layers(self, depth: int) -> List[int]:
        lo, hi = self.layer_range if self.layer_range is not None else default_layer_range(depth)
        if hi > depth:
            raise ValueError(f"layer_range {lo}..{hi} exceeds backbone depth {depth}")
        return list(range(lo, hi + 1))

    def bank(self, text_bank: TextBank) -> TextBank:
        return text_bank if self.templates is None else text_bank.subset(self.templates)


@dataclass
class AdaptResult:
    losses: List[float]
    flagged: bool = False
    seconds: float = 0.0

    @property
    def improved(self) -> bool:
        return len(self.losses) > 1 and self.losses[-1] < self.losses[0]


@dataclass
class Prediction:
    labels: np.ndarray  # (B, H, W) int64
    scores: np.ndarray  # (B, K, H, W) averaged class probabilities
    alpha: np.ndarray  # (L_sel,) evaluation-time confidence weights
    entropies: np.ndarray  # (L_sel,) per-layer entropies behind alpha
    layers: List[int] = field(default_factory=list)


def to_batch(model, images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images if images.ndim == 4 else images.unsqueeze(0)
    return model.preprocess(images)


def _objective(model, x, texts: torch.Tensor, layers: List[int], cfg: AdaptConfig) -> torch.Tensor:
    tokens = model.encode_image(x)
    cls = model.project(tokens.cls[:, -1])
    return core.final_loss(
        tokens.select(layers), cls, texts, model.project, cfg.tau, cfg.beta_adapt, use_ile=cfg.use_ile
    )


def _run(model, x, texts, layers, cfg: AdaptConfig, params: AdaptableParams, pristine) -> AdaptResult:
    start = time.perf_counter()
    if cfg.reset_per_batch:
        params.restore(pristine)
    frozen = [(p, p.requires_grad) for p in model.parameters()]
    for p, _ in frozen:
        p.requires_grad_(False)
    for p in params.parameters():
        p.requires_grad_(True)
    torch.manual_seed(cfg.seed)

    opt = torch.optim.Adam(
        params.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas, eps=cfg.adam_eps
    )
    losses: List[float] = []
    flagged = False
    try:
        for _ in range(cfg.steps):
            opt.zero_grad(set_to_none=True)
            loss = _objective(model, x, texts, layers, cfg)
            losses.append(float(loss.detach()))
            if not torch.isfinite(loss):
                flagged = True
                break
            loss.backward()
            opt.step()
        if not flagged:
            with torch.no_grad():
                final = float(_objective(model, x, texts, layers, cfg))
            losses.append(final)
            flagged = not math.isfinite(final)
    finally:
        for p, flag in frozen:
            p.requires_grad_(flag)
    if flagged:
        log.warning("non-finite adaptation loss; batch restored to its pre-adaptation state")
        params.restore(pristine)
    return AdaptResult(losses, flagged, time.perf_counter() - start)


def adapt_batch(
    model,
    images,
    text_bank: TextBank,
    config: AdaptConfig = AdaptConfig(),
    pristine: Optional[Dict[str, torch.Tensor]] = None,
) -> AdaptResult:
    """Reset, then take ``config.steps`` Adam steps on the normalization parameters.

    ``pristine`` is the snapshot restored before adapting; by default the
    current parameter values. The loss trace has ``steps + 1`` entries: the
    loss before each step and after the last one.
    """
    params = adaptable_params(model)
    if pristine is None:
        pristine = params.snapshot()
    x = to_batch(model, images)
    texts = config.bank(text_bank).stacked(x.dtype)
    return _run(model, x, texts, config.layers(model.spec.depth), config, params, pristine)


def tent_adapt_batch(
    model,
    images,
    text_bank: TextBank,
    config: AdaptConfig = AdaptConfig(),
    pristine: Optional[Dict[str, torch.Tensor]] = None,
) -> AdaptResult:
    """Entropy minimisation on the final layer's spatial tokens with one template."""
    if config.bank(text_bank).num_templates != 1:
        raise ValueError("TENT uses exactly one prompt template")
    return adapt_batch(model, images, text_bank, tent_config(config, model.spec.depth), pristine)


def tent_config(config: AdaptConfig, depth: int) -> AdaptConfig:
    return replace(config, layer_range=(depth, depth), use_ile=False)


@torch.no_grad()
def predict(
    model,
    images,
    text_bank: TextBank,
    config: AdaptConfig = AdaptConfig(),
    output_size: Optional[Tuple[int, int]] = None,
) -> Prediction:
    """Entropy-weighted multi-level prediction, upsampled to ``output_size``.

    Layer entropies are computed over the whole batch and averaged over
    templates; class probabilities are averaged over templates.
    """
    x = to_batch(model, images)
    bank = config.bank(text_bank)
    texts = bank.stacked(x.dtype)
    layers = config.layers(model.spec.depth)
    tokens = model.encode_image(x).select(layers)

    h = torch.stack(
        [core.layer_entropies(tokens, model.project, texts[t], config.tau) for t in range(texts.shape[0])]
    ).mean(dim=0)
    weights = core.confidence_weights(h, config.beta_eval)
    f_bar = core.fuse_layers(tokens, weights, model.project)  # B, N, D
    probs = torch.stack(
        [core.probability_map(f_bar, texts[t], config.tau).probs for t in range(texts.shape[0])]
    ).mean(dim=0)  # B, N, K

    g = model.spec.grid
    b, _, k = probs.shape
    grid_scores = probs.transpose(1, 2).reshape(b, k, g, g)
    size = output_size or (x.shape[-2], x.shape[-1])
    scores = F.interpolate(grid_scores, size=tuple(size), mode="bilinear", align_corners=False)
    scores = scores.double().cpu().numpy()
    return Prediction(
        labels=np.argmax(scores, axis=1).astype(np.int64),
        scores=scores,
        alpha=weights.alpha.double().cpu().numpy(),
        entropies=h.double().cpu().numpy(),
        layers=layers,
    )


def tile_origins(length: int, window: int, stride: int) -> List[int]:
    """Window start offsets with a final tile flush against the far edge."""
    if length < window:
        raise ValueError(f"length {length} is smaller than window {window}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] + window < length:
        starts.append(length - window)
    return starts


def coverage_counts(height: int, width: int, window: int, stride: int) -> np.ndarray:
    counts = np.zeros((height, width), dtype=np.int64)
    for y in tile_origins(height, window, stride):
        for x in tile_origins(width, window, stride):
            counts[y:y + window, x:x + window] += 1
    return counts


def sliding_window_predict(
    model,
    image: np.ndarray,
    text_bank: TextBank,
    config: AdaptConfig = AdaptConfig(),
    window: int = 224,
    stride: int = 112,
) -> Prediction:
    """Tile a large ``(H, W, 3)`` image, predict each tile, average overlapping scores."""
    image = np.asarray(image)
    height, width = image.shape[:2]
    if height < window or width < window:
        raise ValueError(
            f"image {height}x{width} is smaller than the {window}px window; use predict() instead"
        )
    side = model.spec.input_side
    k = config.bank(text_bank).num_classes
    sums = np.zeros((k, height, width))
    counts = np.zeros((height, width))
    alphas, entropies = [], []
    layers: List[int] = []
    for y in tile_origins(height, window, stride):
        for x in tile_origins(width, window, stride):
            tile = image[y:y + window, x:x + window]
            if window != side:
                tile = resize_image(tile, side)
            pred = predict(model, tile[None], text_bank, config, output_size=(window, window))
            sums[:, y:y + window, x:x + window] += pred.scores[0]
            counts[y:y + window, x:x + window] += 1
            alphas.append(pred.alpha)
            entropies.append(pred.entropies)
            layers = pred.layers
    scores = (sums / counts)[None]
    return Prediction(
        labels=np.argmax(scores, axis=1).astype(np.int64),
        scores=scores,
        alpha=np.mean(alphas, axis=0),
        entropies=np.mean(entropies, axis=0),
        layers=layers,
    )


METHODS = ("none", "tent", "mlmp")


def adapt_and_predict(
    model,
    images,
    text_bank: TextBank,
    config: AdaptConfig,
    method: str,
    pristine: Dict[str, torch.Tensor],
    output_size: Optional[Tuple[int, int]] = None,
) -> Tuple[Prediction, AdaptResult]:
    """One protocol step for a batch: reset, adapt per ``method``, predict.

    ``none`` is the MLMP prediction path with zero adaptation steps.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    depth = model.spec.depth
    if method == "none":
        cfg = replace(config, steps=0)
        result = adapt_batch(model, images, text_bank, cfg, pristine)
    elif method == "tent":
        cfg = tent_config(config, depth)
        result = tent_adapt_batch(model, images, text_bank, config, pristine)
    else:
        cfg = config
        result = adapt_batch(model, images, text_bank, cfg, pristine)
    return predict(model, images, text_bank, cfg, output_size), result


def summarize_batches(results: Sequence[AdaptResult]) -> Dict[str, float]:
    n = len(results)
    return {
        "batches": n,
        "flagged": sum(r.flagged for r in results),
        "improved_fraction": (sum(r.improved for r in results) / n) if n else float("nan"),
    }
