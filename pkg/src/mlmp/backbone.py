"""Vision-language encoder contract and a deterministic toy transformer.

Every backbone exposes:

* ``encode_image(x)`` -> :class:`LayerTokens`, the residual-stream output of
  every transformer block (CLS at position 0),
* ``project(q)`` -> the final pre-projection norm followed by the linear
  projection, shared by all layers,
* ``encode_text(strings)`` -> frozen text embeddings,
* ``vision_encoder()`` -> the module whose normalization layers are adapted.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)

TEMPLATES = (
    "itap of a {class}",
    "a bad photo of the {class}.",
    "a origami {class}.",
    "a photo of the large {class}.",
    "a {class} in a video game.",
    "art of the {class}.",
    "a photo of the small {class}.",
)
DEFAULT_TEMPLATE = "a photo of a {class}."

TOY_MAGIC = b"MLMPTOY1"
_HEADER = struct.Struct("<8s6i")  # magic + 6 int32 fields = 32 bytes

_NORM_TYPES = (nn.LayerNorm, nn.GroupNorm, nn.BatchNorm1d, nn.BatchNorm2d)


@dataclass(frozen=True)
class BackboneSpec:
    depth: int = 4
    token_dim: int = 16
    embed_dim: int = 8
    patch_size: int = 8
    input_side: int = 32

    def __post_init__(self):
        for name in ("depth", "token_dim", "embed_dim", "patch_size", "input_side"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"BackboneSpec.{name} must be a positive integer, got {value!r}")
        if self.input_side < self.patch_size:
            raise ValueError(
                f"input_side {self.input_side} is smaller than patch_size {self.patch_size}"
            )

    @property
    def grid(self) -> int:
        return self.input_side // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid


def norm_parameter_count(spec: BackboneSpec) -> int:
    """Scale+shift scalars of a CLIP-layout vision tower (pre-norm, 2 per block, post-norm)."""
    return (2 * spec.depth + 2) * 2 * spec.token_dim


@dataclass(frozen=True)
class LayerTokens:
    """Per-layer residual-stream tokens, shape ``(B, L, N+1, D')``; CLS at row 0."""

    tokens: torch.Tensor

    def __post_init__(self):
        if self.tokens.ndim != 4:
            raise ValueError(f"LayerTokens expects a (B, L, N+1, D') tensor, got {tuple(self.tokens.shape)}")

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def depth(self) -> int:
        return self.tokens.shape[1]

    @property
    def num_patches(self) -> int:
        return self.tokens.shape[2] - 1

    @property
    def spatial(self) -> torch.Tensor:
        return self.tokens[:, :, 1:, :]

    @property
    def cls(self) -> torch.Tensor:
        return self.tokens[:, :, 0, :]

    def layer(self, index: int) -> torch.Tensor:
        """1-based layer access, full ``(B, N+1, D')`` block output."""
        if not 1 <= index <= self.depth:
            raise IndexError(f"layer {index} outside 1..{self.depth}")
        return self.tokens[:, index - 1]

    def select(self, layers: Sequence[int]) -> "LayerTokens":
        """Restrict to a list of 1-based layer indices."""
        idx = [int(i) for i in layers]
        if not idx:
            raise ValueError("empty layer selection")
        for i in idx:
            if not 1 <= i <= self.depth:
                raise IndexError(f"layer {i} outside 1..{self.depth}")
        return LayerTokens(self.tokens[:, [i - 1 for i in idx]])

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.tokens).all())


class TextBank:
    """Frozen text embeddings indexed by (template, class)."""

    def __init__(self, embeddings, templates: Sequence[str], class_names: Sequence[str]):
        emb = np.array(embeddings, dtype=np.float64, copy=True)
        if emb.ndim != 3:
            raise ValueError(f"TextBank embeddings must be (T, K, D), got shape {emb.shape}")
        if emb.shape[:2] != (len(templates), len(class_names)):
            raise ValueError(
                f"embedding table {emb.shape[:2]} does not match "
                f"{len(templates)} templates x {len(class_names)} classes"
            )
        norms = np.linalg.norm(emb, axis=-1)
        if np.any(norms == 0) or not np.all(np.isfinite(emb)):
            raise ValueError("TextBank vectors must be finite and nonzero")
        emb.setflags(write=False)
        self._emb = emb
        self._templates = tuple(templates)
        self._classes = tuple(class_names)

    @property
    def embeddings(self) -> np.ndarray:
        return self._emb

    @property
    def templates(self) -> tuple:
        return self._templates

    @property
    def class_names(self) -> tuple:
        return self._classes

    @property
    def num_templates(self) -> int:
        return self._emb.shape[0]

    @property
    def num_classes(self) -> int:
        return self._emb.shape[1]

    @property
    def dim(self) -> int:
        return self._emb.shape[2]

    def __len__(self):
        return self._emb.shape[0] * self._emb.shape[1]

    def text(self, template: int, dtype=torch.float64) -> torch.Tensor:
        """K x D matrix for one template (0-based)."""
        return torch.tensor(self._emb[template], dtype=dtype)

    def stacked(self, dtype=torch.float64) -> torch.Tensor:
        return torch.tensor(self._emb, dtype=dtype)

    def subset(self, templates: Sequence[int]) -> "TextBank":
        idx = list(templates)
        if not idx:
            raise ValueError("template subset must be nonempty")
        return TextBank(self._emb[idx], [self._templates[i] for i in idx], self._classes)


def fill_template(template: str, class_name: str) -> str:
    return template.replace("{class}", class_name.lower())


def encode_texts(
    model,
    class_names: Sequence[str],
    templates: Sequence[str] = TEMPLATES,
    cache_dir: Optional[str] = None,
) -> TextBank:
    """Encode every (template, class) prompt once and freeze the result.

    ``model`` is anything with ``encode_text(list_of_strings)``. When a cache
    directory is given (or ``MLMP_CACHE_DIR`` is set) and the encoder has a
    ``fingerprint``, the bank is stored there and reused.
    """
    class_names = list(class_names)
    templates = list(templates)
    if not class_names:
        raise ValueError("class list is empty")
    if not templates:
        raise ValueError("template list is empty")
    if len(set(class_names)) != len(class_names):
        dup = sorted({c for c in class_names if class_names.count(c) > 1})
        raise ValueError(f"duplicate class names: {dup}")

    cache_dir = cache_dir if cache_dir is not None else os.environ.get("MLMP_CACHE_DIR")
    fingerprint = getattr(model, "fingerprint", None)
    cache_path = None
    if cache_dir and fingerprint:
        key = hashlib.sha256(
            "\n".join([str(fingerprint), *templates, "--", *class_names]).encode()
        ).hexdigest()[:24]
        cache_path = Path(cache_dir) / f"textbank-{key}.npy"
        if cache_path.exists():
            log.debug("text bank cache hit %s", cache_path)
            return TextBank(np.load(cache_path), templates, class_names)

    prompts = [fill_template(t, c) for t in templates for c in class_names]
    with torch.no_grad():
        emb = model.encode_text(prompts)
    emb = torch.as_tensor(emb).detach().cpu().double().numpy()
    emb = emb.reshape(len(templates), len(class_names), -1)
    bank = TextBank(emb, templates, class_names)
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        np.save(cache_path, bank.embeddings)
    return bank


class AdaptableParams:
    """The normalization scale/shift parameters of a vision encoder."""

    def __init__(self, named: Dict[str, nn.Parameter]):
        if not named:
            raise ValueError("no normalization parameters found")
        self._named = dict(named)

    @property
    def names(self) -> List[str]:
        return list(self._named)

    def parameters(self) -> List[nn.Parameter]:
        return list(self._named.values())

    def items(self):
        return self._named.items()

    def numel(self) -> int:
        return sum(p.numel() for p in self._named.values())

    def snapshot(self) -> Dict[str, torch.Tensor]:
        return {k: p.detach().clone() for k, p in self._named.items()}

    @torch.no_grad()
    def restore(self, snapshot: Dict[str, torch.Tensor]) -> None:
        if snapshot.keys() != self._named.keys():
            raise KeyError("snapshot does not match the adaptable parameter set")
        for k, p in self._named.items():
            p.copy_(snapshot[k])

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, p in self._named.items():
            h.update(k.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def adaptable_params(model) -> AdaptableParams:
    """Select the normalization-layer affine parameters of ``model``'s vision encoder."""
    encoder = model.vision_encoder() if hasattr(model, "vision_encoder") else model
    named = {}
    for mod_name, module in encoder.named_modules():
        if isinstance(module, _NORM_TYPES):
            for p_name, p in module.named_parameters(recurse=False):
                named[f"{mod_name}.{p_name}" if mod_name else p_name] = p
    if not named:
        raise ValueError(f"{type(model).__name__} has no normalization layers to adapt")
    return AdaptableParams(named)


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in module.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# toy encoders
# ---------------------------------------------------------------------------

_WORD = re.compile(r"[a-z0-9]+")


class ToyTextEncoder:
    """Bag-of-words hashing encoder: each word maps to a seeded Gaussian vector.

    Prompts that share the class word share its vector, so templates act as
    different views of the same concept.
    """

    def __init__(self, embed_dim: int, seed: int = 0):
        self.embed_dim = int(embed_dim)
        self.seed = int(seed)
        self.calls = 0

    @property
    def fingerprint(self) -> str:
        return f"toy-text-{self.embed_dim}-{self.seed}"

    def word_vector(self, word: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{word}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.standard_normal(self.embed_dim)

    def __call__(self, prompts: Sequence[str]) -> torch.Tensor:
        self.calls += 1
        out = np.zeros((len(prompts), self.embed_dim))
        for i, text in enumerate(prompts):
            words = _WORD.findall(text.lower())
            if not words:
                raise ValueError(f"prompt {text!r} has no words to encode")
            for w in words:
                out[i] += self.word_vector(w)
        return torch.from_numpy(out)


class _Block(nn.Module):
    def __init__(self, dim: int, mlp_ratio: int = 2):
        super().__init__()
        self.ln_1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.attn_out = nn.Linear(dim, dim)
        self.ln_2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def forward(self, x):
        h = self.ln_1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)
        x = x + self.attn_out(attn @ v)
        return x + self.fc2(F.gelu(self.fc1(self.ln_2(x))))


class _ToyVisual(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        d = spec.token_dim
        self.patch_embed = nn.Conv2d(3, d, spec.patch_size, stride=spec.patch_size, bias=False)
        self.cls_token = nn.Parameter(torch.zeros(d))
        self.pos_embed = nn.Parameter(torch.zeros(spec.num_patches + 1, d))
        self.ln_pre = nn.LayerNorm(d)
        self.blocks = nn.ModuleList(_Block(d) for _ in range(spec.depth))
        self.ln_post = nn.LayerNorm(d)
        self.proj = nn.Linear(d, spec.embed_dim, bias=False)


class ToyViT(nn.Module):
    """Small CLIP-layout vision transformer with a hashing text encoder."""

    def __init__(self, spec: BackboneSpec, text_seed: int = 0):
        super().__init__()
        self.spec = spec
        self.visual = _ToyVisual(spec)
        self.text_encoder = ToyTextEncoder(spec.embed_dim, text_seed)

    @property
    def fingerprint(self) -> str:
        return f"toyvit-{parameter_checksum(self)[:16]}-{self.text_encoder.fingerprint}"

    def vision_encoder(self) -> nn.Module:
        return self.visual

    @property
    def dtype(self):
        return self.visual.pos_embed.dtype

    def preprocess(self, images) -> torch.Tensor:
        """uint8 ``(H, W, 3)`` or ``(B, H, W, 3)`` -> ``(B, 3, H, W)`` in [-1, 1]."""
        arr = np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ValueError(f"expected (B, H, W, 3) RGB images, got shape {arr.shape}")
        x = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(self.dtype)
        return x / 127.5 - 1.0

    def encode_image(self, x: torch.Tensor) -> LayerTokens:
        s = self.spec.input_side
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
            raise ValueError(
                f"image batch must be (B, 3, {s}, {s}), got {tuple(x.shape)}; "
                f"resize inputs to {s}x{s} first"
            )
        v = self.visual
        patches = v.patch_embed(x.to(self.dtype)).flatten(2).transpose(1, 2)
        cls = v.cls_token.expand(x.shape[0], 1, -1)
        h = v.ln_pre(torch.cat([cls, patches], dim=1) + v.pos_embed)
        outs = []
        for block in v.blocks:
            h = block(h)
            outs.append(h)
        return LayerTokens(torch.stack(outs, dim=1))

    def project(self, q: torch.Tensor) -> torch.Tensor:
        if q.shape[-1] != self.spec.token_dim:
            raise ValueError(f"token width {q.shape[-1]} != token_dim {self.spec.token_dim}")
        return self.visual.proj(self.visual.ln_post(q))

    def encode_text(self, prompts: Sequence[str]) -> torch.Tensor:
        return self.text_encoder(prompts)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Final projected tokens ``(B, N+1, D)`` of the last block."""
        h = self.encode_image(x).tokens[:, -1]
        return self.visual.proj(self.visual.ln_post(h))


def make_toy_backbone(
    spec: BackboneSpec = BackboneSpec(), seed: int = 0, dtype=torch.float64
) -> ToyViT:
    """Seeded toy transformer; the first three token channels carry patch mean colour."""
    gen = torch.Generator().manual_seed(int(seed))
    model = ToyViT(spec, text_seed=seed).to(dtype)
    d, s = spec.token_dim, spec.patch_size

    def normal(shape, std):
        return torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype) * std

    with torch.no_grad():
        for name, p in model.named_parameters():
            if isinstance(_owner(model, name), nn.LayerNorm):
                if name.endswith("weight"):
                    p.copy_(1.0 + normal(p.shape, 0.05))
                else:
                    p.copy_(normal(p.shape, 0.02))
            elif name.endswith("patch_embed.weight"):
                w = normal(p.shape, 0.5 / math.sqrt(3 * s * s))
                for c in range(min(3, d)):
                    w[c].zero_()
                    w[c, c] = 2.0 / (s * s)
                p.copy_(w)
            elif name.endswith("cls_token"):
                p.copy_(normal(p.shape, 0.5))
            elif name.endswith("pos_embed"):
                p.copy_(normal(p.shape, 0.1))
            elif p.ndim == 2:
                gain = 0.5 if name.endswith(("attn_out.weight", "fc2.weight")) else 1.0
                p.copy_(normal(p.shape, gain / math.sqrt(p.shape[1])))
            else:
                p.copy_(normal(p.shape, 0.01))
    return model


def _owner(model: nn.Module, param_name: str) -> nn.Module:
    return model.get_submodule(param_name.rsplit(".", 1)[0])


def save_toy(model: ToyViT, path) -> None:
    """Flat little-endian float64 dump behind a 32-byte ``MLMPTOY1`` header."""
    s = model.spec
    header = _HEADER.pack(
        TOY_MAGIC, s.depth, s.token_dim, s.embed_dim, s.patch_size, s.input_side,
        model.text_encoder.seed,
    )
    flat = np.concatenate(
        [t.detach().cpu().double().numpy().ravel() for t in model.state_dict().values()]
    ).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(flat.tobytes())


def load_toy(path) -> ToyViT:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: file too short for a toy backbone header")
    magic, depth, token_dim, embed_dim, patch, side, text_seed = _HEADER.unpack_from(raw)
    if magic != TOY_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {TOY_MAGIC!r}")
    spec = BackboneSpec(depth, token_dim, embed_dim, patch, side)
    model = ToyViT(spec, text_seed=text_seed).double()
    flat = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    state = model.state_dict()
    expected = sum(t.numel() for t in state.values())
    if flat.size != expected:
        raise ValueError(f"{path}: {flat.size} values, expected {expected} for {spec}")
    offset = 0
    for name, t in state.items():
        n = t.numel()
        state[name] = torch.from_numpy(flat[offset:offset + n].copy()).reshape(t.shape)
        offset += n
    model.load_state_dict(state)
    return model


def calibrate_toy_projection(
    model: ToyViT,
    images: np.ndarray,
    labels: np.ndarray,
    text_bank: TextBank,
    layers: Optional[Iterable[int]] = None,
    ridge: float = 1e-3,
    ignore_index: int = 255,
) -> None:
    """Fit the toy projection so clean patches point at their class's text vector.

    A ridge least-squares linear probe on ``ln_post(Q^l)`` rows, pooled over
    ``layers``. Gives the toy fixture a meaningful zero-shot starting point.
    """
    spec = model.spec
    layers = list(layers) if layers is not None else list(range(1, spec.depth + 1))
    with torch.no_grad():
        tokens = model.encode_image(model.preprocess(images)).select(layers).spatial
        feats = model.visual.ln_post(tokens).double().numpy()  # B, L, N, D'
    patch_labels = patch_majority(labels, spec.grid, ignore_index)  # B, N
    targets = text_bank.embeddings / np.linalg.norm(text_bank.embeddings, axis=-1, keepdims=True)
    targets = targets.mean(axis=0)
    targets /= np.linalg.norm(targets, axis=-1, keepdims=True)

    keep = patch_labels >= 0
    x = feats.transpose(0, 2, 1, 3)[keep].reshape(-1, spec.token_dim)
    y = np.repeat(targets[patch_labels[keep]], len(layers), axis=0)
    gram = x.T @ x + ridge * np.eye(spec.token_dim)
    w = np.linalg.solve(gram, x.T @ y).T
    with torch.no_grad():
        model.visual.proj.weight.copy_(torch.from_numpy(w).to(model.dtype))


def patch_majority(labels: np.ndarray, grid: int, ignore_index: int = 255) -> np.ndarray:
    """Most frequent non-ignore label per patch, -1 where a patch is all-ignore."""
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    b, h, w = labels.shape
    ph, pw = h // grid, w // grid
    out = np.full((b, grid * grid), -1, dtype=np.int64)
    for i in range(b):
        for gy in range(grid):
            for gx in range(grid):
                cell = labels[i, gy * ph:(gy + 1) * ph, gx * pw:(gx + 1) * pw].ravel()
                cell = cell[cell != ignore_index]
                if cell.size:
                    out[i, gy * grid + gx] = np.bincount(cell).argmax()
    return out


# ---------------------------------------------------------------------------
# pretrained CLIP-family adapter
# ---------------------------------------------------------------------------

_CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
_CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class CLIPBackbone(nn.Module):
    """Adapter for Hugging Face ``CLIPModel`` checkpoints.

    Layer tokens are the encoder's per-block hidden states; ``project`` is
    ``post_layernorm`` followed by ``visual_projection``.
    """

    def __init__(self, name_or_path: str, dtype=torch.float32, device="cpu"):
        super().__init__()
        try:
            from transformers import CLIPModel, CLIPTokenizer
        except ImportError as exc:  # pragma: no cover - optional extra
            raise RuntimeError("the CLIP adapter needs `pip install mlmp[clip]`") from exc
        self.clip = CLIPModel.from_pretrained(name_or_path, torch_dtype=dtype).to(device).eval()
        self.tokenizer = CLIPTokenizer.from_pretrained(name_or_path)
        self.name_or_path = str(name_or_path)
        cfg = self.clip.config.vision_config
        self.spec = BackboneSpec(
            depth=cfg.num_hidden_layers,
            token_dim=cfg.hidden_size,
            embed_dim=self.clip.config.projection_dim,
            patch_size=cfg.patch_size,
            input_side=cfg.image_size,
        )
        self.text_calls = 0
        for p in self.clip.parameters():
            p.requires_grad_(False)

    @property
    def fingerprint(self) -> str:
        return f"clip-{self.name_or_path}"

    @property
    def dtype(self):
        return self.clip.visual_projection.weight.dtype

    def vision_encoder(self) -> nn.Module:
        return self.clip.vision_model

    def preprocess(self, images) -> torch.Tensor:
        arr = np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
        x = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).float() / 255.0
        mean = torch.tensor(_CLIP_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(_CLIP_STD).view(1, 3, 1, 1)
        return ((x - mean) / std).to(self.dtype)

    def encode_image(self, x: torch.Tensor) -> LayerTokens:
        s = self.spec.input_side
        if x.ndim != 4 or x.shape[-2:] != (s, s):
            raise ValueError(f"image batch must be (B, 3, {s}, {s}), got {tuple(x.shape)}")
        vm = self.clip.vision_model
        h = vm.pre_layrnorm(vm.embeddings(x.to(self.dtype)))
        out = vm.encoder(inputs_embeds=h, output_hidden_states=True)
        return LayerTokens(torch.stack(out.hidden_states[1:], dim=1))

    def project(self, q: torch.Tensor) -> torch.Tensor:
        if q.shape[-1] != self.spec.token_dim:
            raise ValueError(f"token width {q.shape[-1]} != token_dim {self.spec.token_dim}")
        return self.clip.visual_projection(self.clip.vision_model.post_layernorm(q))

    @torch.no_grad()
    def encode_text(self, prompts: Sequence[str]) -> torch.Tensor:
        self.text_calls += 1
        toks = self.tokenizer(list(prompts), padding=True, return_tensors="pt")
        toks = {k: v.to(self.clip.device) for k, v in toks.items()}
        return self.clip.get_text_features(**toks).double().cpu()


def text_call_count(model) -> int:
    if isinstance(model, ToyViT):
        return model.text_encoder.calls
    return getattr(model, "text_calls", 0)
