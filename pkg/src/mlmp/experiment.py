"""Config-driven experiment grid: dataset x scenario x method x repeat."""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import evaluation
from .adaptation import METHODS, AdaptConfig, adapt_and_predict, predict, sliding_window_predict
from .backbone import (
    DEFAULT_TEMPLATE,
    TEMPLATES,
    BackboneSpec,
    adaptable_params,
    calibrate_toy_projection,
    encode_texts,
    load_toy,
    make_toy_backbone,
)
from .corruptions import KINDS, CorruptionSpec, corrupt
from .datasets import (
    SegSample,
    load,
    registry,
    resize_image,
    resize_label,
    stack_images,
    stack_labels,
    toy_samples,
)

log = logging.getLogger(__name__)

TOY_SPEC = BackboneSpec(depth=6, token_dim=16, embed_dim=8, patch_size=8, input_side=64)


class ConfigError(ValueError):
    """Invalid user configuration (exit status 2)."""


class DatasetMissing(FileNotFoundError):
    """Dataset root absent or malformed (exit status 2)."""


class BackboneError(RuntimeError):
    """Backbone could not be built or loaded (exit status 3)."""


@dataclass
class ExperimentConfig:
    backbone: str = "toy"
    dataset: str = "toy"
    root: str = ""
    corruptions: List[str] = field(default_factory=lambda: ["original"])
    corruption_root: str = ""
    severity: int = 5
    method: List[str] = field(default_factory=lambda: list(METHODS))
    steps: int = 10
    lr: float = 1e-3
    batch_size: int = 2
    templates: List[int] = field(default_factory=lambda: list(range(1, len(TEMPLATES) + 1)))
    layer_range: Optional[Tuple[int, int]] = None
    beta_eval: float = 1.0
    repeats: int = 3
    out: str = "runs/latest"
    seed: int = 0
    exclude_background: bool = False
    sliding_window: Optional[bool] = None  # None -> automatic (cityscapes)
    window: int = 224
    stride: int = 112
    workers: int = 1

    def __post_init__(self):
        self.method = _as_list(self.method)
        self.corruptions = _as_list(self.corruptions)
        for m in self.method:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        for c in self.corruptions:
            if c != "original" and c not in KINDS:
                raise ConfigError(f"unknown corruption {c!r}; valid kinds: original, {', '.join(KINDS)}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        bad = [t for t in self.templates if not 1 <= t <= len(TEMPLATES)]
        if bad or not self.templates:
            raise ConfigError(f"template ids must be in 1..{len(TEMPLATES)}, got {self.templates}")
        try:
            registry(self.dataset)
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from exc
        try:
            self.adapt_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def adapt_config(self, repeat: int = 0) -> AdaptConfig:
        return AdaptConfig(
            steps=self.steps,
            learning_rate=self.lr,
            batch_size=self.batch_size,
            layer_range=self.layer_range,
            beta_eval=self.beta_eval,
            seed=self.seed + repeat,
        )

    def to_dict(self) -> Dict:
        d = asdict(self)
        d.pop("workers")
        return d

    @property
    def use_sliding_window(self) -> bool:
        return self.dataset == "cityscapes" if self.sliding_window is None else self.sliding_window


def _as_list(value) -> List:
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return list(value)


def parse_layer_range(text: str) -> Optional[Tuple[int, int]]:
    text = text.strip().lower()
    if text in ("", "default", "last75"):
        return None
    try:
        if "-" in text:
            lo, hi = text.split("-", 1)
            return int(lo), int(hi)
        n = int(text)
        return n, n
    except ValueError:
        raise ConfigError(f"layer range must look like '7-24', got {text!r}") from None


def parse_templates(text: str) -> List[int]:
    text = text.strip().lower()
    if text in ("", "all"):
        return list(range(1, len(TEMPLATES) + 1))
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"templates must be comma-separated ids, got {text!r}") from None


def _parse_bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


_CONVERTERS = {
    "steps": int,
    "lr": float,
    "batch_size": int,
    "templates": parse_templates,
    "layer_range": parse_layer_range,
    "beta_eval": float,
    "repeats": int,
    "seed": int,
    "severity": int,
    "exclude_background": _parse_bool,
    "sliding_window": _parse_bool,
    "window": int,
    "stride": int,
    "workers": int,
}
KEYS = {f.name for f in fields(ExperimentConfig)}


def read_config_file(path) -> Dict[str, str]:
    """Flatten an INI-style file: section headers group keys, keys are global."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    flat: Dict[str, str] = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            flat[key.replace("-", "_")] = value
    return flat


def build_config(values: Dict[str, object]) -> ExperimentConfig:
    kwargs = {}
    for key, value in values.items():
        key = key.replace("-", "_")
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        if value is None:
            continue
        conv = _CONVERTERS.get(key)
        try:
            kwargs[key] = conv(value) if conv is not None and isinstance(value, str) else value
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return ExperimentConfig(**kwargs)


# ---------------------------------------------------------------------------
# backbones
# ---------------------------------------------------------------------------

_MODEL_CACHE: Dict[str, object] = {}


def build_backbone(cfg: ExperimentConfig):
    """``toy`` | ``toy:<file>`` | ``clip:<name-or-path>``; cached per process."""
    key = f"{cfg.backbone}|{cfg.dataset}|{cfg.seed}|{cfg.templates}|{cfg.layer_range}"
    if key in _MODEL_CACHE:
        return _MODEL_CACHE[key]
    kind, _, arg = cfg.backbone.partition(":")
    try:
        if kind == "toy" and not arg:
            model = make_toy_backbone(TOY_SPEC, cfg.seed)
            if cfg.dataset == "toy":
                _calibrate(model, cfg)
        elif kind == "toy":
            model = load_toy(arg)
        elif kind == "clip":
            from .backbone import CLIPBackbone

            model = CLIPBackbone(arg)
        else:
            raise ConfigError(f"unknown backbone selector {cfg.backbone!r}")
    except ConfigError:
        raise
    except Exception as exc:
        raise BackboneError(f"cannot load backbone {cfg.backbone!r}: {exc}") from exc
    _MODEL_CACHE[key] = model
    return model


def _calibrate(model, cfg: ExperimentConfig) -> None:
    side = model.spec.input_side
    space = registry("toy")
    bank = encode_texts(model, space.classes, [TEMPLATES[t - 1] for t in cfg.templates], cache_dir="")
    cal = toy_samples(32, seed=cfg.seed + 10_007)
    images = np.stack([resize_image(s.image, side) for s in cal])
    labels = np.stack([resize_label(s.label, side) for s in cal])
    try:
        layers = AdaptConfig(layer_range=cfg.layer_range).layers(model.spec.depth)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    calibrate_toy_projection(model, images, labels, bank, layers=layers)


# ---------------------------------------------------------------------------
# grid execution
# ---------------------------------------------------------------------------


@dataclass
class CellResult:
    scenario: str
    method: str
    repeat: int
    miou: float
    records: List[Dict]
    flagged: int


def _scenario_batches(cfg: ExperimentConfig, scenario: str, resize_to) -> Iterator[List[SegSample]]:
    root = Path(cfg.root)
    if scenario == "original":
        yield from load(root, cfg.dataset, resize_to, cfg.batch_size)
        return
    materialized = Path(cfg.corruption_root) / scenario if cfg.corruption_root else None
    if materialized is not None and (materialized / "images").is_dir():
        yield from load(materialized, cfg.dataset, resize_to, cfg.batch_size)
        return
    spec = CorruptionSpec(scenario, cfg.severity, cfg.seed)
    for batch in load(root, cfg.dataset, resize_to, cfg.batch_size):
        yield [SegSample(corrupt(s.image, spec, s.ident), s.label, s.ident) for s in batch]


def run_cell(cfg: ExperimentConfig, scenario: str, method: str, repeat: int) -> CellResult:
    model = build_backbone(cfg)
    space = registry(cfg.dataset)
    templates = [TEMPLATES[t - 1] for t in cfg.templates]
    bank = encode_texts(model, space.classes, templates)
    if method == "tent":
        bank = encode_texts(model, space.classes, [DEFAULT_TEMPLATE])
    params = adaptable_params(model)
    pristine = params.snapshot()
    acfg = cfg.adapt_config(repeat)
    side = model.spec.input_side
    sliding = cfg.use_sliding_window
    exclude = [0] if cfg.exclude_background and space.has_background else []

    cm = evaluation.ConfusionMatrix(space.num_classes, space.ignore_index)
    records, flagged = [], 0
    try:
        for batch_id, batch in enumerate(_scenario_batches(cfg, scenario, None if sliding else side)):
            images = np.stack([resize_image(s.image, side) for s in batch])
            pred, result = adapt_and_predict(model, images, bank, acfg, method, pristine)
            labels = [s.label for s in batch]
            if sliding:
                pcfg = acfg if method != "tent" else replace(acfg, layer_range=(model.spec.depth,) * 2)
                preds = [
                    sliding_window_predict(model, s.image, bank, pcfg, cfg.window, cfg.stride).labels[0]
                    if min(s.image.shape[:2]) >= cfg.window
                    else predict(model, resize_image(s.image, side)[None], bank, pcfg,
                                 output_size=s.image.shape[:2]).labels[0]
                    for s in batch
                ]
            else:
                preds = list(pred.labels)
            for lbl, p in zip(labels, preds):
                cm.accumulate(lbl, p)
            flagged += int(result.flagged)
            records.append(
                {
                    "dataset": cfg.dataset,
                    "corruption": scenario,
                    "method": method,
                    "repeat": repeat,
                    "batch": batch_id,
                    "ids": [s.ident for s in batch],
                    "losses": result.losses,
                    "alpha": pred.alpha.tolist(),
                    "layers": pred.layers,
                    "flagged": result.flagged,
                    "seconds": round(result.seconds, 6),
                }
            )
    finally:
        params.restore(pristine)
    _, value = evaluation.miou(cm, exclude)
    return CellResult(scenario, method, repeat, 100.0 * value, records, flagged)


def _run_cell_args(args):
    return run_cell(*args)


def fingerprint(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def run_experiment(cfg: ExperimentConfig) -> Tuple[Dict, int]:
    """Run the grid, write ``report.json``, ``report.csv`` and ``run_log.ndjson``.

    Returns the report payload and the number of flagged (non-finite) batches.
    """
    root = Path(cfg.root)
    if not (root / "images").is_dir():
        raise DatasetMissing(f"dataset root {root} has no images/ directory")
    model = build_backbone(cfg)  # fail early with BackboneError
    try:
        cfg.adapt_config().layers(model.spec.depth)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    cells = [
        (cfg, scenario, method, r)
        for scenario in cfg.corruptions
        for method in cfg.method
        for r in range(cfg.repeats)
    ]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_cell_args, cells))
    else:
        results = [run_cell(*c) for c in cells]

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "run_log.ndjson"
    log_path.unlink(missing_ok=True)
    report = evaluation.RunReport(config=cfg.to_dict(), fingerprint=fingerprint(cfg))
    flagged = 0
    all_records = []
    for res in results:
        report.add(cfg.dataset, res.method, res.scenario, res.miou)
        flagged += res.flagged
        for rec in res.records:
            evaluation.append_run_log(log_path, rec)
        all_records.extend(res.records)
    mlmp_records = [r for r in all_records if r["method"] == "mlmp"] or all_records
    report.layer_weights = evaluation.layer_weight_table(evaluation.layer_weight_stats(mlmp_records))
    payload = evaluation.emit_report(report, out)
    return payload, flagged
