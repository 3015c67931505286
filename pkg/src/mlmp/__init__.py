"""Multi-level, multi-prompt test-time adaptation for open-vocabulary segmentation."""

from .adaptation import AdaptConfig, adapt_batch, predict, sliding_window_predict, tent_adapt_batch
from .backbone import (
    TEMPLATES,
    BackboneSpec,
    LayerTokens,
    TextBank,
    adaptable_params,
    encode_texts,
    make_toy_backbone,
)
from .core import (
    batch_entropy,
    confidence_weights,
    final_loss,
    fuse_layers,
    gradient_variance_probe,
    ile_loss,
    layer_entropy,
    probability_map,
    uaml_loss,
)
from .evaluation import ConfusionMatrix, miou

__version__ = "0.1.0"
