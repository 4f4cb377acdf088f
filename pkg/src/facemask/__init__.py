"""Face-mask classification: augmentation, frozen-backbone head training,
evaluation metrics and overlay inference."""

from .dataset import DatasetManifest, ImageBuffer, Label, Split, decode_image, encode_image, load_manifest
from .nnhead import HeadParameters, head_backward, head_forward
from .train import TrainConfig, train
from .metrics import compute_metrics, confusion, evaluate, roc

__version__ = "0.1.0"
