"""One Transformer for images and point clouds, pretrained with intra- and cross-modal contrast."""

from .augment import AugmentationSpec, apply_augmentation, two_views
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .contrast import ContrastConfig, cmc_loss, combined_loss, imc_loss, loss_components, nt_xent
from .errors import ContractError, DataError, FormatError, NumericError, ParameterError, ShapeError
from .evaluate import FewShotSpec, extract_embeddings, fewshot, linear_probe
from .model import ViPFormer, ViPFormerConfig, calibrate_batchnorm, count_parameters
from .optim import AdamW, AdamWState, SchedulerState, adamw_step, lr_at
from .rng import RngStream
from .tensor import Tensor, grad_check, no_grad
from .tokenize import build_point_patches, farthest_point_sample, knn_group, patchify_image
from .train import Pretrainer, TrainConfig, compare_strategies, finetune, pretrain

__version__ = "0.1.0"
