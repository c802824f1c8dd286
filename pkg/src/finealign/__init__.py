"""Region-text alignment for remote sensing vision-language models: toy encoders,
region features, contrastive and distillation losses, two-stage training and
dense-prediction evaluation."""

from .datamodel import BBox, ImageRecord, ObjectAnnotation, load_manifest, save_manifest
from .encoders import TeacherStudentBundle, TextEncoderConfig, VisionEncoderConfig
from .losses import LossWeights, loss_dis, loss_glo, loss_loc, total_loss
from .trainer import EvalConfig, TrainConfig, run_stage

__version__ = "0.1.0"

__all__ = ["BBox", "ImageRecord", "ObjectAnnotation", "load_manifest", "save_manifest",
           "TeacherStudentBundle", "TextEncoderConfig", "VisionEncoderConfig", "LossWeights",
           "loss_dis", "loss_glo", "loss_loc", "total_loss", "EvalConfig", "TrainConfig", "run_stage"]
