"""Dual-resolution, attention-fused, ordinal-regression grading pipeline for
retinal-style images, with desk-scale from-scratch backbones."""

__version__ = "0.1.0"

from .coral import (CoralHead, coral_decode, coral_logits, coral_loss, coral_loss_grad,
                    encode_targets)
from .data import (Manifest, ManifestRecord, class_counts, load_manifest, merge,
                   sample_weights, save_manifest, stratified_split, weighted_sample)
from .fusion import FusionParams, GatedFusion, compute_gate, concat_features, fuse, project_branches
from .imgproc import (AugmentConfig, CircleROI, augment, ben_graham, circular_crop, clahe,
                      detect_fundus_disc, gaussian_blur, histogram_match, read_image,
                      resize_bilinear, to_input_tensor, write_image)
from .metrics import confusion, per_class_accuracy, qwk
from .model import DualBranchModel, ModelConfig, gradient_check
from .nn import BackboneConfig, ParamStore, backbone_forward, conv2d, global_avg_pool, init_params, linear, relu
from .synth import DomainShift, SynthConfig, apply_domain_shift, generate_corpus
from .train import (AdamState, Checkpoint, TrainConfig, adam_step, evaluate_model, fit,
                    load_checkpoint, save_checkpoint, train_epoch)

__all__ = [name for name in dir() if not name.startswith("_")]
