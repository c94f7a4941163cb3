"""Prompt-conditioned face alignment on an interpretable 2D plane."""

from .augment import AugmentationConfig, augment, flip_sample
from .data import (DatasetDescriptor, DatasetRegistry, NormSpec, Sample,
                   export_canonical, import_annotations, load_image,
                   make_batches)
from .errors import (DataFormatError, DegenerateFitError, NumericsError,
                     PlanemarkError)
from .evaluation import (cross_scheme_transfer, evaluate_dataset,
                         linear_probe_eval, linear_probe_protocol,
                         zero_shot_predict)
from .geometry import (AffineTransform, LandmarkSet, MeanShape,
                       apply_semantic_offsets, compute_mean_shape,
                       fit_affine_alignment, fit_plane_normalization,
                       generate_scratch_shape, mean_canonical_shape)
from .metrics import CEDCurve, MetricReport, auc, fr, nme_per_sample
from .model import (LandmarkMapper, ModelConfig, build_model, decoder_flops,
                    load_checkpoint, save_checkpoint)
from .prompts import (PromptCodecConfig, encode_axis, encode_point,
                      encode_points, shift_rotation_matrix)
from .synthetic import (SCHEMES, FaceParams, curve_point, scheme_descriptor,
                        scheme_landmarks, synth_generate, write_synth_dataset)
from .training import (MaskPlan, TrainConfig, fewshot_finetune,
                       l1_landmark_loss, lr_schedule, mask_anchors, train,
                       train_step)

__version__ = "0.1.0"
