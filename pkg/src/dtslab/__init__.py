"""dtslab: a desk-scale dual teacher-student self-training laboratory for
domain-adaptive semantic segmentation on a deterministic synthetic benchmark."""

from .autodiff import (Tape, Tensor, backward, conv2d, no_grad, relu,
                       softmax_channel, sum_all, upsample_nearest,
                       weighted_cross_entropy)
from .errors import (ConfigError, DtsError, FormatError, GraphError,
                     OptimError, ShapeError, TrainingAborted)
from .metrics import ConfusionMatrix, MetricsRow, accumulate, miou
from .mixing import (IGNORE_LABEL, AugmentParams, MixedSample, PseudoLabel,
                     augment, choose_tt_mask_source, classmix_mask, mix,
                     mix_labels, pseudo_label)
from .model import (ModelGroup, SegArch, SegNet, ema_update, forward,
                    init_group, load_params, save_params)
from .optim import AdamW, OptimState, adamw_step, lr_at
from .shapesworld import (SOURCE, TARGET, DomainSpec, SceneSample,
                          class_frequency, generate_benchmark, generate_scene,
                          read_dataset, write_dataset)
from .trainer import (COMBINATIONS, GROUP1, ROUTINGS, S_ONLY, SETTING_A,
                      SETTING_B, ST_ONLY, TT_ONLY, DataCombination,
                      DtsTrainer, IterationReport, ProbEstimator,
                      RoutingPolicy, RunResult, SeededLoader, TrainerConfig,
                      assemble_batch, evaluate_model, pseudo_slot_plan,
                      select_setting)

__version__ = "0.1.0"
