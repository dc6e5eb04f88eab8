"""Toy-scale lab for complementary online distillation and the training-order
loss diagnostic."""

from .checkpointing import Checkpoint, average_checkpoints, load_checkpoint, save_checkpoint
from .diagnostics import BatchTrace, CorrelationReport, imbalance_report, spearman
from .models import ClassifierConfig, ConfigError, ParamSet, Seq2SeqConfig, SoftmaxClassifier, TinySeq2Seq, build_model
from .optimizer import AdamConfig, AdamState, TrainingDivergedError, adam_step
from .trainer import TrainerConfig, baseline_train, cokd_train, finetune_low_lr, ordering, word_kd_train

__version__ = "0.1.0"
