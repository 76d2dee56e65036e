"""Desk-scale toolkit for training small recurrent LMs by teacher-ensemble
knowledge distillation with trust-regularized loss weighting, plus N-best
rescoring of speech hypotheses."""

from .data import BpttBatch, TokenStream, Vocabulary, bptt_batches, build_vocab, decode, encode
from .errors import (ConfigError, ContractError, DataError, FormatError,
                     NumericError, ShapeError, TrainingError, UserError)
from .losses import (DistillLossSpec, SoftLabelBatch, ce_loss, distill_loss,
                     fixed_interp_loss, kl_loss, temperature_softmax, tr_loss,
                     trust_weight)
from .model import (ForwardResult, LmModel, LmState, ModelConfig, build_model,
                    lstm_step, model_forward, mos_forward, param_count)
from .checkpoint import load_checkpoint, save_checkpoint
from .regularization import (DropoutSpec, RegContext, activation_reg,
                             drop_connect, embedding_dropout, variational_mask)
from .rescore import (NbestEntry, RescoreConfig, WerReport, combine_and_select,
                      parse_nbest, rescore_nbest, score_hypothesis, wer)
from .tensor import Tape, Tensor, backward, grad_check, grad_check_params
from .training import (OneHotOracle, TeacherEnsemble, TrainConfig,
                       ensemble_predict, perplexity, train)

__version__ = "0.1.0"
