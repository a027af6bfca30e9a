"""Unsupervised real-time adaptation of a row-anchor lane detector.

Only batch-norm scale/shift parameters are updated, from the entropy of the
model's own predictions, one backward pass per batch of unlabeled frames.
"""

from .adapt import AdaptConfig, AdaptState, adapt_step, entropy_loss, stream_adapt
from .errors import (DegenerateBatchError, DimensionError, FormatError, LDBNError,
                     NumericError, StateError, ValidationError)
from .lane import RowAnchorGrid, accuracy, decode, pretrain_loss
from .nn import BatchNorm2d, LayerStack, build_reference_model
from .scenario import ScenarioSpec, render_frame, shift_profile
from .weights import load_weights, save_weights

__version__ = "0.1.0"
