"""Row-anchor lane formulation: grid geometry, decoding, loss and accuracy.

Logits for one image have shape ``(C + 1, h, L)``: C horizontal grid cells
plus one background cell (index C, "no lane here") for each of h row anchors
and L lanes. Batched logits carry a leading sample axis.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import kernels as K
from .errors import DimensionError, ValidationError


@dataclass(frozen=True)
class RowAnchorGrid:
    grid_cells: int = 25
    row_anchors: int = 14
    lanes: int = 2
    width: int = 128
    height: int = 64

    def __post_init__(self):
        if self.grid_cells < 2:
            raise ValidationError("grid_cells must be >= 2")
        rows = self.anchor_rows
        if len(set(rows.tolist())) != self.row_anchors:
            raise ValidationError("anchor rows collide; image too short for that many anchors")

    @cached_property
    def anchor_rows(self):
        """Evenly spaced pixel rows covering the lower 60% of the image."""
        top = int(np.ceil(0.4 * self.height))
        return np.round(np.linspace(top, self.height - 1, self.row_anchors)).astype(np.int64)

    @property
    def background(self):
        return self.grid_cells

    @property
    def logits_shape(self):
        return (self.grid_cells + 1, self.row_anchors, self.lanes)

    def x_to_cell(self, x):
        """Quantize pixel x-positions to cells; positions outside [0, W) become background."""
        x = np.asarray(x, dtype=np.float64)
        inside = np.isfinite(x) & (x >= 0) & (x < self.width)
        cells = np.floor(np.where(inside, x, 0) / self.width * self.grid_cells).astype(np.int64)
        return np.where(inside, np.minimum(cells, self.grid_cells - 1), self.background)

    def cell_to_x(self, cells):
        """Cell centres in pixels; NaN for the background cell."""
        cells = np.asarray(cells)
        x = (cells + 0.5) / self.grid_cells * self.width
        return np.where(cells == self.background, np.nan, x)


def _check_logits(logits, grid):
    if tuple(logits.shape[-3:]) != grid.logits_shape:
        raise DimensionError(
            f"logits trailing shape {tuple(logits.shape[-3:])} != grid {grid.logits_shape}")


def decode_cells(logits, grid):
    """Argmax cell per (anchor, lane). Ties resolve to the lower cell index."""
    _check_logits(logits, grid)
    return logits.argmax(axis=-3)


def decode(logits, grid):
    """Lane x-positions per (anchor, lane); NaN marks an absent lane point."""
    return grid.cell_to_x(decode_cells(logits, grid))


def validate_label(cells, grid):
    cells = np.asarray(cells)
    if tuple(cells.shape[-2:]) != (grid.row_anchors, grid.lanes):
        raise DimensionError(
            f"label shape {cells.shape} != ({grid.row_anchors}, {grid.lanes})")
    if cells.size and (cells.min() < 0 or cells.max() > grid.grid_cells):
        raise ValidationError(f"label cells must lie in [0, {grid.grid_cells}]")
    return cells


def pretrain_loss(logits, cells, grid):
    """Mean cross-entropy over all (sample, anchor, lane) groups.

    Returns ``(loss, dlogits)``. Accepts a single image ``(C+1, h, L)`` or a
    batch ``(N, C+1, h, L)`` with labels of matching leading shape.
    """
    _check_logits(logits, grid)
    cells = validate_label(cells, grid)
    if cells.shape != logits.shape[:-3] + logits.shape[-2:]:
        raise DimensionError(f"label shape {cells.shape} does not match logits {logits.shape}")
    axis = logits.ndim - 3
    logp = K.log_group_softmax(logits, axis=axis)
    groups = cells.size
    picked = np.take_along_axis(logp, np.expand_dims(cells, axis), axis=axis)
    loss = -picked.sum() / groups
    grad = np.exp(logp)
    onehot = np.zeros_like(grad)
    np.put_along_axis(onehot, np.expand_dims(cells, axis), 1, axis=axis)
    grad = (grad - onehot) / groups
    return float(loss), grad.astype(logits.dtype, copy=False)


def accuracy(pred_x, cells, grid, tolerance=1):
    """Fraction of (anchor, lane) groups predicted correctly.

    A labelled point is a hit when a prediction exists within ``tolerance``
    cells; an absent label point is a hit when the prediction is absent too.
    ``pred_x`` comes from ``decode`` (NaN = absent).
    """
    cells = validate_label(cells, grid)
    pred_x = np.asarray(pred_x, dtype=np.float64)
    if pred_x.shape != cells.shape:
        raise DimensionError(f"prediction shape {pred_x.shape} != label shape {cells.shape}")
    pred = grid.x_to_cell(pred_x)
    return cell_accuracy(pred, cells, grid, tolerance)


def cell_accuracy(pred_cells, cells, grid, tolerance=1):
    """``accuracy`` on already-decoded cells; reduces over the last two axes."""
    bg = grid.background
    present = cells != bg
    pred_present = pred_cells != bg
    hit = np.where(present,
                   pred_present & (np.abs(pred_cells - cells) <= tolerance),
                   ~pred_present)
    return hit.mean(axis=(-2, -1))
