"""Streaming driver with per-frame deadline accounting, reports and config files."""

import csv
import logging
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .adapt import AdaptState, stream_adapt
from .errors import ValidationError
from .lane import RowAnchorGrid, cell_accuracy, decode_cells
from .nn import ADAPT
from .train import evaluate

log = logging.getLogger(__name__)

STREAM_COLUMNS = ("frame_idx", "entropy", "running_accuracy", "infer_ms", "adapt_ms",
                  "total_ms", "deadline_miss")


class UsageError(ValidationError):
    """Bad command-line or config-file input."""


@dataclass(frozen=True)
class DeadlineBudget:
    fps: float = 30.0

    def __post_init__(self):
        if not self.fps > 0:
            raise ValidationError("fps must be positive")

    @property
    def deadline_ms(self):
        return 1000.0 / self.fps

    def missed(self, total_ms):
        # finishing exactly on the deadline counts as met
        return total_ms > self.deadline_ms


class FakeClock:
    """Deterministic nanosecond clock for tests.

    Either advances by ``step_ns`` on every read, or replays ``ticks``.
    """

    def __init__(self, step_ns=None, ticks=None):
        if (step_ns is None) == (ticks is None):
            raise ValueError("give exactly one of step_ns or ticks")
        self._step = step_ns
        self._ticks = iter(ticks) if ticks is not None else None
        self._now = 0

    def __call__(self):
        if self._ticks is not None:
            return next(self._ticks)
        self._now += self._step
        return self._now


@dataclass
class FrameRecord:
    frame_idx: int
    entropy: float
    running_accuracy: float
    infer_ms: float
    adapt_ms: float
    total_ms: float
    deadline_miss: bool


@dataclass
class StreamReport:
    records: list = field(default_factory=list)
    budget: DeadlineBudget = field(default_factory=DeadlineBudget)
    adapt_steps: int = 0
    errors: int = 0
    posthoc_accuracy: float = None
    frozen_accuracy: float = None

    def accuracies(self):
        return np.array([r.running_accuracy for r in self.records])

    def window_means(self, window=100):
        acc = self.accuracies()
        w = min(window, len(acc))
        return float(acc[:w].mean()), float(acc[-w:].mean())

    def summary(self, window=100):
        total = np.array([r.total_ms for r in self.records])
        initial, final = self.window_means(window)
        return {
            "frames": len(self.records),
            "deadline_ms": self.budget.deadline_ms,
            "mean_ms": float(total.mean()),
            "median_ms": float(np.median(total)),
            "p99_ms": float(np.percentile(total, 99)),
            "miss_rate": float(np.mean([r.deadline_miss for r in self.records])),
            "initial_accuracy": initial,
            "final_accuracy": final,
            "posthoc_accuracy": self.posthoc_accuracy,
            "frozen_accuracy": self.frozen_accuracy,
            "adapt_steps": self.adapt_steps,
            "errors": self.errors,
        }


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return f"{v:.6g}"
    return str(v)


def write_rows(path, columns, rows):
    """CSV with a header row; floats keep 6 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c] if isinstance(row, dict) else getattr(row, c))
                        for c in columns])


def write_stream_csv(report, path):
    write_rows(path, STREAM_COLUMNS, report.records)


def run_stream(model, frames, config, budget=None, clock=time.perf_counter_ns,
               posthoc=False, frozen_baseline=False):
    """Feed ``frames`` (objects with ``image`` and ``label``) through ``stream_adapt``.

    Labels are read here only to score each prediction; the adaptation path
    receives images alone. ``model`` is adapted in place.
    """
    budget = budget or DeadlineBudget()
    frames = list(frames)
    if not frames:
        raise UsageError("stream has no frames")
    h, w = frames[0].image.shape[1:]
    out_shape = model.output_shape
    grid = RowAnchorGrid(out_shape[0] - 1, out_shape[1], out_shape[2], w, h)

    report = StreamReport(budget=budget)
    if frozen_baseline:
        images = np.stack([f.image for f in frames])
        labels = np.stack([f.label for f in frames])
        report.frozen_accuracy = float(evaluate(model, images, labels, grid).mean())

    state = AdaptState.create(model, config)
    for i, frame in enumerate(frames):
        step = stream_adapt(state, frame.image, config, clock=clock)
        if step.error:
            report.errors += 1
            log.warning("frame %d: adaptation failed: %s", i, step.error)
        report.adapt_steps += step.adapted
        acc = float(cell_accuracy(decode_cells(step.logits, grid), frame.label, grid))
        infer_ms = step.infer_ns / 1e6
        adapt_ms = step.adapt_ns / 1e6
        total_ms = (step.infer_ns + step.adapt_ns) / 1e6
        report.records.append(FrameRecord(i, step.entropy, acc, infer_ms, adapt_ms, total_ms,
                                          budget.missed(total_ms)))
    model.clear_cache()
    if posthoc:
        accs = [cell_accuracy(decode_cells(model.forward(f.image[None], ADAPT)[0], grid),
                              f.label, grid) for f in frames]
        model.clear_cache()
        report.posthoc_accuracy = float(np.mean(accs))
    return report


# --------------------------------------------------------------------------
# config files: "key = value" lines, '#' comments
# --------------------------------------------------------------------------

def parse_config(text, schema, optional=()):
    """Parse config text against ``schema`` (a dataclass type).

    Every dataclass field is required unless listed in ``optional``; extra
    optional string keys may be declared there too. Returns a dict of typed
    values.
    """
    types = {f.name: f.type for f in fields(schema)}
    extra = {name: str for name in optional if name not in types}
    allowed = {**types, **extra}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in allowed:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise UsageError(f"config line {lineno}: duplicate key {key!r}")
        typ = allowed[key]
        typ = {"int": int, "float": float, "str": str}.get(typ, typ)
        try:
            values[key] = typ(value)
        except ValueError:
            raise UsageError(f"config line {lineno}: {key} expects {typ.__name__}") from None
    for name in types:
        if name not in values and name not in optional:
            raise UsageError(f"missing config key {name!r}")
    return values
