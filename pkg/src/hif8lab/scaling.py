"""Per-tensor amax tracking and scale computation.

Every quantized tensor (a weight, an activation stream, or a gradient
stream) owns a `ScaleState` holding a ring buffer of observed per-step
maximum absolute values.  The scale applied before quantization is

    scale = max_val / amax_estimate

where the estimate comes from one of four algorithms:

* ``most_recent`` - last observed amax (one step of lag),
* ``exp_smooth``  - exponential moving average of observations,
* ``max``        - maximum over the last H observations (conservative:
  no value seen inside the window can saturate),
* ``current``    - this step's own amax (no lag, needs an extra pass).

The first three are delayed strategies (estimate uses only history);
``current`` is the current-scaling reference.  `ScaleManager` is the
global registry the training harness resets at the warmup boundary.
"""

import csv
import math
import os
import tempfile
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from .errors import ConfigError, DomainError, NoHistoryError, NonFiniteError, ParseError

__all__ = [
    "MostRecent",
    "ExpSmooth",
    "MaxWindow",
    "Current",
    "AmaxAlgo",
    "parse_algo",
    "algo_name",
    "ScaleState",
    "ScaleManager",
    "compute_scale",
    "TraceRow",
    "write_amax_trace",
    "read_amax_trace",
    "group_trace",
    "ROLES",
]

ROLES = ("weight", "activation", "gradient")


@dataclass(frozen=True)
class MostRecent:
    """Estimate = the last observed amax."""


@dataclass(frozen=True)
class ExpSmooth:
    """Estimate = running average: alpha * latest + (1 - alpha) * previous estimate."""

    alpha: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"exp_smooth alpha must lie in (0, 1), got {self.alpha}")


@dataclass(frozen=True)
class MaxWindow:
    """Estimate = max over the most recent `window` observations."""

    window: int

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError(f"max window must be a positive integer, got {self.window}")


@dataclass(frozen=True)
class Current:
    """Estimate = the current step's own amax (current scaling)."""


AmaxAlgo = Union[MostRecent, ExpSmooth, MaxWindow, Current]

_ALGO_NAMES = {MostRecent: "most_recent", ExpSmooth: "exp_smooth", MaxWindow: "max", Current: "current"}


def algo_name(algo: AmaxAlgo) -> str:
    return _ALGO_NAMES[type(algo)]


def parse_algo(name: str, *, alpha: float = 0.9, window: int | None = None,
               history_len: int | None = None) -> AmaxAlgo:
    """Build an algorithm from its config-file name.

    The ``max`` window defaults to the history length, which is how the
    reference configuration ties the two together.
    """
    name = name.strip().lower()
    if name == "most_recent":
        return MostRecent()
    if name == "exp_smooth":
        return ExpSmooth(alpha=alpha)
    if name == "max":
        w = window if window is not None else history_len
        if w is None:
            raise ConfigError("the max algorithm needs a window (or a history length)")
        return MaxWindow(window=w)
    if name == "current":
        return Current()
    raise ConfigError(f"unknown amax algorithm {name!r} "
                      "(expected most_recent, exp_smooth, max, or current)")


class ScaleState:
    """Amax history for one tensor: ring buffer, smoothing carry, step counter."""

    def __init__(self, algo: AmaxAlgo, capacity: int):
        if capacity < 1:
            raise ConfigError(f"history capacity must be positive, got {capacity}")
        if isinstance(algo, MaxWindow) and algo.window > capacity:
            raise ConfigError(
                f"max window {algo.window} exceeds history capacity {capacity}"
            )
        self.algo = algo
        self.capacity = capacity
        self.history: deque[float] = deque(maxlen=capacity)
        self.smooth_carry: float | None = None
        self.steps_observed = 0

    def observe(self, amax: float) -> None:
        """Append one observed amax; evicts the oldest entry at capacity."""
        amax = float(amax)
        if not math.isfinite(amax) or amax <= 0.0:
            raise NonFiniteError(f"observed amax must be positive and finite, got {amax}")
        self.history.append(amax)
        if isinstance(self.algo, ExpSmooth):
            if self.smooth_carry is None:
                self.smooth_carry = amax
            else:
                a = self.algo.alpha
                self.smooth_carry = a * amax + (1.0 - a) * self.smooth_carry
        self.steps_observed += 1

    def estimate(self, algo: AmaxAlgo | None = None, current_amax: float | None = None) -> float:
        """Estimate the tensor's amax under `algo` (default: the state's own).

        Delayed algorithms read only the history; `Current` returns the
        caller-supplied fresh amax.
        """
        algo = self.algo if algo is None else algo
        if isinstance(algo, Current):
            if current_amax is None:
                raise DomainError("current scaling needs the current step's amax")
            if not math.isfinite(current_amax) or current_amax <= 0.0:
                raise NonFiniteError(f"current amax must be positive and finite, got {current_amax}")
            return float(current_amax)
        if not self.history:
            raise NoHistoryError(
                "amax history is empty; run at least one observation step before "
                "estimating under a delayed algorithm"
            )
        if isinstance(algo, MostRecent):
            return self.history[-1]
        if isinstance(algo, ExpSmooth):
            if self.smooth_carry is not None and isinstance(self.algo, ExpSmooth):
                return self.smooth_carry
            # Estimating under exp_smooth on a state that did not maintain
            # the carry: rebuild it from the recorded history.
            carry = None
            for v in self.history:
                carry = v if carry is None else algo.alpha * v + (1.0 - algo.alpha) * carry
            return carry
        if isinstance(algo, MaxWindow):
            h = len(self.history)
            w = min(algo.window, h)
            return max(list(self.history)[h - w:])
        raise ConfigError(f"unknown amax algorithm object {algo!r}")

    def reset(self) -> None:
        self.history.clear()
        self.smooth_carry = None
        self.steps_observed = 0


class ScaleManager:
    """Registry of every ScaleState in a run, keyed by (layer id, role)."""

    def __init__(self):
        self._states: dict[tuple[str, str], ScaleState] = {}

    def state_for(self, layer_id: str, role: str, algo: AmaxAlgo, capacity: int) -> ScaleState:
        """Return the state for (layer_id, role), creating it on first use."""
        if role not in ROLES:
            raise ConfigError(f"unknown tensor role {role!r} (expected one of {ROLES})")
        key = (layer_id, role)
        if key not in self._states:
            self._states[key] = ScaleState(algo, capacity)
        return self._states[key]

    def states(self) -> dict[tuple[str, str], ScaleState]:
        return dict(self._states)

    def reset_all(self) -> None:
        """Empty every registered history (the warmup-boundary reset)."""
        for state in self._states.values():
            state.reset()


def compute_scale(amax_hat: float, max_val: float) -> float:
    """Scale mapping a tensor with the estimated amax into [-max_val, max_val].

    Returns max_val / amax_hat, adjusted downward by at most a couple of
    ulps so that `amax_hat * scale <= max_val` holds in float arithmetic.
    Without the adjustment the product overshoots max_val by one ulp for
    roughly one input in eight, which would break the hard no-saturation
    guarantee of the max-window and current-scaling strategies.
    """
    amax_hat = float(amax_hat)
    max_val = float(max_val)
    if not math.isfinite(amax_hat) or amax_hat <= 0.0:
        raise DomainError(f"amax estimate must be positive and finite, got {amax_hat}")
    if not math.isfinite(max_val) or max_val <= 0.0:
        raise DomainError(f"max_val must be positive and finite, got {max_val}")
    scale = max_val / amax_hat
    while amax_hat * scale > max_val:
        scale = math.nextafter(scale, 0.0)
    return scale


@dataclass(frozen=True)
class TraceRow:
    """One recorded observation: which tensor saw which amax at which step."""

    step: int
    layer_id: str
    role: str
    amax: float


_TRACE_HEADER = ["step", "layer_id", "role", "amax"]


def write_amax_trace(path: str, rows: Iterable[TraceRow]) -> None:
    """Write an amax trace CSV atomically (temp file + rename)."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(_TRACE_HEADER)
            for r in rows:
                writer.writerow([r.step, r.layer_id, r.role, repr(float(r.amax))])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_amax_trace(path: str) -> list[TraceRow]:
    """Parse an amax trace CSV; malformed rows report their line number."""
    rows: list[TraceRow] = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise ParseError("trace file is empty", row=1)
        if [h.strip() for h in header] != _TRACE_HEADER:
            raise ParseError(
                f"expected header {','.join(_TRACE_HEADER)!r}, got {','.join(header)!r}", row=1
            )
        for lineno, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != 4:
                raise ParseError(f"expected 4 fields, got {len(record)}", row=lineno)
            try:
                step = int(record[0])
                amax = float(record[3])
            except ValueError as exc:
                raise ParseError(str(exc), row=lineno) from exc
            role = record[2].strip()
            if role not in ROLES:
                raise ParseError(f"unknown role {role!r}", row=lineno)
            if not np.isfinite(amax) or amax <= 0.0:
                raise ParseError(f"amax must be positive and finite, got {amax}", row=lineno)
            rows.append(TraceRow(step=step, layer_id=record[1].strip(), role=role, amax=amax))
    return rows


def group_trace(rows: Iterable[TraceRow]) -> dict[tuple[str, str], list[TraceRow]]:
    """Group trace rows per (layer, role) series, ordered by step."""
    series: dict[tuple[str, str], list[TraceRow]] = {}
    for r in rows:
        series.setdefault((r.layer_id, r.role), []).append(r)
    for key in series:
        series[key].sort(key=lambda r: r.step)
    return series
