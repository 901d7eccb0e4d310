"""Online strength scheduler driven by the smoothed training-loss trend.

Each iteration the raw mini-batch loss is pushed into a buffer, smoothed by a
normalized Gaussian window, and the backward difference of the smoothed loss
moves the dynamic factor ``s`` by one step: up when the loss falls (or holds),
down when it rises. ``s`` never goes below zero.
"""

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Iterable, List, Optional, Sequence

import numpy as np

from .errors import ConfigError

DEFAULT_FILTER_LENGTH = 501
DEFAULT_SIGMA = 0.4


def gaussian_window(N: int, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """N+1 Gaussian weights centred on N/2 with std ``sigma * N / 2``, summing to 1."""
    if not isinstance(N, (int, np.integer)) or N < 2 or N % 2:
        raise ValueError(f"gaussian_window: N must be an even integer >= 2, got {N!r}")
    if not sigma > 0:
        raise ValueError(f"gaussian_window: sigma must be positive, got {sigma!r}")
    half = N / 2
    n = np.arange(N + 1)
    w = np.exp(-0.5 * ((n - half) / (sigma * half)) ** 2)
    w = w / w.sum()
    # exact mirror symmetry, independent of summation rounding
    return 0.5 * (w + w[::-1])


def window_for_length(filter_length: int, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Window of ``filter_length`` taps; length 1 means no smoothing."""
    if filter_length == 1:
        return np.ones(1)
    if filter_length < 3 or filter_length % 2 == 0:
        raise ValueError(f"filter length must be 1 or an odd number >= 3, got {filter_length}")
    return gaussian_window(filter_length - 1, sigma)


def filtered_loss(buffer: Sequence[float], window: Sequence[float]) -> float:
    """Weighted sum of recent losses, newest first against ``window[0]``.

    ``buffer`` is ordered oldest to newest. With fewer losses than taps the
    window is cut to the available history and renormalized.
    """
    k = len(buffer)
    if k == 0:
        raise ValueError("filtered_loss: empty loss buffer")
    w = np.asarray(window, dtype=np.float64)
    k = min(k, len(w))
    recent = np.asarray(buffer, dtype=np.float64)[::-1][:k]
    w = w[:k]
    # centred on the newest loss so a constant history filters to itself exactly
    return float(recent[0] + np.dot(w, recent - recent[0]) / w.sum())


@dataclass
class ControllerState:
    s: float = 0.0
    delta_s: float = 0.0003
    window: np.ndarray = field(default_factory=lambda: gaussian_window(DEFAULT_FILTER_LENGTH - 1))
    sigma: float = DEFAULT_SIGMA
    buffer: Deque[float] = None
    prev_filtered: Optional[float] = None
    iteration: int = 0
    last_filtered: Optional[float] = None
    last_diff: Optional[float] = None
    rejected: int = 0

    def __post_init__(self):
        self.window = np.asarray(self.window, dtype=np.float64)
        if self.buffer is None:
            self.buffer = deque(maxlen=len(self.window))
        if self.delta_s < 0:
            raise ValueError("ControllerState: delta_s must be non-negative")
        if self.s < 0:
            raise ValueError("ControllerState: s must be non-negative")

    @classmethod
    def create(cls, delta_s=0.0003, filter_length=DEFAULT_FILTER_LENGTH, sigma=DEFAULT_SIGMA, s0=0.0):
        return cls(s=s0, delta_s=delta_s, window=window_for_length(filter_length, sigma), sigma=sigma)

    @property
    def filter_length(self):
        return len(self.window)

    def step(self, loss: float) -> "ControllerState":
        """Consume one raw loss; the new ``s`` applies to the next iteration."""
        if not math.isfinite(loss):
            self.rejected += 1
            return self
        self.buffer.append(float(loss))
        current = filtered_loss(self.buffer, self.window)
        self.last_diff = None
        if self.prev_filtered is not None:
            diff = current - self.prev_filtered
            self.last_diff = diff
            self.s = self.s + self.delta_s if diff <= 0 else max(self.s - self.delta_s, 0.0)
        self.prev_filtered = current
        self.last_filtered = current
        self.iteration += 1
        return self


def controller_step(state: ControllerState, loss: float) -> ControllerState:
    return state.step(loss)


@dataclass(frozen=True)
class ScheduleSpec:
    """Where ``s`` comes from: ``dynamic``, ``fixed``, ``linear`` or ``none``."""

    kind: str = "dynamic"
    x: float = 0.0
    total_iterations: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("dynamic", "fixed", "linear", "none"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.kind in ("fixed", "linear") and not self.x > 0:
            raise ConfigError(f"{self.kind} schedule needs a positive target, got {self.x}")

    @classmethod
    def parse(cls, text: str, total_iterations: Optional[int] = None) -> "ScheduleSpec":
        """Parse ``dynamic``, ``none``, ``fix:x`` or ``linear:x``."""
        text = text.strip().lower()
        if text in ("dynamic", "none"):
            return cls(text, 0.0, total_iterations)
        name, _, value = text.partition(":")
        kinds = {"fix": "fixed", "fixed": "fixed", "linear": "linear"}
        if name not in kinds or not value:
            raise ConfigError(f"cannot parse schedule {text!r}")
        try:
            x = float(value)
        except ValueError:
            raise ConfigError(f"cannot parse schedule {text!r}") from None
        return cls(kinds[name], x, total_iterations)

    @property
    def label(self) -> str:
        if self.kind == "fixed":
            return f"Fix-{self.x:g}"
        if self.kind == "linear":
            return f"Linear-{self.x:g}"
        return "Dynamic" if self.kind == "dynamic" else "Baseline"

    def with_total(self, total_iterations: int) -> "ScheduleSpec":
        return ScheduleSpec(self.kind, self.x, total_iterations)


def schedule_value(spec: ScheduleSpec, state: Optional[ControllerState], iteration: int) -> float:
    if spec.kind == "dynamic":
        if state is None:
            raise ValueError("dynamic schedule needs a controller state")
        return state.s
    if spec.kind == "fixed":
        return spec.x
    if spec.kind == "linear":
        if not spec.total_iterations:
            raise ValueError("linear schedule needs total_iterations")
        if not 0 <= iteration <= spec.total_iterations:
            raise ValueError(f"iteration {iteration} outside [0, {spec.total_iterations}]")
        return spec.x * iteration / spec.total_iterations
    if spec.kind == "none":
        return 0.0
    raise ValueError(f"unknown schedule kind {spec.kind!r}")


def replay_trace(losses: Iterable[float], spec: ScheduleSpec = ScheduleSpec("dynamic"),
                 delta_s: float = 0.0003, filter_length: int = DEFAULT_FILTER_LENGTH,
                 sigma: float = DEFAULT_SIGMA, s0: float = 0.0) -> List[float]:
    """``s`` after each loss of a recorded trace. Pure in its arguments."""
    losses = [float(v) for v in losses]
    if spec.kind != "dynamic":
        total = spec.total_iterations or len(losses)
        spec = spec.with_total(total)
        return [schedule_value(spec, None, min(i + 1, total)) for i in range(len(losses))]
    state = ControllerState.create(delta_s, filter_length, sigma, s0)
    out = []
    for v in losses:
        state.step(v)
        out.append(state.s)
    return out


def read_trace(path) -> List[float]:
    with open(path) as fh:
        return [float(line) for line in fh if line.strip()]


def write_trace(path, values: Iterable[float]) -> None:
    with open(path, "w") as fh:
        for v in values:
            fh.write(f"{float(v)!r}\n")
