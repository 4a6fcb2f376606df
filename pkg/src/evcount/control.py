"""Discrete PID flow regulation, ticked once per second.

The error at tick ``n`` is cumulative: grains expected so far minus grains
counted so far (positive = deficit). The controller output is

    u_n = kp * e_n + ki * sum(e_1..e_n) + kd * (e_n - e_{n-1})

and is mapped to the fraction of the next second the feeder runs. There is
no anti-windup: under a permanent deficit the error sum grows without bound,
which is what the congestion latch in :class:`SafetyMonitor` is for.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence


@dataclass(frozen=True)
class PidController:
    kp: float = 2.0
    ki: float = 0.2
    kd: float = 0.1
    error_sum: float = 0.0
    prev_error: float = 0.0
    step: int = 0

    def reset(self) -> "PidController":
        return replace(self, error_sum=0.0, prev_error=0.0, step=0)


def pid_step(ctrl: PidController, error: float) -> tuple[PidController, float]:
    error_sum = ctrl.error_sum + error
    # correctly rounded sum of the three terms, so 2 + 0.2 + 0.1 gives 2.3
    u = math.fsum((ctrl.kp * error, ctrl.ki * error_sum, ctrl.kd * (error - ctrl.prev_error)))
    return replace(ctrl, error_sum=error_sum, prev_error=error, step=ctrl.step + 1), u


@dataclass(frozen=True)
class FlowSetpoint:
    rate: float  # grains per minute

    def __post_init__(self):
        if not (self.rate > 0 and math.isfinite(self.rate)):
            raise ValueError(f"setpoint must be a positive number of grains/min, got {self.rate}")

    def expected(self, elapsed_s: float) -> float:
        return self.rate * elapsed_s / 60.0


def compute_error(setpoint: FlowSetpoint, total_counted: int, elapsed_s: float) -> float:
    if elapsed_s < 1:
        raise ValueError("error is defined from the first 1 s tick on")
    return setpoint.expected(elapsed_s) - total_counted


@dataclass(frozen=True)
class ActuationCommand:
    on_fraction: float

    def __post_init__(self):
        if not 0.0 <= self.on_fraction <= 1.0:
            raise ValueError("on_fraction must lie in [0, 1]")


def to_actuation(u: float, scale: float = 0.01) -> ActuationCommand:
    if not math.isfinite(u):
        raise ValueError(f"control value must be finite, got {u}")
    return ActuationCommand(min(max(u * scale, 0.0), 1.0))


@dataclass(frozen=True)
class SafetyMonitor:
    congestion_window_s: int = 10
    min_expected_fraction: float = 0.1
    min_duty: float = 0.5
    tripped: bool = False

    def reset(self) -> "SafetyMonitor":
        return replace(self, tripped=False)

    def gate(self, cmd: ActuationCommand) -> ActuationCommand:
        return ActuationCommand(0.0) if self.tripped else cmd


def safety_check(
    monitor: SafetyMonitor,
    counts: Sequence[int],
    on_fractions: Sequence[float],
    setpoint: FlowSetpoint,
) -> SafetyMonitor:
    """Latch ``tripped`` on a jam or an empty hopper.

    ``counts`` and ``on_fractions`` are per-second histories (newest last).
    Over the last ``congestion_window_s`` seconds the monitor trips when the
    feeder ran at a mean duty of at least ``min_duty`` while fewer than
    ``min_expected_fraction`` of the expected grains were counted. With less
    history than one window nothing changes.
    """
    if monitor.tripped:
        return monitor
    w = monitor.congestion_window_s
    if len(counts) < w or len(on_fractions) < w:
        return monitor
    duty = sum(on_fractions[-w:]) / w
    counted = sum(counts[-w:])
    if duty >= monitor.min_duty and counted < monitor.min_expected_fraction * setpoint.expected(w):
        return replace(monitor, tripped=True)
    return monitor


@dataclass(frozen=True)
class TickRecord:
    second: int
    error: float
    u: float
    on_fraction: float
    tripped: bool


@dataclass
class FlowController:
    """The per-second loop: error -> PID -> actuation -> safety gate.

    ``tick`` is called at the end of second ``n`` (n = 1, 2, ...) with the
    running count total; the returned command applies to the following second.
    """

    setpoint: FlowSetpoint
    pid: PidController = field(default_factory=PidController)
    safety: SafetyMonitor = field(default_factory=SafetyMonitor)
    actuation_scale: float = 0.01
    trace: list[TickRecord] = field(default_factory=list)

    def __post_init__(self):
        w = self.safety.congestion_window_s
        self._counts: deque[int] = deque(maxlen=w)
        self._duty: deque[float] = deque(maxlen=w)
        self._last_total = 0
        self._applied = 0.0  # duty during the second that just ended

    def tick(self, second: int, total_counted: int) -> ActuationCommand:
        self._counts.append(total_counted - self._last_total)
        self._duty.append(self._applied)
        self._last_total = total_counted

        error = compute_error(self.setpoint, total_counted, second)
        self.pid, u = pid_step(self.pid, error)
        self.safety = safety_check(self.safety, list(self._counts), list(self._duty), self.setpoint)
        cmd = self.safety.gate(to_actuation(u, self.actuation_scale))
        self._applied = cmd.on_fraction
        self.trace.append(TickRecord(second, error, u, cmd.on_fraction, self.safety.tripped))
        return cmd
