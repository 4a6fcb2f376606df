"""Synthetic feeder + falling grains + event sensor, with ground truth.

Grains are axis-aligned squares released at rest from the slot row and
falling straight down. Kinematics use semi-implicit Euler per micro-step
(``v += g dt; y += v dt``), evaluated in closed form over a chunk of steps.

Per micro-step and per grain the sensor model emits

* a positive event at every pixel newly covered by the silhouette and a
  negative event at every pixel newly uncovered, each with probability
  ``efficiency``;
* texture events at pixels covered both before and after the step, with
  probability ``texture_density * displacement_px`` (capped at 1) and random
  polarity. Without them the positive events of consecutive frames would be
  disjoint leading-edge bands that never overlap;
* background noise: Poisson in space and time, random polarity.

Timestamps are uniform inside their micro-step. All randomness comes from a
single seeded generator, so a fixed seed, actuation trace and chunking give
bit-identical output.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .events import EventStream, SensorGeometry

US_PER_S = 1_000_000


@dataclass(frozen=True)
class SimParams:
    geometry: SensorGeometry = field(default_factory=SensorGeometry)
    emission_rate: float = 40.0  # grains/s at on_fraction = 1
    grain_size: tuple[int, int] = (6, 14)  # inclusive range of square edge, px
    pixels_per_meter: float = 2000.0
    gravity: float = 9.81  # m/s^2
    noise_rate: float = 0.5  # events / pixel / s
    efficiency: float = 0.9
    texture_density: float = 1.0  # events / pixel / px travelled
    micro_step_us: int = 200
    slot_row: int = 0  # grain top row at release
    slot_x: tuple[int, int] | None = None  # column range [lo, hi); default: width minus 64 px margins
    distinct_columns: bool = False
    reference_row: int | None = None  # default: height // 2
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.grain_size
        if not 1 <= lo <= hi:
            raise ValueError("grain_size must be (min, max) with 1 <= min <= max")
        if self.micro_step_us <= 0:
            raise ValueError("micro_step_us must be > 0")
        if self.emission_rate < 0 or self.noise_rate < 0:
            raise ValueError("rates must be non-negative")
        if not 0 <= self.efficiency <= 1:
            raise ValueError("efficiency must lie in [0, 1]")
        xl, xr = self.slot_range
        if xr - xl < hi:
            raise ValueError("slot is narrower than the largest grain")

    @property
    def slot_range(self) -> tuple[int, int]:
        if self.slot_x is not None:
            return self.slot_x
        margin = min(64, self.geometry.width // 8)
        return margin, self.geometry.width - margin

    @property
    def ref_row(self) -> int:
        return self.geometry.height // 2 if self.reference_row is None else self.reference_row

    @property
    def accel_px(self) -> float:
        """Gravity in px/s^2."""
        return self.gravity * self.pixels_per_meter


@dataclass
class Grain:
    id: int
    x: int  # left column
    size: int
    y: float  # top edge, px
    v: float  # px/s, downward
    spawn_t: int
    cross_t: int | None = None  # centre passed the reference row
    exit_t: int | None = None


def _expand(starts: np.ndarray, ends: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flatten half-open integer ranges: (range index, value) for every member."""
    lengths = np.maximum(ends - starts, 0)
    idx = np.repeat(np.arange(len(starts)), lengths)
    if not len(idx):
        return idx, idx
    offsets = np.cumsum(lengths) - lengths
    return idx, starts[idx] + (np.arange(len(idx)) - offsets[idx])


def _stable_order(offsets: np.ndarray, span: int) -> np.ndarray:
    """Same permutation as a stable argsort of ``offsets`` (all in ``[0, span)``)."""
    n = len(offsets)
    if span * n >= 2**62:
        return np.argsort(offsets, kind="stable")
    # unique keys, so the fast unstable sort is deterministic
    return np.sort(offsets * n + np.arange(n)) % n


class GrainScene:
    """Simulator state. Advance with :meth:`step` or :meth:`advance`."""

    def __init__(self, params: SimParams | None = None):
        self.params = params or SimParams()
        self.rng = np.random.default_rng(self.params.seed)
        self.t_us = 0
        self.in_flight: list[Grain] = []
        self.exited: list[Grain] = []
        self._next_id = 1
        self._next_column = 0

    # ------------------------------------------------------------ bookkeeping

    @property
    def ground_truth(self) -> int:
        """Grains whose centre has passed the reference row."""
        return sum(g.cross_t is not None for g in self.exited) + sum(g.cross_t is not None for g in self.in_flight)

    @property
    def spawned(self) -> int:
        return self._next_id - 1

    def grains(self) -> list[Grain]:
        return sorted(self.exited + self.in_flight, key=lambda g: g.id)

    def inject_grain(self, x: int, size: int, y: float | None = None, v: float = 0.0) -> Grain:
        g = Grain(self._next_id, int(x), int(size), float(self.params.slot_row if y is None else y), float(v), self.t_us)
        self._next_id += 1
        self.in_flight.append(g)
        return g

    def write_ground_truth(self, path: str | os.PathLike) -> None:
        """CSV ``grain_id,spawn_t_us,exit_t_us`` for every grain that has left the frame."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["grain_id", "spawn_t_us", "exit_t_us"])
            for g in sorted(self.exited, key=lambda g: g.id):
                w.writerow([g.id, g.spawn_t, g.exit_t])

    # ------------------------------------------------------------ dynamics

    def step(self, on_fraction: float, dt_us: int | None = None) -> EventStream:
        """One micro-step of ``dt_us`` (default ``micro_step_us``)."""
        return self._run(1, dt_us or self.params.micro_step_us, on_fraction)

    def advance(self, duration_us: int, on_fraction: float) -> EventStream:
        """``duration_us / micro_step_us`` micro-steps at constant actuation."""
        dt = self.params.micro_step_us
        n, rem = divmod(int(duration_us), dt)
        if rem:
            raise ValueError(f"duration {duration_us} us is not a multiple of the {dt} us micro-step")
        if n == 0:
            return EventStream.empty(self.params.geometry)
        return self._run(n, dt, on_fraction)

    def drain(self, max_duration_us: int = 5 * US_PER_S, chunk_us: int = 10_000) -> list[EventStream]:
        """Run with the feeder off until every grain has left the frame."""
        out = []
        spent = 0
        while self.in_flight and spent < max_duration_us:
            out.append(self.advance(chunk_us, 0.0))
            spent += chunk_us
        return out

    def _spawn(self, n_steps: int, dt_us: int, on_fraction: float) -> list[tuple[int, Grain]]:
        p = self.params
        lam = p.emission_rate * min(max(on_fraction, 0.0), 1.0) * n_steps * dt_us / US_PER_S
        count = int(self.rng.poisson(lam)) if lam > 0 else 0
        if not count:
            return []
        steps = np.sort(self.rng.integers(0, n_steps, count))
        sizes = self.rng.integers(p.grain_size[0], p.grain_size[1] + 1, count)
        xl, xr = p.slot_range
        if p.distinct_columns:
            pitch = p.grain_size[1] + 2
            n_cols = max((xr - xl) // pitch, 1)
            xs = []
            for _ in range(count):
                xs.append(xl + (self._next_column % n_cols) * pitch)
                self._next_column += 1
            xs = np.array(xs)
        else:
            xs = xl + np.floor(self.rng.random(count) * (xr - xl - sizes + 1)).astype(np.int64)
        out = []
        for k, s, x in zip(steps.tolist(), sizes.tolist(), xs.tolist()):
            g = Grain(self._next_id, x, s, float(p.slot_row), 0.0, self.t_us + k * dt_us)
            self._next_id += 1
            out.append((k, g))
        return out

    def _grain_events(self, g: Grain, k0: int, n_steps: int, dt_us: int) -> list[np.ndarray] | None:
        """Advance ``g`` from step ``k0`` to the chunk end; return its event columns."""
        p = self.params
        W, H = p.geometry.width, p.geometry.height
        dt = dt_us / US_PER_S
        acc = p.accel_px
        j = np.arange(n_steps - k0 + 1, dtype=np.float64)
        v = g.v + j * acc * dt
        y = g.y + dt * (j * g.v + acc * dt * j * (j + 1) / 2)
        rows = np.floor(y).astype(np.int64)

        gone = np.flatnonzero(rows >= H)
        last = int(gone[0]) if len(gone) else len(j) - 1
        if g.cross_t is None:
            c = y[: last + 1] + g.size / 2
            hit = np.flatnonzero((c[1:] >= p.ref_row) & (c[:-1] < p.ref_row))
            if len(hit):
                g.cross_t = self.t_us + (k0 + int(hit[0]) + 1) * dt_us
        t_base = self.t_us + (k0 + np.arange(last)) * dt_us  # start of each transition's step

        a, b = rows[:last], rows[1 : last + 1]
        disp = y[1 : last + 1] - y[:last]
        s = g.size
        cols = np.arange(max(g.x, 0), min(g.x + s, W))
        if len(gone):
            g.exit_t = self.t_us + (k0 + last) * dt_us
        g.y, g.v = float(y[last]), float(v[last])
        if not len(cols) or last == 0:
            return None

        def clip(lo, hi):
            return np.clip(lo, 0, H), np.clip(hi, 0, H)

        parts = []
        # newly covered / uncovered rows only exist when the top row moved
        moved = b > a
        cov_lo, cov_hi = clip(np.maximum(a + s, b), b + s)
        unc_lo, unc_hi = clip(a, np.minimum(b, a + s))
        int_lo, int_hi = clip(b, a + s)
        for lo, hi, kind in (
            (np.where(moved, cov_lo, 0), np.where(moved, cov_hi, 0), 1),
            (np.where(moved, unc_lo, 0), np.where(moved, unc_hi, 0), 0),
            (np.where(disp > 0, int_lo, 0), np.where(disp > 0, int_hi, 0), 2),
        ):
            step_idx, row = _expand(lo, hi)
            if not len(row):
                continue
            step_idx = np.repeat(step_idx, len(cols))
            yy = np.repeat(row, len(cols))
            xx = np.tile(cols, len(row))
            if kind == 2:
                prob = np.minimum(p.texture_density * disp[step_idx], 1.0)
                keep = self.rng.random(len(yy)) < prob
                pol = (self.rng.random(len(yy)) < 0.5).astype(np.uint8)
            else:
                keep = self.rng.random(len(yy)) < p.efficiency
                pol = np.full(len(yy), kind, dtype=np.uint8)
            step_idx, yy, xx, pol = step_idx[keep], yy[keep], xx[keep], pol[keep]
            tt = t_base[step_idx] + self.rng.integers(0, dt_us, len(step_idx))
            parts.append((tt, xx, yy, pol))
        if not parts:
            return None
        return [np.concatenate(c) for c in zip(*parts)]

    def _run(self, n_steps: int, dt_us: int, on_fraction: float) -> EventStream:
        p = self.params
        new = self._spawn(n_steps, dt_us, on_fraction)
        schedule = [(0, g) for g in self.in_flight] + new
        cols: list[list[np.ndarray]] = []
        still = []
        for k0, g in schedule:
            ev = self._grain_events(g, k0, n_steps, dt_us)
            if ev is not None:
                cols.append(ev)
            (self.exited if g.exit_t is not None else still).append(g)
        self.in_flight = still

        t0 = self.t_us
        W, H = p.geometry.width, p.geometry.height
        lam = p.noise_rate * W * H * n_steps * dt_us / US_PER_S
        n_noise = int(self.rng.poisson(lam)) if lam > 0 else 0
        if n_noise:
            cols.append([
                self.t_us + self.rng.integers(0, n_steps * dt_us, n_noise),
                self.rng.integers(0, W, n_noise),
                self.rng.integers(0, H, n_noise),
                self.rng.integers(0, 2, n_noise).astype(np.uint8),
            ])
        self.t_us += n_steps * dt_us
        if not cols:
            return EventStream.empty(p.geometry)
        t, x, y, pol = (np.concatenate(c) for c in zip(*cols))
        order = _stable_order(t - t0, n_steps * dt_us)
        return EventStream(t[order], x[order], y[order], pol[order], p.geometry)


def generate(params: SimParams, duration_s: float, on_fraction: float,
             sink: Callable[[EventStream], None] | None = None, drain: bool = True,
             chunk_us: int = 100_000) -> GrainScene:
    """Constant-actuation recording; chunks go to ``sink``. Returns the final scene."""
    scene = GrainScene(params)
    total = int(round(duration_s * US_PER_S))
    done = 0
    while done < total:
        step = min(chunk_us, total - done)
        ev = scene.advance(step, on_fraction)
        if sink is not None:
            sink(ev)
        done += step
    if drain:
        for ev in scene.drain():
            if sink is not None:
                sink(ev)
    return scene


def on_fraction_for_rate(params: SimParams, grains_per_min: float) -> float:
    """Constant duty that yields ``grains_per_min`` on average."""
    if params.emission_rate <= 0:
        raise ValueError("emission rate is zero")
    return min(grains_per_min / 60.0 / params.emission_rate, 1.0)
