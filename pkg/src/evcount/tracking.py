"""IoU box matching between consecutive frames and count-line crossing.

An object is counted on a line when its box centre row moves from strictly
above the line to on-or-below it between two matched frames
(``prev < line <= curr``). Each object can add at most one to each line; the
reported count is the maximum over the three lines.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

from .detection import BoundingBox, box_center_y


def _overlap(a: BoundingBox, b: BoundingBox) -> tuple[int, int]:
    """(intersection, union) pixel counts."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min) + 1
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min) + 1
    inter = iw * ih if iw > 0 and ih > 0 else 0
    return inter, a.area + b.area - inter


def iou(a: BoundingBox, b: BoundingBox) -> Fraction:
    """Jaccard index of the two inclusive pixel rectangles, as an exact fraction."""
    inter, union = _overlap(a, b)
    return Fraction(inter, union)


@dataclass(frozen=True)
class TrackerParams:
    iou_threshold: float = 0.1
    max_missed_frames: int = 0

    def __post_init__(self):
        if not 0 < self.iou_threshold < 1:
            raise ValueError("iou_threshold must lie in (0, 1)")
        if self.max_missed_frames < 0:
            raise ValueError("max_missed_frames must be >= 0")


@dataclass
class TrackedObject:
    id: int
    box: BoundingBox
    last_center_y: float
    last_frame: int
    crossed: list[bool] = field(default_factory=lambda: [False, False, False])
    missed: int = 0


@dataclass
class CountLines:
    lines: tuple[int, int, int]
    per_line_counts: list[int] = field(default_factory=lambda: [0, 0, 0])

    def __post_init__(self):
        self.lines = tuple(int(v) for v in self.lines)
        if len(self.lines) != 3 or not self.lines[0] < self.lines[1] < self.lines[2]:
            raise ValueError(f"need three strictly increasing count lines, got {self.lines}")
        if self.lines[0] < 0:
            raise ValueError("count lines must be non-negative rows")

    @classmethod
    def default(cls, height: int) -> "CountLines":
        """Lines at 40 %, 50 % and 60 % of the frame height."""
        return cls((height * 2 // 5, height // 2, height * 3 // 5))

    def check_height(self, height: int) -> None:
        if self.lines[2] >= height:
            raise ValueError(f"count line {self.lines[2]} outside a frame of height {height}")


@dataclass
class MatchedPair:
    obj: TrackedObject
    prev_center_y: float
    curr_center_y: float


@dataclass
class MatchResult:
    matched: list[MatchedPair]
    new: list[TrackedObject]
    expired: list[TrackedObject]


class IdSource:
    def __init__(self, start: int = 1):
        self.next = start

    def __call__(self) -> int:
        i = self.next
        self.next += 1
        return i


def match_boxes(
    prev: Sequence[TrackedObject],
    curr: Sequence[BoundingBox],
    params: TrackerParams | None = None,
    frame_index: int = 0,
    new_id: IdSource | None = None,
) -> MatchResult:
    """Greedy one-to-one assignment in descending IoU order.

    Only pairs with IoU strictly above the threshold are eligible; ties are
    broken by object order, then box order. Matched objects are updated in
    place. Unmatched objects accumulate a miss and expire once they have
    missed more than ``max_missed_frames`` frames.
    """
    params = params or TrackerParams()
    new_id = new_id or IdSource()
    # exact test inter / union > threshold, in integers
    thr = Fraction(params.iou_threshold)
    tn, td = thr.numerator, thr.denominator
    candidates = []
    for i, obj in enumerate(prev):
        for j, box in enumerate(curr):
            inter, union = _overlap(obj.box, box)
            if inter * td > tn * union:
                candidates.append((-Fraction(inter, union), i, j))
    candidates.sort()

    used_obj: set[int] = set()
    used_box: set[int] = set()
    matched = []
    for _, i, j in candidates:
        if i in used_obj or j in used_box:
            continue
        used_obj.add(i)
        used_box.add(j)
        obj = prev[i]
        cy = box_center_y(curr[j])
        matched.append(MatchedPair(obj, obj.last_center_y, cy))
        obj.box = curr[j]
        obj.last_center_y = cy
        obj.last_frame = frame_index
        obj.missed = 0

    expired = []
    for i, obj in enumerate(prev):
        if i in used_obj:
            continue
        obj.missed += 1
        if obj.missed > params.max_missed_frames:
            expired.append(obj)

    new = [
        TrackedObject(new_id(), box, box_center_y(box), frame_index)
        for j, box in enumerate(curr)
        if j not in used_box
    ]
    return MatchResult(matched, new, expired)


def update_counts(pairs: Sequence[MatchedPair], lines: CountLines) -> CountLines:
    """Add downward crossings to ``lines`` (in place) and return it."""
    for pair in pairs:
        crossed = pair.obj.crossed
        for i, row in enumerate(lines.lines):
            if not crossed[i] and pair.prev_center_y < row <= pair.curr_center_y:
                lines.per_line_counts[i] += 1
                crossed[i] = True
    return lines


def frame_count(lines: CountLines) -> int:
    return max(lines.per_line_counts)


class Tracker:
    """Frame-by-frame tracker holding the live objects and the count lines."""

    def __init__(self, lines: CountLines, params: TrackerParams | None = None):
        self.lines = lines
        self.params = params or TrackerParams()
        self.objects: list[TrackedObject] = []
        self.new_id = IdSource()
        self.last_frame: int | None = None

    @property
    def count(self) -> int:
        return frame_count(self.lines)

    def update(self, frame_index: int, boxes: Sequence[BoundingBox]) -> int:
        if self.last_frame is not None and frame_index != self.last_frame + 1:
            raise ValueError(f"frames must arrive consecutively ({self.last_frame} -> {frame_index})")
        self.last_frame = frame_index
        if not self.objects and not boxes:
            return self.count
        result = match_boxes(self.objects, boxes, self.params, frame_index, self.new_id)
        update_counts(result.matched, self.lines)
        gone = {id(o) for o in result.expired}
        self.objects = [o for o in self.objects if id(o) not in gone] + result.new
        return self.count
