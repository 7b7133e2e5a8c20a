"""Rail track centerline geometry.

A layout is an ordered chain of straight and circular-arc segments joined
with continuous position and heading. Superelevation (the outer-rail lift on
curves) is expressed as a roll of the local track plane about the forward
axis; the roll ramps linearly over 10 m at segment boundaries so that the
generated IMU rates stay bounded.

Axes: x/y in the horizontal plane, z up. Body frame: x forward, y left,
z up. Roll is a right-handed rotation about forward x, so positive roll
lifts the left rail; superelevated left-hand curves carry negative roll.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from railfuse.errors import InvalidLayoutError
from railfuse.geometry import quat_multiply, so3_exp

STANDARD_GAUGE = 1.435  # m
RAIL_HEAD_HEIGHT = 0.176  # m above the bed plane
ROLL_TRANSITION = 10.0  # m of linear roll blending at segment boundaries


@dataclass(frozen=True)
class StraightSegment:
    length: float


@dataclass(frozen=True)
class ArcSegment:
    radius: float
    angle: float  # signed, radians; positive turns left
    superelevation: float = 0.0  # m of outer-rail lift

    @property
    def length(self) -> float:
        return abs(self.radius * self.angle)


@dataclass(frozen=True)
class TrackLayout:
    segments: tuple
    gauge: float = STANDARD_GAUGE
    rail_height: float = RAIL_HEAD_HEIGHT

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    def validate(self):
        if not self.segments:
            raise InvalidLayoutError("layout has no segments")
        if self.gauge <= 0:
            raise InvalidLayoutError("gauge must be positive")
        for seg in self.segments:
            if isinstance(seg, StraightSegment):
                if seg.length <= 0:
                    raise InvalidLayoutError("straight segment length must be positive")
            elif isinstance(seg, ArcSegment):
                if seg.radius <= 100.0:
                    raise InvalidLayoutError("arc radius must exceed 100 m")
                if seg.angle == 0.0:
                    raise InvalidLayoutError("arc angle must be nonzero")
                if seg.superelevation < 0:
                    raise InvalidLayoutError("superelevation must be non-negative")
            else:
                raise InvalidLayoutError(f"unknown segment type {type(seg).__name__}")

    def extended(self, extra: float) -> "TrackLayout":
        """Layout with a trailing straight so world geometry outlives the run."""
        return TrackLayout(self.segments + (StraightSegment(extra),), self.gauge, self.rail_height)

    @property
    def total_length(self) -> float:
        return float(sum(seg.length for seg in self.segments))


class TrackMap:
    """Arc-length parameterized centerline: s -> (position, heading, roll)."""

    def __init__(self, layout: TrackLayout):
        layout.validate()
        self.layout = layout
        self.gauge = layout.gauge
        self.rail_height = layout.rail_height

        # chain segment start poses
        starts = [np.array([0.0, 0.0])]
        headings = [0.0]
        bounds = [0.0]
        for seg in layout.segments:
            x, y = starts[-1]
            psi = headings[-1]
            if isinstance(seg, StraightSegment):
                x += seg.length * np.cos(psi)
                y += seg.length * np.sin(psi)
            else:
                sgn = np.sign(seg.angle)
                r = seg.radius
                # circle center is 90° to the left (right for negative angle)
                cx = x - r * sgn * np.sin(psi)
                cy = y + r * sgn * np.cos(psi)
                # rotate start point about the center by the arc angle
                a0 = np.arctan2(y - cy, x - cx)
                a1 = a0 + seg.angle
                x = cx + r * np.cos(a1)
                y = cy + r * np.sin(a1)
                psi = psi + seg.angle
            starts.append(np.array([x, y]))
            headings.append(psi)
            bounds.append(bounds[-1] + seg.length)
        self._seg_start_xy = np.array(starts[:-1])
        self._seg_start_heading = np.array(headings[:-1])
        self._bounds = np.array(bounds)
        self.total_length = float(bounds[-1])

        # piecewise-linear roll profile over arc length
        knots_s = [0.0]
        knots_roll = [self._segment_roll(0)]
        for i in range(1, len(layout.segments)):
            sb = self._bounds[i]
            knots_s.extend([sb, min(sb + ROLL_TRANSITION, self._bounds[i + 1])])
            knots_roll.extend([self._segment_roll(i - 1), self._segment_roll(i)])
        knots_s.append(self.total_length)
        knots_roll.append(self._segment_roll(len(layout.segments) - 1))
        ks = np.array(knots_s)
        kr = np.array(knots_roll)
        order = np.argsort(ks, kind="stable")
        self._roll_s = ks[order]
        self._roll_v = kr[order]

    def _segment_roll(self, i: int) -> float:
        seg = self.layout.segments[i]
        if isinstance(seg, ArcSegment) and seg.superelevation > 0:
            # bank toward the curve center: a left turn (positive angle) lifts
            # the outer right rail, i.e. negative rotation about forward x
            return float(-np.sign(seg.angle) * np.arctan(seg.superelevation / self.gauge))
        return 0.0

    def roll(self, s):
        return np.interp(np.asarray(s, dtype=np.float64), self._roll_s, self._roll_v)

    def centerline(self, s):
        """Vectorized query: positions (N,3), headings (N,), rolls (N,)."""
        s = np.atleast_1d(np.asarray(s, dtype=np.float64))
        idx = np.clip(np.searchsorted(self._bounds, s, side="right") - 1, 0, len(self.layout.segments) - 1)
        ds = s - self._bounds[idx]
        x = np.empty_like(s)
        y = np.empty_like(s)
        psi = np.empty_like(s)
        for i, seg in enumerate(self.layout.segments):
            m = idx == i
            if not np.any(m):
                continue
            x0, y0 = self._seg_start_xy[i]
            p0 = self._seg_start_heading[i]
            if isinstance(seg, StraightSegment):
                x[m] = x0 + ds[m] * np.cos(p0)
                y[m] = y0 + ds[m] * np.sin(p0)
                psi[m] = p0
            else:
                sgn = np.sign(seg.angle)
                r = seg.radius
                cx = x0 - r * sgn * np.sin(p0)
                cy = y0 + r * sgn * np.cos(p0)
                a0 = np.arctan2(y0 - cy, x0 - cx)
                a = a0 + sgn * ds[m] / r
                x[m] = cx + r * np.cos(a)
                y[m] = cy + r * np.sin(a)
                psi[m] = p0 + sgn * ds[m] / r
        pos = np.stack([x, y, np.zeros_like(x)], axis=-1)
        return pos, psi, self.roll(s)

    def pose(self, s, height: float = 0.0):
        """Body poses at arc length s: positions (N,3), quaternions (N,4).

        The body origin sits ``height`` m above the centerline along the
        rolled track normal; orientation is yaw then roll (pitch-free track).
        """
        pos, psi, roll = self.centerline(s)
        zero = np.zeros_like(psi)
        q_yaw = so3_exp(np.stack([zero, zero, psi], axis=-1))
        q_roll = so3_exp(np.stack([roll, zero, zero], axis=-1))
        q = quat_multiply(q_yaw, q_roll)
        if height != 0.0:
            from railfuse.geometry import quat_rotate

            pos = pos + quat_rotate(q, np.array([0.0, 0.0, height]))
        return pos, q


def build_track(layout: TrackLayout) -> TrackMap:
    """Validate a layout and return its arc-length centerline map."""
    return TrackMap(layout)
