"""Analytic world geometry for LiDAR ray casting.

The world is built from the track as a set of rectangular facets: bed plane
strips, three-face extruded rail profiles, pylon boxes along the corridor,
and optional tunnel / station walls. Facets are tiled every ``tile_len``
meters along the track, each tile using the local (rolled) track frame, so
curved and superelevated geometry is approximated piecewise-planar. The
facet set *is* the ground-truth world: simulator invariants (points lie on
surfaces) are stated against it.

Ray casting is fully vectorized over per-point ray origins and directions;
intersections are rectangle-bounded plane hits, nearest positive range wins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from railfuse.simulator.track import TrackMap

INTENSITY_GROUND = 40.0
INTENSITY_RAIL = 120.0
INTENSITY_PYLON = 200.0
INTENSITY_WALL = 90.0


@dataclass(frozen=True)
class SceneConfig:
    """Content of the world alongside the rails."""

    tile_len: float = 2.0
    ground_half_width: float = 8.0
    rail_width: float = 0.07
    pylon_spacing: float = 50.0
    pylon_lateral: float = 4.0
    pylon_radius: float = 0.18
    pylon_height: float = 6.0
    tunnel_ranges: tuple = ()           # ((s0, s1), ...) walls only, no rails
    tunnel_half_width: float = 2.8
    tunnel_wall_height: float = 5.0
    station_ranges: tuple = ()          # dense pylons + platform walls
    station_pylon_spacing: float = 6.0
    station_wall_lateral: float = 8.0
    station_wall_height: float = 4.0
    with_pylons: bool = True


def _in_ranges(s, ranges):
    return any(r0 <= s <= r1 for r0, r1 in ranges)


class World:
    """Facet soup built from a track map and a scene configuration."""

    def __init__(self, track: TrackMap, scene: SceneConfig | None = None, s_max: float | None = None):
        self.track = track
        self.scene = scene or SceneConfig()
        self.s_max = track.total_length if s_max is None else min(s_max, track.total_length)
        self._build()

    def _add_face(self, center, ax1, h1, ax2, h2, normal, intensity, anchor_s):
        self._centers.append(center)
        self._ax1.append(ax1)
        self._h1.append(h1)
        self._ax2.append(ax2)
        self._h2.append(h2)
        self._normals.append(normal)
        self._intens.append(intensity)
        self._anchor.append(anchor_s)

    def _build(self):
        sc = self.scene
        self._centers, self._ax1, self._h1, self._ax2, self._h2 = [], [], [], [], []
        self._normals, self._intens, self._anchor = [], [], []

        n_tiles = int(np.ceil(self.s_max / sc.tile_len))
        s_mid = (np.arange(n_tiles) + 0.5) * sc.tile_len
        pos, psi, roll = self.track.centerline(s_mid)
        half = 0.5 * sc.tile_len * 1.02  # slight overlap hides tile seams

        cpsi, spsi = np.cos(psi), np.sin(psi)
        crol, srol = np.cos(roll), np.sin(roll)
        fwd = np.stack([cpsi, spsi, np.zeros_like(psi)], axis=-1)
        # lateral (left) and up axes of the rolled track plane
        lat = np.stack([-spsi * crol, cpsi * crol, srol], axis=-1)
        up = np.stack([spsi * srol, -cpsi * srol, crol], axis=-1)  # fwd x lat

        gauge = self.track.gauge
        h_rail = self.track.rail_height
        w2 = 0.5 * sc.rail_width

        for i in range(n_tiles):
            s = float(s_mid[i])
            o, f, l, u = pos[i], fwd[i], lat[i], up[i]
            in_tunnel = _in_ranges(s, sc.tunnel_ranges)
            in_station = _in_ranges(s, sc.station_ranges)

            self._add_face(o, f, half, l, sc.ground_half_width, u, INTENSITY_GROUND, s)

            if not in_tunnel:
                for sgn in (1.0, -1.0):
                    base = o + sgn * (gauge / 2) * l
                    top = base + h_rail * u
                    self._add_face(top, f, half, l, w2, u, INTENSITY_RAIL, s)
                    for side in (1.0, -1.0):
                        cside = base + side * w2 * l + 0.5 * h_rail * u
                        self._add_face(cside, f, half, u, 0.5 * h_rail, side * l, INTENSITY_RAIL, s)
            else:
                for sgn in (1.0, -1.0):
                    cw = o + sgn * sc.tunnel_half_width * l + 0.5 * sc.tunnel_wall_height * u
                    self._add_face(cw, f, half, u, 0.5 * sc.tunnel_wall_height, -sgn * l, INTENSITY_WALL, s)

            if in_station:
                for sgn in (1.0, -1.0):
                    cw = o + sgn * sc.station_wall_lateral * l + 0.5 * sc.station_wall_height * u
                    self._add_face(cw, f, half, u, 0.5 * sc.station_wall_height, -sgn * l, INTENSITY_WALL, s)

        # pylons as four-face boxes at fixed arc-length stations
        def add_pylon(s, sgn, lateral):
            p, heading, rl = self.track.centerline(np.array([s]))
            c, sn = np.cos(heading[0]), np.sin(heading[0])
            f = np.array([c, sn, 0.0])
            l = np.array([-sn, c, 0.0])
            u = np.array([0.0, 0.0, 1.0])  # pylons stand on world-vertical axes
            base = p[0] + sgn * lateral * l
            r, h = self.scene.pylon_radius, self.scene.pylon_height
            for ax, nx in ((f, l), (l, f)):
                for side in (1.0, -1.0):
                    cface = base + side * r * nx + 0.5 * h * u
                    self._add_face(cface, ax, r, u, 0.5 * h, side * nx, INTENSITY_PYLON, s)

        if sc.with_pylons:
            s = sc.pylon_spacing
            while s < self.s_max:
                if not _in_ranges(s, sc.tunnel_ranges):
                    add_pylon(s, 1.0 if (int(s / sc.pylon_spacing) % 2 == 0) else -1.0, sc.pylon_lateral)
                s += sc.pylon_spacing
        for r0, r1 in sc.station_ranges:
            s = r0
            while s <= r1:
                add_pylon(s, 1.0, sc.station_wall_lateral - 2.0)
                add_pylon(s + 0.5 * sc.station_pylon_spacing, -1.0, sc.station_wall_lateral - 2.0)
                s += sc.station_pylon_spacing

        self.centers = np.asarray(self._centers)
        self.ax1 = np.asarray(self._ax1)
        self.h1 = np.asarray(self._h1)
        self.ax2 = np.asarray(self._ax2)
        self.h2 = np.asarray(self._h2)
        self.normals = np.asarray(self._normals)
        self.intensities = np.asarray(self._intens)
        self.anchor_s = np.asarray(self._anchor)
        # precomputed plane offsets for the vectorized caster
        self._d = np.einsum("ij,ij->i", self.centers, self.normals)
        self._c1 = np.einsum("ij,ij->i", self.centers, self.ax1)
        self._c2 = np.einsum("ij,ij->i", self.centers, self.ax2)

    def raycast(self, origins: np.ndarray, dirs: np.ndarray, max_range: float, s_window=None):
        """Nearest facet hit per ray.

        Returns (hit mask (N,), ranges (N,), points (N,3), intensities (N,)).
        ``s_window=(s0, s1)`` restricts candidate facets by anchor arc length.
        """
        origins = np.asarray(origins, dtype=np.float64)
        dirs = np.asarray(dirs, dtype=np.float64)
        if s_window is not None:
            sel = (self.anchor_s >= s_window[0]) & (self.anchor_s <= s_window[1])
        else:
            sel = slice(None)
        n = self.normals[sel]
        d = self._d[sel]
        a1 = self.ax1[sel]
        a2 = self.ax2[sel]
        c1 = self._c1[sel]
        c2 = self._c2[sel]
        h1 = self.h1[sel]
        h2 = self.h2[sel]
        inten = self.intensities[sel]

        denom = dirs @ n.T                       # (N, F)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (d[None, :] - origins @ n.T) / denom
        og1 = origins @ a1.T
        dg1 = dirs @ a1.T
        og2 = origins @ a2.T
        dg2 = dirs @ a2.T
        loc1 = og1 + t * dg1 - c1[None, :]
        loc2 = og2 + t * dg2 - c2[None, :]
        valid = (
            np.isfinite(t)
            & (t > 0.05)
            & (t <= max_range)
            & (np.abs(loc1) <= h1[None, :])
            & (np.abs(loc2) <= h2[None, :])
            & (np.abs(denom) > 1e-12)
        )
        t_masked = np.where(valid, t, np.inf)
        best = np.argmin(t_masked, axis=1)
        rows = np.arange(len(origins))
        ranges = t_masked[rows, best]
        hit = np.isfinite(ranges)
        ranges = np.where(hit, ranges, 0.0)
        points = origins + ranges[:, None] * dirs
        return hit, ranges, points, np.where(hit, inten[best], 0.0)

    def surface_distance(self, points: np.ndarray, s_window=None) -> np.ndarray:
        """Distance of world points to the nearest facet (for test oracles)."""
        points = np.asarray(points, dtype=np.float64)
        if s_window is not None:
            sel = (self.anchor_s >= s_window[0]) & (self.anchor_s <= s_window[1])
        else:
            sel = slice(None)
        n = self.normals[sel]
        d = self._d[sel]
        a1, c1, h1 = self.ax1[sel], self._c1[sel], self.h1[sel]
        a2, c2, h2 = self.ax2[sel], self._c2[sel], self.h2[sel]
        # perpendicular distance where the footprint is inside the rectangle
        perp = np.abs(points @ n.T - d[None, :])
        in1 = np.abs(points @ a1.T - c1[None, :]) <= h1[None, :] + 1e-9
        in2 = np.abs(points @ a2.T - c2[None, :]) <= h2[None, :] + 1e-9
        perp = np.where(in1 & in2, perp, np.inf)
        return perp.min(axis=1)
