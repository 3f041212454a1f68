"""2D convex shapes, obstacle environments, and distance-to-collision queries.

Distances are Euclidean separation distances in meters, computed with the
Gilbert-Johnson-Keerthi (GJK) algorithm on support functions. A distance of
0.0 means the shapes touch or overlap. All shapes and environments are
immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO, Union

import numpy as np

GJK_TOL = 1e-9
GJK_MAX_ITER = 100

ENV_SCHEMA_VERSION = 1


class ShapeError(ValueError):
    """Raised for degenerate or otherwise invalid shapes."""


class NoObstaclesError(ValueError):
    """Raised when a distance query is made against an empty environment."""


class GridParseError(ValueError):
    """Raised for malformed occupancy-grid files. Carries the offending location."""

    def __init__(self, message: str, line: int | None = None, byte: int | None = None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if byte is not None:
            loc.append(f"byte {byte}")
        suffix = f" ({', '.join(loc)})" if loc else ""
        super().__init__(message + suffix)
        self.line = line
        self.byte = byte


def _as_points(vertices) -> np.ndarray:
    pts = np.asarray(vertices, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeError(f"expected an (n, 2) vertex array, got shape {pts.shape}")
    return pts


@dataclass(frozen=True, eq=False)
class Polygon:
    """Convex polygon with counter-clockwise vertices, in meters.

    Vertices must be strictly convex: any collinear triple is rejected as
    degenerate.
    """

    vertices: np.ndarray

    def __post_init__(self):
        pts = _as_points(self.vertices)
        if len(pts) < 3:
            raise ShapeError("polygon needs at least 3 vertices")
        if not np.all(np.isfinite(pts)):
            raise ShapeError("polygon vertices must be finite")
        n = len(pts)
        for i in range(n):
            a, b, c = pts[i], pts[(i + 1) % n], pts[(i + 2) % n]
            cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
            if cross <= 1e-12:
                raise ShapeError(
                    "polygon vertices must be strictly convex and counter-clockwise"
                )
        pts.setflags(write=False)
        object.__setattr__(self, "vertices", pts)

    def support(self, direction: np.ndarray) -> np.ndarray:
        return self.vertices[int(np.argmax(self.vertices @ direction))]

    def center(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def transformed(self, pose) -> "Polygon":
        x, y, theta = pose
        c, s = np.cos(theta), np.sin(theta)
        rot = np.array([[c, -s], [s, c]])
        return Polygon(self.vertices @ rot.T + np.array([x, y]))

    def to_json(self) -> dict:
        return {"type": "polygon", "vertices": self.vertices.tolist()}


@dataclass(frozen=True, eq=False)
class Circle:
    """Circle with center in meters and radius > 0."""

    center_point: np.ndarray
    radius: float

    def __post_init__(self):
        center = np.asarray(self.center_point, dtype=float).reshape(2)
        if not np.all(np.isfinite(center)) or not np.isfinite(self.radius):
            raise ShapeError("circle parameters must be finite")
        if self.radius <= 0:
            raise ShapeError("circle radius must be positive")
        center.setflags(write=False)
        object.__setattr__(self, "center_point", center)

    def support(self, direction: np.ndarray) -> np.ndarray:
        norm = np.hypot(direction[0], direction[1])
        if norm < 1e-300:
            return self.center_point + np.array([self.radius, 0.0])
        return self.center_point + (self.radius / norm) * direction

    def center(self) -> np.ndarray:
        return self.center_point

    def transformed(self, pose) -> "Circle":
        x, y, theta = pose
        c, s = np.cos(theta), np.sin(theta)
        cx, cy = self.center_point
        return Circle(np.array([x + c * cx - s * cy, y + s * cx + c * cy]), self.radius)

    def to_json(self) -> dict:
        return {
            "type": "circle",
            "center": self.center_point.tolist(),
            "radius": self.radius,
        }


ConvexShape = Union[Polygon, Circle]


def shape_from_json(blob: dict) -> ConvexShape:
    kind = blob.get("type")
    if kind == "polygon":
        return Polygon(np.asarray(blob["vertices"], dtype=float))
    if kind == "circle":
        return Circle(np.asarray(blob["center"], dtype=float), float(blob["radius"]))
    raise ShapeError(f"unknown shape type {kind!r}")


def box(cx: float, cy: float, width: float, height: float, theta: float = 0.0) -> Polygon:
    """Axis-aligned (or rotated) rectangle centered at (cx, cy)."""
    hw, hh = width / 2.0, height / 2.0
    corners = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
    if theta != 0.0:
        c, s = np.cos(theta), np.sin(theta)
        corners = corners @ np.array([[c, s], [-s, c]])
    return Polygon(corners + np.array([cx, cy]))


@dataclass(frozen=True, eq=False)
class RobotFootprint:
    """A convex body-frame shape placed in the world by a rigid (x, y, theta) pose."""

    shape: ConvexShape
    pose: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def placed(self) -> ConvexShape:
        return self.shape.transformed(self.pose)

    def at(self, x: float, y: float, theta: float = 0.0) -> "RobotFootprint":
        return RobotFootprint(self.shape, (float(x), float(y), float(theta)))


@dataclass(frozen=True, eq=False)
class Environment:
    """A workspace rectangle with a tuple of convex obstacles.

    `bounds` is (xmin, ymin, xmax, ymax) in meters. `seed` records the RNG
    seed the environment was generated from (0 for imported maps).
    """

    obstacles: tuple[ConvexShape, ...]
    bounds: tuple[float, float, float, float]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        xmin, ymin, xmax, ymax = self.bounds
        if not (xmax > xmin and ymax > ymin):
            raise ValueError("bounds must span a non-empty rectangle")
        object.__setattr__(self, "bounds", tuple(float(v) for v in self.bounds))

    @property
    def diagonal(self) -> float:
        xmin, ymin, xmax, ymax = self.bounds
        return float(np.hypot(xmax - xmin, ymax - ymin))

    def contains(self, point) -> bool:
        x, y = point[0], point[1]
        xmin, ymin, xmax, ymax = self.bounds
        return xmin <= x <= xmax and ymin <= y <= ymax

    def to_json(self) -> dict:
        return {
            "version": ENV_SCHEMA_VERSION,
            "bounds": list(self.bounds),
            "seed": self.seed,
            "obstacles": [ob.to_json() for ob in self.obstacles],
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @staticmethod
    def from_json(blob: dict) -> "Environment":
        if blob.get("version") != ENV_SCHEMA_VERSION:
            raise ValueError(f"unsupported environment schema version {blob.get('version')!r}")
        return Environment(
            obstacles=tuple(shape_from_json(ob) for ob in blob["obstacles"]),
            bounds=tuple(blob["bounds"]),
            seed=int(blob.get("seed", 0)),
        )

    @staticmethod
    def load(path) -> "Environment":
        with open(path) as fh:
            return Environment.from_json(json.load(fh))


def _closest_on_segment(a: np.ndarray, b: np.ndarray):
    """Closest point to the origin on segment ab, plus the supporting feature."""
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-300:
        return a, [a]
    t = float(-(a @ ab) / denom)
    if t <= 0.0:
        return a, [a]
    if t >= 1.0:
        return b, [b]
    return a + t * ab, [a, b]


def _closest_on_triangle(a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Closest point to the origin on triangle abc, plus the supporting feature.

    Voronoi-region walk after Ericson's closest-point construction; returns
    the zero vector with the full triangle when the origin is inside.
    """
    ab, ac = b - a, c - a
    d1, d2 = float(-(ab @ a)), float(-(ac @ a))
    if d1 <= 0.0 and d2 <= 0.0:
        return a, [a]
    d3, d4 = float(-(ab @ b)), float(-(ac @ b))
    if d3 >= 0.0 and d4 <= d3:
        return b, [b]
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 <= d1 and d3 <= 0.0:
        t = d1 / (d1 - d3)
        return a + t * ab, [a, b]
    d5, d6 = float(-(ab @ c)), float(-(ac @ c))
    if d6 >= 0.0 and d5 <= d6:
        return c, [c]
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 <= d2 and d6 <= 0.0:
        t = d2 / (d2 - d6)
        return a + t * ac, [a, c]
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and d4 - d3 >= 0.0 and d5 - d6 >= 0.0:
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + t * (c - b), [b, c]
    return np.zeros(2), [a, b, c]


def _closest_simplex(simplex: list[np.ndarray]):
    if len(simplex) == 1:
        return simplex[0], simplex
    if len(simplex) == 2:
        return _closest_on_segment(simplex[0], simplex[1])
    return _closest_on_triangle(simplex[0], simplex[1], simplex[2])


def gjk_distance(a: ConvexShape, b: ConvexShape) -> float:
    """Euclidean separation distance between two convex shapes.

    Returns 0.0 when the shapes intersect or touch. Iterates the GJK
    distance subalgorithm on the Minkowski difference until the support gap
    drops below ``GJK_TOL`` (1e-9 m) or ``GJK_MAX_ITER`` iterations.
    """
    d0 = a.center() - b.center()
    if np.hypot(d0[0], d0[1]) < 1e-12:
        d0 = np.array([1.0, 0.0])
    v = a.support(d0) - b.support(-d0)
    simplex = [v]
    for _ in range(GJK_MAX_ITER):
        dist = float(np.hypot(v[0], v[1]))
        if dist < GJK_TOL:
            return 0.0
        d = -v
        w = a.support(d) - b.support(-d)
        # support gap: dist - <v, w>/dist bounds the remaining improvement
        if dist - float(v @ w) / dist < GJK_TOL:
            return dist
        if any(np.hypot(*(w - s)) < 1e-14 for s in simplex):
            return dist  # repeated support point, no further progress possible
        simplex.append(w)
        v, simplex = _closest_simplex(simplex)
        if len(simplex) == 3:
            return 0.0
    return float(np.hypot(v[0], v[1]))


def distance_to_collision(env: Environment, robot: RobotFootprint) -> float:
    """Minimum separation between the posed robot footprint and all obstacles.

    Returns 0.0 as soon as any obstacle is intersected.
    """
    if not env.obstacles:
        raise NoObstaclesError("environment has no obstacles")
    placed = robot.placed()
    best = np.inf
    for ob in env.obstacles:
        d = gjk_distance(placed, ob)
        if d <= 0.0:
            return 0.0
        if d < best:
            best = d
    return float(best)


def generate_environment(
    seed: int,
    n_obstacles: int,
    bounds: tuple[float, float, float, float] = (0.0, 0.0, 10.0, 10.0),
    size_range: tuple[float, float] = (0.5, 1.5),
    p_circle: float = 0.4,
) -> Environment:
    """Deterministically generate a random environment of blocks and circles.

    Obstacles are guaranteed to lie inside `bounds`; start/goal clearance is
    the planner's problem, not the generator's.
    """
    if n_obstacles < 0:
        raise ValueError("n_obstacles must be >= 0")
    xmin, ymin, xmax, ymax = bounds
    lo, hi = size_range
    if not (0 < lo <= hi):
        raise ValueError("size_range must satisfy 0 < lo <= hi")
    if hi > min(xmax - xmin, ymax - ymin):
        raise ValueError("size_range exceeds workspace bounds")
    rng = np.random.default_rng(seed)
    obstacles: list[ConvexShape] = []
    for _ in range(n_obstacles):
        if rng.uniform() < p_circle:
            r = rng.uniform(lo, hi) / 2.0
            cx = rng.uniform(xmin + r, xmax - r)
            cy = rng.uniform(ymin + r, ymax - r)
            obstacles.append(Circle(np.array([cx, cy]), r))
        else:
            w = rng.uniform(lo, hi)
            h = rng.uniform(lo, hi)
            theta = rng.uniform(0.0, np.pi)
            half_diag = 0.5 * float(np.hypot(w, h))
            cx = rng.uniform(xmin + half_diag, xmax - half_diag)
            cy = rng.uniform(ymin + half_diag, ymax - half_diag)
            obstacles.append(box(cx, cy, w, h, theta))
    return Environment(tuple(obstacles), bounds, seed=seed)


def _merge_rectangles(occupied: np.ndarray) -> list[tuple[int, int, int, int]]:
    """Greedy decomposition of an occupancy mask into (row0, row1, col0, col1) runs.

    Horizontal runs per row are extended downward while the identical column
    span stays fully occupied. Spans are half-open cell index ranges.
    """
    rows, cols = occupied.shape
    consumed = np.zeros_like(occupied, dtype=bool)
    rects = []
    for i in range(rows):
        j = 0
        while j < cols:
            if occupied[i, j] and not consumed[i, j]:
                j1 = j
                while j1 < cols and occupied[i, j1] and not consumed[i, j1]:
                    j1 += 1
                i1 = i + 1
                while i1 < rows and occupied[i1, j:j1].all() and not consumed[i1, j:j1].any():
                    i1 += 1
                consumed[i:i1, j:j1] = True
                rects.append((i, i1, j, j1))
                j = j1
            else:
                j += 1
    return rects


def _parse_pgm(data: bytes) -> np.ndarray:
    """Parse a P2 (ASCII) or P5 (binary) PGM into a float array in [0, 1]."""
    pos = 0

    def next_token():
        nonlocal pos
        while pos < len(data):
            if data[pos : pos + 1].isspace():
                pos += 1
            elif data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise GridParseError("unexpected end of PGM header", byte=start)
        return data[start:pos], start

    magic, _ = next_token()
    if magic not in (b"P2", b"P5"):
        raise GridParseError(f"not a P2/P5 PGM file (magic {magic!r})", byte=0)
    fields = []
    for _ in range(3):
        tok, at = next_token()
        try:
            fields.append(int(tok))
        except ValueError:
            raise GridParseError(f"bad PGM header token {tok!r}", byte=at) from None
    width, height, maxval = fields
    if width <= 0 or height <= 0 or maxval <= 0:
        raise GridParseError("PGM dimensions and maxval must be positive", byte=0)
    if magic == b"P5":
        pos += 1  # single whitespace after maxval
        need = width * height * (2 if maxval > 255 else 1)
        raster = data[pos : pos + need]
        if len(raster) < need:
            raise GridParseError("truncated P5 raster", byte=pos + len(raster))
        dtype = ">u2" if maxval > 255 else np.uint8
        pixels = np.frombuffer(raster, dtype=dtype).astype(float)
    else:
        try:
            pixels = np.array(data[pos:].split(), dtype=float)
        except ValueError:
            raise GridParseError("non-numeric P2 raster value", byte=pos) from None
        if pixels.size < width * height:
            raise GridParseError(
                f"P2 raster has {pixels.size} values, expected {width * height}", byte=pos
            )
        pixels = pixels[: width * height]
    return pixels.reshape(height, width) / float(maxval)


def _parse_ascii_grid(text: str) -> np.ndarray:
    """Parse the one-line-header ASCII grid format.

    Header line: ``<rows> <cols>``. Then `rows` lines of `cols` digits (0 or
    1, whitespace between digits optional). 1 marks an occupied cell.
    """
    lines = text.splitlines()
    if not lines:
        raise GridParseError("empty grid file", line=1)
    header = lines[0].split()
    if len(header) != 2:
        raise GridParseError("header must be '<rows> <cols>'", line=1)
    try:
        rows, cols = int(header[0]), int(header[1])
    except ValueError:
        raise GridParseError("header must be '<rows> <cols>'", line=1) from None
    if rows <= 0 or cols <= 0:
        raise GridParseError("grid dimensions must be positive", line=1)
    if len(lines) - 1 < rows:
        raise GridParseError(f"expected {rows} grid rows, found {len(lines) - 1}", line=len(lines))
    grid = np.zeros((rows, cols))
    for i in range(rows):
        row = lines[1 + i].replace(" ", "").replace("\t", "")
        if len(row) != cols:
            raise GridParseError(f"row has {len(row)} cells, expected {cols}", line=i + 2)
        for j, ch in enumerate(row):
            if ch not in "01":
                raise GridParseError(f"invalid cell character {ch!r}", line=i + 2)
            grid[i, j] = float(ch == "1")
    return grid


def import_occupancy_grid(
    path,
    resolution: float,
    threshold: float = 0.5,
    merge: bool = True,
) -> Environment:
    """Convert an occupancy grid file into an Environment of square obstacles.

    Accepts PGM (P2/P5, where darker pixels are more occupied) or the ASCII
    grid format of `_parse_ascii_grid`. Cells with occupancy > `threshold`
    become obstacles; with `merge` adjacent occupied cells are coalesced into
    rectangles. Row 0 of the file is the top of the map and world origin is
    the bottom-left corner.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive meters/cell")
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] in (b"P2", b"P5"):
        occupancy = 1.0 - _parse_pgm(data)  # dark = occupied
    else:
        occupancy = _parse_ascii_grid(data.decode("ascii", errors="replace"))
    occupied = occupancy > threshold
    rows, cols = occupied.shape
    spans = _merge_rectangles(occupied) if merge else [
        (i, i + 1, j, j + 1) for i, j in zip(*np.nonzero(occupied))
    ]
    obstacles = []
    for i0, i1, j0, j1 in spans:
        x0, x1 = j0 * resolution, j1 * resolution
        # flip rows so the first file row sits at the top of the map
        y0, y1 = (rows - i1) * resolution, (rows - i0) * resolution
        obstacles.append(box((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0))
    return Environment(tuple(obstacles), (0.0, 0.0, cols * resolution, rows * resolution))
