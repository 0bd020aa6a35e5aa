"""Places: trajectory segmentation, positive/negative mining, synthetic streets.

The synthetic generator stands in for a multi-session lidar survey. A fixed
street network (facades, poles, tree canopies, ground) is re-sampled on every
run with pose jitter, Gaussian range noise and point dropout, so the same
place looks similar but never identical across runs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

POSITIVE_RADIUS = 10.0
NEGATIVE_RADIUS = 50.0


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    heading: float
    timestamp: float


@dataclass
class PlaceRecord:
    id: int
    x: float
    y: float
    split: str = "train"
    cloud_path: str = ""
    run: int = 0
    heading: float = 0.0
    descriptor: np.ndarray | None = None

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Place:
    """A segmented place: centre pose plus the indices of poses in its window."""

    arc: float
    x: float
    y: float
    heading: float
    window: np.ndarray


def poses_array(poses) -> np.ndarray:
    """(n, 4) array of timestamp, x, y, heading."""
    if isinstance(poses, np.ndarray):
        return poses.reshape(-1, 4).astype(np.float64)
    return np.array([[p.timestamp, p.x, p.y, p.heading] for p in poses], dtype=np.float64).reshape(-1, 4)


def arc_lengths(xy: np.ndarray) -> np.ndarray:
    if len(xy) == 0:
        return np.zeros(0)
    steps = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _interp_heading(s: np.ndarray, heading: np.ndarray, at: float) -> float:
    unwrapped = np.unwrap(heading)
    return float(np.interp(at, s, unwrapped))


def segment_trajectory(poses, interval: float, segment_len: float = 20.0) -> list[Place]:
    """Place centres every ``interval`` metres of arc length.

    A centre at arc ``c`` covers poses with ``|s - c| <= segment_len / 2``; a
    centre is kept only while ``c + segment_len / 2`` still lies on the
    trajectory, so the trailing partial window is dropped.
    """
    arr = poses_array(poses)
    if len(arr) < 2:
        return []
    xy = arr[:, 1:3]
    s = arc_lengths(xy)
    total = s[-1]
    if total < segment_len:
        return []
    half = segment_len / 2
    places = []
    n_centres = int(math.floor((total - half) / interval + 1e-9)) + 1
    for i in range(n_centres):
        c = i * interval
        x = float(np.interp(c, s, xy[:, 0]))
        y = float(np.interp(c, s, xy[:, 1]))
        window = np.flatnonzero(np.abs(s - c) <= half + 1e-9)
        places.append(Place(c, x, y, _interp_heading(s, arr[:, 3], c), window))
    return places


@dataclass
class PairIndex:
    positives: dict[int, np.ndarray] = field(default_factory=dict)
    negatives: dict[int, np.ndarray] = field(default_factory=dict)

    def eligible(self, qid: int, n_pos: int = 2, n_neg: int = 19) -> bool:
        return len(self.positives.get(qid, ())) >= n_pos and len(self.negatives.get(qid, ())) >= n_neg


def build_pair_index(
    records,
    pos_radius: float = POSITIVE_RADIUS,
    neg_radius: float = NEGATIVE_RADIUS,
    exclude_same_run: bool = True,
) -> PairIndex:
    """Positives strictly inside ``pos_radius``, negatives strictly beyond ``neg_radius``.

    Distances are planar. Same-run records never count as positives (their
    windows overlap trivially) but do count as negatives.
    """
    records = list(records)
    index = PairIndex()
    if not records:
        return index
    ids = np.array([r.id for r in records], dtype=np.int64)
    if len(set(ids.tolist())) != len(ids):
        raise ValueError("record ids must be unique")
    xy = np.array([[r.x, r.y] for r in records], dtype=np.float64)
    runs = np.array([r.run for r in records])
    tree = cKDTree(xy)
    near_pos = tree.query_ball_point(xy, pos_radius, return_sorted=True)
    near_neg = tree.query_ball_point(xy, neg_radius, return_sorted=True)
    everyone = np.arange(len(records))
    for i, rec in enumerate(records):
        cand = np.asarray(near_pos[i], dtype=np.int64)
        d = np.linalg.norm(xy[cand] - xy[i], axis=1)
        keep = (d < pos_radius) & (cand != i)
        if exclude_same_run:
            keep &= runs[cand] != runs[i]
        index.positives[rec.id] = ids[cand[keep]]
        inside = np.zeros(len(records), dtype=bool)
        ball = np.asarray(near_neg[i], dtype=np.int64)
        db = np.linalg.norm(xy[ball] - xy[i], axis=1)
        inside[ball[db <= neg_radius]] = True
        index.negatives[rec.id] = ids[everyone[~inside]]
    return index


# -- synthetic streets ----------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 7
    n_runs: int = 4
    route_len: float = 800.0
    noise: float = 0.03
    dropout: float = 0.10
    interval: float = 20.0
    segment_len: float = 20.0
    sensor_range: float = 20.0
    density: float = 6.0
    ground_density: float = 1.5
    lateral_jitter: float = 2.0
    heading_jitter_deg: float = 25.0
    along_jitter: float = 4.0
    clutter: float = 0.06
    canopy_change: float = 0.3
    pose_step: float = 1.0
    test_runs: int = 1


@dataclass
class Primitive:
    kind: str
    params: dict


@dataclass
class SynthRun:
    run: int
    poses: np.ndarray
    records: list[PlaceRecord]
    clouds: list[np.ndarray]


@dataclass
class SynthDataset:
    config: SynthConfig
    route: np.ndarray
    runs: list[SynthRun]

    @property
    def records(self) -> list[PlaceRecord]:
        return [r for run in self.runs for r in run.records]

    @property
    def clouds(self) -> list[np.ndarray]:
        return [c for run in self.runs for c in run.clouds]


def _route(rng: np.random.Generator, length: float) -> np.ndarray:
    """Polyline vertices of a staircase street network (alternating turns never cross)."""
    pts = [np.zeros(2)]
    heading = 0.0
    total = 0.0
    sign = 1.0
    while total < length:
        seg = min(rng.uniform(70.0, 160.0), length - total)
        d = np.array([math.cos(heading), math.sin(heading)])
        pts.append(pts[-1] + seg * d)
        total += seg
        heading += sign * math.radians(rng.uniform(40.0, 90.0))
        sign = -sign
    return np.array(pts)


def _polyline_frames(route: np.ndarray):
    for a, b in zip(route[:-1], route[1:]):
        d = b - a
        length = float(np.linalg.norm(d))
        u = d / length
        yield a, u, np.array([-u[1], u[0]]), length


def _world(rng: np.random.Generator, route: np.ndarray) -> list[Primitive]:
    prims: list[Primitive] = []
    for a, u, n, length in _polyline_frames(route):
        for side in (-1.0, 1.0):
            s = rng.uniform(0.0, 8.0)
            while s < length - 4.0:
                w = min(rng.uniform(8.0, 30.0), length - s)
                setback = rng.uniform(6.0, 12.0)
                height = rng.uniform(4.0, 18.0)
                depth = rng.uniform(4.0, 10.0)
                origin = a + u * s + n * side * setback
                prims.append(
                    Primitive("facade", dict(origin=origin, u=u, n=n * side, width=w, height=height, depth=depth))
                )
                s += w + rng.uniform(2.0, 12.0)
            s = rng.uniform(0.0, 10.0)
            while s < length:
                base = a + u * s + n * side * rng.uniform(3.5, 5.0)
                if rng.random() < 0.55:
                    prims.append(Primitive("pole", dict(base=base, radius=rng.uniform(0.08, 0.3), height=rng.uniform(3.0, 8.0))))
                else:
                    prims.append(
                        Primitive(
                            "tree",
                            dict(
                                base=base,
                                trunk=rng.uniform(1.5, 3.5),
                                radii=np.array([rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0), rng.uniform(1.0, 2.5)]),
                            ),
                        )
                    )
                s += rng.uniform(6.0, 25.0)
    return prims


def _sample_count(rng, area: float, density: float) -> int:
    return int(rng.poisson(max(area * density, 0.0)))


def _sample_primitive(rng: np.random.Generator, p: Primitive, density: float, canopy_change: float = 0.0) -> np.ndarray:
    q = p.params
    if p.kind == "facade":
        out = []
        # front face
        m = _sample_count(rng, q["width"] * q["height"], density)
        a, b = rng.random(m) * q["width"], rng.random(m) * q["height"]
        xy = q["origin"] + np.outer(a, q["u"])
        out.append(np.c_[xy, b])
        # two side walls receding from the street
        for end in (0.0, q["width"]):
            m = _sample_count(rng, q["depth"] * q["height"], density * 0.5)
            a, b = rng.random(m) * q["depth"], rng.random(m) * q["height"]
            xy = q["origin"] + q["u"] * end + np.outer(a, q["n"])
            out.append(np.c_[xy, b])
        return np.concatenate(out, axis=0)
    if p.kind == "pole":
        m = _sample_count(rng, 2 * math.pi * q["radius"] * q["height"], density * 4)
        t, h = rng.random(m) * 2 * math.pi, rng.random(m) * q["height"]
        return np.c_[q["base"][0] + q["radius"] * np.cos(t), q["base"][1] + q["radius"] * np.sin(t), h]
    if p.kind == "tree":
        # foliage grows and thins between runs
        r = q["radii"] * rng.uniform(1.0 - canopy_change, 1.0 + canopy_change)
        area = 4 * math.pi * (r.prod() ** (2 / 3))
        m = _sample_count(rng, area, density)
        v = rng.normal(size=(m, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        centre = np.array([q["base"][0], q["base"][1], q["trunk"] + r[2]])
        canopy = centre + v * r
        mt = _sample_count(rng, 2 * math.pi * 0.15 * q["trunk"], density * 4)
        t, h = rng.random(mt) * 2 * math.pi, rng.random(mt) * q["trunk"]
        trunk = np.c_[q["base"][0] + 0.15 * np.cos(t), q["base"][1] + 0.15 * np.sin(t), h]
        return np.concatenate([canopy, trunk], axis=0)
    if p.kind == "box":
        lo, size = q["origin"], q["size"]
        out = []
        for axis in range(3):
            for face in (0.0, 1.0):
                other = [a for a in range(3) if a != axis]
                m = _sample_count(rng, size[other[0]] * size[other[1]], density)
                pts = lo + rng.random((m, 3)) * size
                pts[:, axis] = lo[axis] + face * size[axis]
                out.append(pts)
        return np.concatenate(out, axis=0)
    raise ValueError(f"unknown primitive {p.kind}")


def _clutter(rng: np.random.Generator, route: np.ndarray, rate: float) -> list[Primitive]:
    """Parked vehicles along both kerbs; placement differs from run to run."""
    prims = []
    for a, u, n, length in _polyline_frames(route):
        for side in (-1.0, 1.0):
            for s in rng.random(rng.poisson(rate * length)) * length:
                size = np.array([rng.uniform(3.8, 5.0), rng.uniform(1.6, 2.0), rng.uniform(1.3, 1.9)])
                centre = a + u * s + n * side * rng.uniform(2.2, 3.2)
                # axis-aligned in the world frame: a crude footprint is enough for clutter
                origin = np.r_[centre - size[:2] / 2, 0.0]
                prims.append(Primitive("box", dict(origin=origin, size=size)))
    return prims


def _sample_ground(rng: np.random.Generator, route: np.ndarray, density: float, half_width: float) -> np.ndarray:
    out = []
    for a, u, n, length in _polyline_frames(route):
        m = _sample_count(rng, length * 2 * half_width, density)
        s, w = rng.random(m) * length, (rng.random(m) * 2 - 1) * half_width
        xy = a + np.outer(s, u) + np.outer(w, n)
        out.append(np.c_[xy, np.zeros(m)])
    return np.concatenate(out, axis=0)


def _run_trajectory(rng: np.random.Generator, route: np.ndarray, cfg: SynthConfig, run: int) -> np.ndarray:
    """Poses (timestamp, x, y, heading) following the route with a lateral lane offset."""
    s_route = arc_lengths(route)
    start = rng.uniform(0.0, cfg.along_jitter)
    s = np.arange(start, s_route[-1], cfg.pose_step)
    x = np.interp(s, s_route, route[:, 0])
    y = np.interp(s, s_route, route[:, 1])
    seg = np.clip(np.searchsorted(s_route, s, side="right") - 1, 0, len(route) - 2)
    d = route[seg + 1] - route[seg]
    heading = np.arctan2(d[:, 1], d[:, 0])
    offset = rng.uniform(-cfg.lateral_jitter, cfg.lateral_jitter)
    wobble = 0.3 * cfg.lateral_jitter * np.sin(s / rng.uniform(40.0, 90.0) + rng.uniform(0, 2 * np.pi))
    lateral = offset + wobble
    x = x - np.sin(heading) * lateral
    y = y + np.cos(heading) * lateral
    t = 1000.0 * run + s / 10.0
    return np.c_[t, x, y, heading]


def to_local(points: np.ndarray, x: float, y: float, heading: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    dx, dy = points[:, 0] - x, points[:, 1] - y
    return np.c_[c * dx + s * dy, -s * dx + c * dy, points[:, 2]]


def synth_dataset(
    seed: int = 7, n_runs: int = 4, route_len: float = 800.0, noise: float = 0.03, config: SynthConfig | None = None
) -> SynthDataset:
    """Deterministic multi-run survey of one synthetic street network."""
    cfg = config or SynthConfig(seed=seed, n_runs=n_runs, route_len=route_len, noise=noise)
    if cfg.n_runs < 2:
        raise ValueError("need at least two runs (database + query)")
    world_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    route = _route(world_rng, cfg.route_len)
    prims = _world(world_rng, route)
    runs = []
    next_id = 0
    for run in range(cfg.n_runs):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, run]))
        run_prims = prims + _clutter(rng, route, cfg.clutter)
        parts = [_sample_primitive(rng, p, cfg.density, cfg.canopy_change) for p in run_prims]
        parts.append(_sample_ground(rng, route, cfg.ground_density, cfg.sensor_range))
        pts = np.concatenate(parts, axis=0)
        pts = pts[rng.random(len(pts)) >= cfg.dropout]
        pts = pts + rng.normal(scale=cfg.noise, size=pts.shape)
        tree = cKDTree(pts[:, :2])
        poses = _run_trajectory(rng, route, cfg, run)
        split = "test" if run >= cfg.n_runs - cfg.test_runs else "train"
        records, clouds = [], []
        for place in segment_trajectory(poses, cfg.interval, cfg.segment_len):
            win = poses[place.window]
            hits = tree.query_ball_point(win[:, 1:3], cfg.sensor_range)
            idx = np.unique(np.concatenate([np.asarray(h, dtype=np.int64) for h in hits]))
            heading = place.heading + math.radians(rng.normal(0.0, cfg.heading_jitter_deg))
            clouds.append(to_local(pts[idx], place.x, place.y, heading))
            records.append(PlaceRecord(next_id, place.x, place.y, split, "", run, place.heading))
            next_id += 1
        runs.append(SynthRun(run, poses, records, clouds))
        log.info("run %d: %d places, %d world points", run, len(records), len(pts))
    return SynthDataset(cfg, route, runs)
