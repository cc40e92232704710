"""Seeded waypoint-agent generator for airport passenger trajectories.

Agents walk the shortest waypoint route from an entry to their flight's gate,
pause at every checkpoint and are sampled at a fixed rate. Abnormal agents get
one archetype perturbation on one leg; the affected time window is stored as
the trajectory's ``anomaly_span``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import networkx as nx
import numpy as np

from .data import ABNORMAL, NORMAL, Checkpoint, Trajectory

ARCHETYPES = ("loitering", "backtracking", "zigzag", "trespass", "sprint")
BENCHMARK_SIZES = {"small": 400, "normal": 1000, "large": 4000}
PAPER_ABNORMAL_COUNT = 300

# seed streams; train and validation do not depend on the benchmark name
STREAM_TRAIN, STREAM_VAL_NORMAL, STREAM_VAL_ABNORMAL = 1, 2, 3
STREAM_TEST_NORMAL, STREAM_TEST_ABNORMAL = 4, 5


@dataclass
class FloorPlan:
    waypoints: dict[str, np.ndarray]
    edges: list[tuple[str, str]]
    checkpoints: list[str]
    entries: list[str]
    gates: list[str]
    restricted_zones: list[np.ndarray] = field(default_factory=list)
    checkpoint_radius: float = 2.0
    name: str = "plan"

    def __post_init__(self):
        self.waypoints = {k: np.asarray(v, dtype=np.float64) for k, v in self.waypoints.items()}
        self.restricted_zones = [np.asarray(z, dtype=np.float64) for z in self.restricted_zones]
        self.graph = nx.Graph()
        for a, b in self.edges:
            self.graph.add_edge(a, b, length=float(np.linalg.norm(self.waypoints[a] - self.waypoints[b])))
        self._routes: dict[tuple[str, str], list[str]] = {}
        self.validate()

    def validate(self) -> None:
        cps = set(self.checkpoints)
        for e in self.entries:
            for g in self.gates:
                if not nx.has_path(self.graph, e, g):
                    raise ValueError(f"gate {g} unreachable from {e}")
                for path in nx.all_shortest_paths(self.graph, e, g, weight="length"):
                    if not cps <= set(path):
                        raise ValueError(f"route {e}->{g} skips a checkpoint")

    def route(self, entry: str, gate: str) -> list[str]:
        key = (entry, gate)
        if key not in self._routes:
            self._routes[key] = nx.shortest_path(self.graph, entry, gate, weight="length")
        return self._routes[key]

    def polyline(self, entry: str, gate: str) -> np.ndarray:
        return np.array([self.waypoints[n][:2] for n in self.route(entry, gate)])

    def checkpoint_set(self) -> list[Checkpoint]:
        return [Checkpoint(tuple(float(v) for v in self.waypoints[n]), self.checkpoint_radius)
                for n in self.checkpoints]

    def nearest(self, names: list[str], xy: np.ndarray) -> str:
        return min(names, key=lambda n: float(np.linalg.norm(self.waypoints[n][:2] - xy)))

    def to_dict(self) -> dict:
        return {"name": self.name,
                "waypoints": {k: v.tolist() for k, v in self.waypoints.items()},
                "edges": [list(e) for e in self.edges], "checkpoints": self.checkpoints,
                "checkpoint_radius": self.checkpoint_radius, "entries": self.entries,
                "gates": self.gates,
                "restricted_zones": [z.tolist() for z in self.restricted_zones]}

    @classmethod
    def from_dict(cls, d: dict) -> "FloorPlan":
        return cls(d["waypoints"], [tuple(e) for e in d["edges"]], list(d["checkpoints"]),
                   list(d["entries"]), list(d["gates"]), d.get("restricted_zones", []),
                   float(d.get("checkpoint_radius", 2.0)), d.get("name", "plan"))

    @classmethod
    def load(cls, path) -> "FloorPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_plan() -> FloorPlan:
    text = resources.files("trajad").joinpath("plans/airport.json").read_text()
    return FloorPlan.from_dict(json.loads(text))


@dataclass
class ScenarioConfig:
    n_flights: int = 20
    passengers_per_flight: int = 20
    flight_window: float = 4 * 3600.0
    entry_lead: tuple[float, float] = (1800.0, 5400.0)  # seconds before departure
    sample_rate: float = 2.0
    speed_mean: float = 1.3
    speed_std: float = 0.15
    speed_range: tuple[float, float] = (0.9, 1.8)
    speed_cap: float = 2.5
    dwell: tuple[float, float] = (3.0, 10.0)
    waypoint_jitter: float = 1.0
    checkpoint_jitter: float = 0.3
    noise_std: float = 0.02
    anomaly_mix: dict[str, float] = field(
        default_factory=lambda: {a: 1.0 / len(ARCHETYPES) for a in ARCHETYPES})
    difficulty: float = 0.5
    # archetype predicate thresholds; injected magnitudes always clear them
    loiter_factor: float = 2.0      # x max normal dwell
    sprint_factor: float = 2.0      # x speed_mean
    backtrack_distance: float = 4.0  # meters of lost route progress
    zigzag_offset: float = 0.5      # meters either side of the route
    zigzag_window: float = 20.0     # seconds holding >= 4 side changes
    rng_seed: int = 0

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if set(self.anomaly_mix) - set(ARCHETYPES):
            raise ValueError(f"unknown archetypes {set(self.anomaly_mix) - set(ARCHETYPES)}")
        if not np.isclose(sum(self.anomaly_mix.values()), 1.0):
            raise ValueError("anomaly_mix fractions must sum to 1")
        if not 0.0 <= self.difficulty <= 1.0:
            raise ValueError("difficulty must lie in [0, 1]")

    @property
    def n_passengers(self) -> int:
        return self.n_flights * self.passengers_per_flight


# -- geometry helpers ----------------------------------------------------------

def _disk(rng: np.random.Generator, radius: float) -> np.ndarray:
    r = radius * np.sqrt(rng.uniform())
    a = rng.uniform(0, 2 * np.pi)
    return np.array([r * np.cos(a), r * np.sin(a)])


def in_polygon(xy: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd ray casting for ``(N, 2)`` points."""
    xy = np.atleast_2d(xy)
    x, y = xy[:, 0], xy[:, 1]
    inside = np.zeros(len(xy), dtype=bool)
    n = len(poly)
    for k in range(n):
        x1, y1 = poly[k]
        x2, y2 = poly[(k + 1) % n]
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xc)
    return inside


def project_onto(polyline: np.ndarray, xy: np.ndarray):
    """Arc length and signed lateral offset (left positive) of each point."""
    a, b = polyline[:-1], polyline[1:]
    seg = b - a
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.r_[0.0, np.cumsum(seg_len)]
    rel = xy[:, None, :] - a[None]
    u = np.clip(np.einsum("nkd,kd->nk", rel, seg) / seg_len**2, 0.0, 1.0)
    foot = a[None] + u[..., None] * seg[None]
    dist = np.linalg.norm(xy[:, None, :] - foot, axis=2)
    k = np.argmin(dist, axis=1)
    rows = np.arange(len(xy))
    arc = cum[k] + u[rows, k] * seg_len[k]
    cross = seg[k, 0] * rel[rows, k, 1] - seg[k, 1] * rel[rows, k, 0]
    return arc, np.sign(cross) * dist[rows, k]


# -- archetype predicates -------------------------------------------------------

def step_speeds(points: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.diff(points[:, 1:], axis=0), axis=1) / np.diff(points[:, 0])


def longest_dwell(points: np.ndarray, radius: float) -> float:
    """Longest time the track stays within ``radius`` of where the stay began."""
    xy, t = points[:, 1:3], points[:, 0]
    best = 0.0
    for i in range(len(xy) - 1):
        d = np.linalg.norm(xy[i + 1:] - xy[i], axis=1)
        out = np.flatnonzero(d > radius)
        j = i + (out[0] if out.size else len(d))
        best = max(best, t[j] - t[i])
    return best


def progress_regression(points: np.ndarray, polyline: np.ndarray) -> float:
    arc, _ = project_onto(polyline, points[:, 1:3])
    return float(np.max(np.maximum.accumulate(arc) - arc))


def _moving_average(x: np.ndarray, n: int) -> np.ndarray:
    n = max(1, min(n, len(x)))
    k = np.ones(n)
    return np.convolve(x, k, mode="same") / np.convolve(np.ones_like(x), k, mode="same")


def side_changes_in_window(points: np.ndarray, polyline: np.ndarray, offset: float,
                           window: float, smooth: float = 8.0) -> int:
    """Most side switches inside any ``window`` seconds.

    The lateral offset from the route is taken relative to its own
    ``smooth``-second moving average, so a walker following a shifted but
    straight line never switches sides.
    """
    _, lat = project_onto(polyline, points[:, 1:3])
    dt = float(np.median(np.diff(points[:, 0])))
    lat = lat - _moving_average(lat, int(round(smooth / dt)) | 1)
    side = np.where(lat > offset, 1, np.where(lat < -offset, -1, 0))
    t = points[:, 0]
    keep = side != 0
    s, ts = side[keep], t[keep]
    change_t = ts[1:][s[1:] != s[:-1]]
    best = 0
    for k in range(len(change_t)):
        best = max(best, int(np.searchsorted(change_t, change_t[k] + window, side="right")) - k)
    return best


def route_polyline_for(plan: FloorPlan, points: np.ndarray) -> np.ndarray:
    entry = plan.nearest(plan.entries, points[0, 1:3])
    gate = plan.nearest(plan.gates, points[-1, 1:3])
    return plan.polyline(entry, gate)


def archetype_violations(traj: Trajectory, plan: FloorPlan, cfg: ScenarioConfig) -> set[str]:
    """Which archetype predicates the trajectory satisfies."""
    pts = traj.points
    poly = route_polyline_for(plan, pts)
    found = set()
    if longest_dwell(pts, 3.0) >= cfg.loiter_factor * cfg.dwell[1]:
        found.add("loitering")
    if progress_regression(pts, poly) >= cfg.backtrack_distance:
        found.add("backtracking")
    if side_changes_in_window(pts, poly, cfg.zigzag_offset, cfg.zigzag_window) >= 4:
        found.add("zigzag")
    if any(in_polygon(pts[:, 1:3], z).any() for z in plan.restricted_zones):
        found.add("trespass")
    if step_speeds(pts).max() >= cfg.sprint_factor * cfg.speed_mean:
        found.add("sprint")
    return found


# -- motion synthesis ---------------------------------------------------------------

class _Path:
    """Timed knots built from move and wait events."""

    def __init__(self, start: np.ndarray):
        self.t = [0.0]
        self.xy = [np.asarray(start, dtype=np.float64)]

    @property
    def now(self) -> float:
        return self.t[-1]

    @property
    def here(self) -> np.ndarray:
        return self.xy[-1]

    def move(self, target, speed: float) -> None:
        target = np.asarray(target, dtype=np.float64)
        d = float(np.linalg.norm(target - self.here))
        if d < 1e-9:
            return
        self.t.append(self.now + d / speed)
        self.xy.append(target)

    def wait(self, seconds: float) -> None:
        if seconds > 0:
            self.t.append(self.now + seconds)
            self.xy.append(self.here.copy())

    def traversed(self) -> np.ndarray:
        pts = [self.xy[0]]
        for p in self.xy[1:]:
            if np.linalg.norm(p - pts[-1]) > 1e-9:
                pts.append(p)
        return np.array(pts)

    def sample(self, t0: float, rate: float, noise: float,
               rng: np.random.Generator) -> np.ndarray:
        t = np.asarray(self.t)
        xy = np.asarray(self.xy)
        n = int(np.floor(t[-1] * rate)) + 1
        ts = np.arange(n) / rate
        px = np.interp(ts, t, xy[:, 0]) + rng.normal(0.0, noise, n)
        py = np.interp(ts, t, xy[:, 1]) + rng.normal(0.0, noise, n)
        return np.column_stack([t0 + ts, px, py, np.zeros(n)])


def _walk_back(path: _Path, distance: float, speed: float) -> None:
    """Retrace the already-walked polyline for ``distance`` meters."""
    trail = path.traversed()[::-1]
    left = distance
    for p in trail[1:]:
        step = float(np.linalg.norm(p - path.here))
        if step >= left:
            path.move(path.here + (p - path.here) * (left / step), speed)
            return
        path.move(p, speed)
        left -= step


def _magnitude(rng: np.random.Generator, lo: float, hi: float, difficulty: float) -> float:
    """Sample in ``[lo, hi]``; higher difficulty pulls toward the subtle end ``lo``."""
    return lo + (hi - lo) * (1.0 - difficulty * rng.uniform())


@dataclass
class _Passenger:
    entry: str
    gate: str
    t_entry: float


def _flights(cfg: ScenarioConfig, n_gates: int, rng: np.random.Generator):
    dep = np.sort(rng.uniform(cfg.entry_lead[1], cfg.entry_lead[1] + cfg.flight_window,
                              cfg.n_flights))
    return [(float(d), k % n_gates) for k, d in enumerate(dep)]


def _passengers(plan: FloorPlan, cfg: ScenarioConfig, stream: int):
    frng = np.random.default_rng([cfg.rng_seed, stream, 0])
    flights = _flights(cfg, len(plan.gates), frng)
    for k in range(cfg.n_passengers):
        rng = np.random.default_rng([cfg.rng_seed, stream, k + 1])
        dep, gate = flights[k % cfg.n_flights]
        entry = plan.entries[int(rng.integers(len(plan.entries)))]
        t_entry = dep - rng.uniform(*cfg.entry_lead)
        yield k, rng, _Passenger(entry, plan.gates[gate], round(t_entry, 3))


def _route_knots(plan: FloorPlan, cfg: ScenarioConfig, rng: np.random.Generator,
                 pax: _Passenger):
    names = plan.route(pax.entry, pax.gate)
    pts = []
    for n in names:
        j = cfg.checkpoint_jitter if n in plan.checkpoints else cfg.waypoint_jitter
        pts.append(plan.waypoints[n][:2] + _disk(rng, j))
    speeds = np.clip(rng.normal(cfg.speed_mean, cfg.speed_std, len(names) - 1),
                     *cfg.speed_range)
    dwells = rng.uniform(*cfg.dwell, len(names))
    return names, pts, speeds, dwells


def _walk(plan: FloorPlan, names, pts, speeds, dwells, leg_hook=None) -> _Path:
    path = _Path(pts[0])
    for j in range(len(names) - 1):
        if leg_hook is None or not leg_hook(path, j, pts[j], pts[j + 1], speeds[j]):
            path.move(pts[j + 1], speeds[j])
        if names[j + 1] in plan.checkpoints:
            path.wait(dwells[j + 1])
    return path


def generate_normal(plan: FloorPlan, cfg: ScenarioConfig, stream: int = STREAM_TRAIN,
                    prefix: str = "n-") -> list[Trajectory]:
    out = []
    for k, rng, pax in _passengers(plan, cfg, stream):
        names, pts, speeds, dwells = _route_knots(plan, cfg, rng, pax)
        path = _walk(plan, names, pts, speeds, dwells)
        out.append(Trajectory(f"{prefix}{k:05d}",
                              path.sample(pax.t_entry, cfg.sample_rate, cfg.noise_std, rng),
                              NORMAL, meta={"entry": pax.entry, "gate": pax.gate}))
    return out


def _leg_lengths(pts) -> np.ndarray:
    return np.array([np.linalg.norm(pts[j + 1] - pts[j]) for j in range(len(pts) - 1)])


def _inject(archetype: str, plan: FloorPlan, cfg: ScenarioConfig, rng: np.random.Generator,
            names, pts, speeds, dwells):
    """Walk the route with one perturbed leg; returns ``(path, span, meta)``."""
    lengths = _leg_lengths(pts)
    d = cfg.difficulty
    legs = [j for j in range(len(lengths)) if lengths[j] >= 12.0]
    if archetype == "backtracking":
        legs = [j for j in legs if j > 0]
    if archetype == "trespass":
        zone = plan.restricted_zones[int(rng.integers(len(plan.restricted_zones)))]
        centre = zone.mean(axis=0)
        seg_d = [float(np.min(np.linalg.norm(
            np.linspace(pts[j], pts[j + 1], 50) - centre, axis=1))) for j in range(len(lengths))]
        legs = [int(np.argmin(seg_d))]
    leg = legs[int(rng.integers(len(legs)))]
    span = [0.0, 0.0]
    meta = {"archetype": archetype, "leg": [names[leg], names[leg + 1]]}

    def hook(path: _Path, j, a, b, v):
        if j != leg:
            return False
        ab = b - a
        L = float(np.linalg.norm(ab))
        fwd = ab / L
        left = np.array([-fwd[1], fwd[0]])
        if archetype == "sprint":
            k = _magnitude(rng, 1.15 * cfg.sprint_factor, 3.0, d)
            q = a + ab * rng.uniform(0.1, 0.4)
            path.move(q, v)
            span[0] = path.now
            path.move(b, k * cfg.speed_mean)
            span[1] = path.now
            meta["magnitude"] = k
        elif archetype == "loitering":
            q = a + ab * rng.uniform(0.3, 0.7)
            path.move(q, v)
            span[0] = path.now
            duration = _magnitude(rng, 1.15 * cfg.loiter_factor, 5.0, d) * cfg.dwell[1]
            end = path.now + duration
            while path.now < end:
                path.move(q + _disk(rng, 1.2), rng.uniform(0.3, 0.6))
                path.wait(rng.uniform(0.0, 2.0))
            span[1] = path.now
            path.move(b, v)
            meta["magnitude"] = duration
        elif archetype == "backtracking":
            q = a + ab * rng.uniform(0.3, 0.7)
            path.move(q, v)
            span[0] = path.now
            dist = _magnitude(rng, 1.25 * cfg.backtrack_distance, 12.0, d)
            path.wait(rng.uniform(0.5, 2.0))
            _walk_back(path, dist, v)
            path.wait(rng.uniform(0.5, 2.0))
            path.move(q, v)
            span[1] = path.now
            path.move(b, v)
            meta["magnitude"] = dist
        elif archetype == "zigzag":
            u0 = rng.uniform(0.05, 0.25)
            q = a + ab * u0
            path.move(q, v)
            span[0] = path.now
            amp = _magnitude(rng, 1.6 * cfg.zigzag_offset, 2.0, d)
            run = min(rng.uniform(10.0, 16.0), (1.0 - u0) * L - 1.0)
            half = run / int(rng.integers(6, 9))
            s, sign = half, 1.0
            while s < run:
                path.move(q + fwd * s + left * sign * amp, v)
                s += half
                sign = -sign
            path.move(q + fwd * run, v)
            span[1] = path.now
            path.move(b, v)
            meta["magnitude"] = amp
        elif archetype == "trespass":
            q = a + ab * rng.uniform(0.05, 0.25)
            r = a + ab * rng.uniform(0.75, 0.95)
            lo, hi = zone.min(axis=0) + 1.0, zone.max(axis=0) - 1.0
            while True:
                z = rng.uniform(lo, hi)
                if in_polygon(z, zone)[0]:
                    break
            # subtler instances only reach the zone edge nearest the route
            edge = np.array([z[0], np.clip(q[1], lo[1], hi[1])]) if abs(left[1]) > abs(left[0]) \
                else np.array([np.clip(q[0], lo[0], hi[0]), z[1]])
            depth = _magnitude(rng, 0.0, 1.0, d)
            z = edge + depth * (z - edge)
            path.move(q, v)
            span[0] = path.now
            path.move(z, v)
            path.wait(rng.uniform(1.0, 4.0))
            path.move(r, v)
            span[1] = path.now
            path.move(b, v)
            meta["magnitude"] = float(depth)
        return True

    path = _walk(plan, names, pts, speeds, dwells, hook)
    return path, (span[0], span[1]), meta


def generate_abnormal(plan: FloorPlan, cfg: ScenarioConfig, stream: int = STREAM_TEST_ABNORMAL,
                      prefix: str = "a-") -> list[Trajectory]:
    kinds = [a for a in ARCHETYPES if cfg.anomaly_mix.get(a, 0) > 0]
    probs = np.array([cfg.anomaly_mix[a] for a in kinds])
    out = []
    for k, rng, pax in _passengers(plan, cfg, stream):
        archetype = kinds[int(rng.choice(len(kinds), p=probs / probs.sum()))]
        names, pts, speeds, dwells = _route_knots(plan, cfg, rng, pax)
        path, span, meta = _inject(archetype, plan, cfg, rng, names, pts, speeds, dwells)
        meta.update(entry=pax.entry, gate=pax.gate)
        pts_s = path.sample(pax.t_entry, cfg.sample_rate, cfg.noise_std, rng)
        out.append(Trajectory(f"{prefix}{k:05d}", pts_s, ABNORMAL,
                              (round(pax.t_entry + span[0], 6), round(pax.t_entry + span[1], 6)),
                              meta))
    return out


@dataclass
class Benchmark:
    name: str
    plan: FloorPlan
    scenario: ScenarioConfig
    train: list[Trajectory]
    validation: list[Trajectory]
    test_normal: list[Trajectory]
    test_abnormal: list[Trajectory]

    @property
    def test(self) -> list[Trajectory]:
        return self.test_normal + self.test_abnormal


def _scenario(base: ScenarioConfig, n: int) -> ScenarioConfig:
    if n % base.n_flights:
        raise ValueError(f"{n} passengers do not divide into {base.n_flights} flights")
    d = asdict(base)
    d["passengers_per_flight"] = n // base.n_flights
    return ScenarioConfig(**d)


def make_benchmark(name: str, seed: int = 0, n_abnormal: int = PAPER_ABNORMAL_COUNT,
                   n_train: int = 400, n_val_normal: int = 100, n_val_abnormal: int = 60,
                   plan: FloorPlan | None = None,
                   scenario: ScenarioConfig | None = None,
                   n_normal: int | None = None) -> Benchmark:
    """Training normals, a labelled validation set and the test set of one benchmark.

    The test set holds ``BENCHMARK_SIZES[name]`` normal passengers plus
    ``n_abnormal`` abnormal ones. Training and validation draws use seed
    streams that do not depend on ``name``.
    """
    if name not in BENCHMARK_SIZES:
        raise ValueError(f"unknown benchmark {name!r}; choose from {sorted(BENCHMARK_SIZES)}")
    plan = plan or default_plan()
    base = scenario or ScenarioConfig()
    base = ScenarioConfig(**{**asdict(base), "rng_seed": seed})
    n_normal = BENCHMARK_SIZES[name] if n_normal is None else n_normal
    train = generate_normal(plan, _scenario(base, n_train), STREAM_TRAIN, "trn-")
    val = (generate_normal(plan, _scenario(base, n_val_normal), STREAM_VAL_NORMAL, "van-")
           + generate_abnormal(plan, _scenario(base, n_val_abnormal), STREAM_VAL_ABNORMAL, "vaa-"))
    test_n = generate_normal(plan, _scenario(base, n_normal), STREAM_TEST_NORMAL, "tsn-")
    test_a = generate_abnormal(plan, _scenario(base, n_abnormal), STREAM_TEST_ABNORMAL, "tsa-")
    return Benchmark(name, plan, base, train, val, test_n, test_a)
