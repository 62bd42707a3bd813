"""Synthetic multimodal transit network, choice-set enumeration and choice simulation.

The generator replaces proprietary smart-card data.  Networks are built from
straight rail corridors and meandering bus routes; stops of different lines
close enough to walk between form transfer pairs.  Routes are enumerated per
category (Bus, BusBus, Rail, BusRail, RailBus, BusRailBus) and the five
fastest of each are kept.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .core import (
    LANDUSE_DIM,
    MAX_PER_CATEGORY,
    CardType,
    Category,
    ChoiceObservation,
    Route,
    StructuralError,
)
from .features import TransformSpec, transform_values
from .models.dcm import path_size

ZONING_CATEGORIES = (
    "Utility", "Open Space", "Place of Worship", "Port/Airport", "Business 2", "Sports",
    "Recreation", "Waterbody", "Agriculture", "Special Use", "Commercial", "Residential",
    "Transport Facilities", "Commercial & Residential", "Civic & Community Institution",
    "Health & Medical Center", "Residential with Commercial at 1st storey", "Park",
    "Mass Rapid Transit", "Business 1", "Beach Area", "Light Rapid Transit", "Cemetery",
    "Business Park", "White", "Hotel", "Business 2 - White", "Business 1 - White",
    "Residential / Institution", "Business Park - White",
)
COMMERCIAL = ZONING_CATEGORIES.index("Commercial")
RESIDENTIAL = ZONING_CATEGORIES.index("Residential")
MRT = ZONING_CATEGORIES.index("Mass Rapid Transit")

MAX_TRANSFERS = 5
MAX_JOURNEY_SECONDS = 2 * 3600
MAX_TRANSFER_SECONDS = 45 * 60
WALK_SPEED_MPS = 1.2
BASE_FARE_CENTS = 92
BASE_FARE_METERS = 3200
FARE_CENTS_PER_KM = 9.0
MAX_FARE_CENTS = 217


@dataclass(frozen=True)
class NetworkConfig:
    rail_lines: int = 2
    rail_stops: int = 10
    bus_routes: int = 5
    bus_stops: int = 15
    transfer_radius_m: float = 500.0
    transfer_density: float = 1.0
    area_m: float = 12_000.0
    rail_spacing_m: float = 1_300.0
    bus_spacing_m: float = 550.0
    rail_speed_mps: float = 11.0
    bus_speed_mps: float = 5.0
    rail_dwell_s: int = 30
    bus_dwell_s: int = 20

    def __post_init__(self):
        if self.rail_lines < 0 or self.bus_routes < 0:
            raise StructuralError("line counts must be non-negative")
        if self.rail_lines * self.rail_stops + self.bus_routes * self.bus_stops == 0:
            raise StructuralError("network config produces zero stops")
        if (self.rail_lines and self.rail_stops < 2) or (self.bus_routes and self.bus_stops < 2):
            raise StructuralError("every line needs at least two stops")
        if not 0.0 <= self.transfer_density <= 1.0:
            raise StructuralError("transfer_density must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)


@dataclass
class SyntheticNetwork:
    """Stops, line-ordered links and walkable transfer pairs."""

    coords: np.ndarray
    node_line: np.ndarray
    node_mode: list
    landuse: np.ndarray
    lines: list
    edges: dict
    transfer_pairs: dict
    config: NetworkConfig = field(default_factory=NetworkConfig)

    @property
    def n_nodes(self):
        return len(self.node_mode)

    def line_mode(self, line):
        return self.lines[line][0]

    def line_stops(self, line):
        return self.lines[line][1]

    def transfers_from(self, node):
        return self._adjacency.get(node, ())

    def __post_init__(self):
        adj = {}
        for (u, v), w in sorted(self.transfer_pairs.items()):
            adj.setdefault(u, []).append((v, w))
        self._adjacency = adj
        self._position = {}
        for li, (_, stops) in enumerate(self.lines):
            for k, s in enumerate(stops):
                self._position[s] = (li, k)

    def position(self, node):
        return self._position[node]


def landuse_archetypes():
    """Four fixed zoning profiles (rows sum to one) that station land use mixes.

    Real zoning shares are strongly correlated; mixing a few profiles keeps
    that structure and makes land use effectively low dimensional.
    """
    a = np.full((4, LANDUSE_DIM), 0.01)
    a[0, [COMMERCIAL, ZONING_CATEGORIES.index("Business 1"), ZONING_CATEGORIES.index("Hotel"),
          ZONING_CATEGORIES.index("Commercial & Residential")]] += [0.45, 0.15, 0.1, 0.1]
    a[1, [RESIDENTIAL, ZONING_CATEGORIES.index("Park"),
          ZONING_CATEGORIES.index("Civic & Community Institution")]] += [0.55, 0.15, 0.1]
    a[2, [MRT, ZONING_CATEGORIES.index("Transport Facilities"), COMMERCIAL]] += [0.45, 0.2, 0.1]
    a[3, [ZONING_CATEGORIES.index("Business 2"), ZONING_CATEGORIES.index("Business Park"),
          ZONING_CATEGORIES.index("Utility"), ZONING_CATEGORIES.index("Open Space")]] += [0.35, 0.2, 0.1, 0.1]
    return a / a.sum(axis=1, keepdims=True)


_ARCHETYPE_ALPHA = {"rail": np.array([0.6, 0.3, 0.9, 0.3]), "bus": np.array([0.4, 0.8, 0.2, 0.4])}


def _mixed_landuse(rng, mode):
    weights = rng.dirichlet(_ARCHETYPE_ALPHA[mode])
    unzoned = rng.uniform(0.0, 0.15)
    return (weights @ landuse_archetypes()) * (1.0 - unzoned)


def _rail_polyline(rng, cfg):
    angle = rng.uniform(0, np.pi)
    direction = np.array([np.cos(angle), np.sin(angle)])
    center = rng.uniform(0.35, 0.65, size=2) * cfg.area_m
    half = 0.5 * (cfg.rail_stops - 1) * cfg.rail_spacing_m
    offsets = np.linspace(-half, half, cfg.rail_stops)
    jitter = rng.normal(0, 0.05 * cfg.rail_spacing_m, size=(cfg.rail_stops, 2))
    return center + offsets[:, None] * direction + jitter


def _bus_polyline(rng, cfg):
    start = rng.uniform(0.05, 0.95, size=2) * cfg.area_m
    target = rng.uniform(0.3, 0.7, size=2) * cfg.area_m
    heading = np.arctan2(*(target - start)[::-1])
    pts = [start]
    for _ in range(cfg.bus_stops - 1):
        heading += rng.normal(0, 0.35)
        step = cfg.bus_spacing_m * rng.uniform(0.8, 1.2)
        pts.append(pts[-1] + step * np.array([np.cos(heading), np.sin(heading)]))
    return np.array(pts)


def generate_network(config=NetworkConfig(), seed=0):
    """Build a deterministic synthetic network for ``(config, seed)``."""
    rng = np.random.default_rng(seed)
    coords, node_line, node_mode, landuse, lines, edges = [], [], [], [], [], {}
    layout = [("rail", _rail_polyline)] * config.rail_lines + [("bus", _bus_polyline)] * config.bus_routes
    for li, (mode, make) in enumerate(layout):
        pts = make(rng, config)
        stops = list(range(len(coords), len(coords) + len(pts)))
        for p in pts:
            coords.append(p)
            node_line.append(li)
            node_mode.append(mode)
            landuse.append(_mixed_landuse(rng, mode))
        speed = config.rail_speed_mps if mode == "rail" else config.bus_speed_mps
        dwell = config.rail_dwell_s if mode == "rail" else config.bus_dwell_s
        for a, b in zip(stops[:-1], stops[1:]):
            meters = float(np.linalg.norm(coords[a] - coords[b]))
            seconds = max(1, int(round(meters / speed + dwell)))
            edges[(a, b)] = (mode, seconds, meters)
            edges[(b, a)] = (mode, seconds, meters)
        lines.append((mode, stops))
    coords = np.array(coords)
    node_line = np.array(node_line)
    transfer_pairs = {}
    if config.transfer_radius_m > 0 and config.transfer_density > 0:
        diff = coords[:, None, :] - coords[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        keep = rng.random(dist.shape) < config.transfer_density
        keep = np.triu(keep, 1)
        keep = keep | keep.T
        for u, v in zip(*np.nonzero((dist <= config.transfer_radius_m) & keep)):
            if node_line[u] == node_line[v]:
                continue
            # Walk path length includes a detour factor; zero-distance pairs still cost a minute.
            transfer_pairs[(int(u), int(v))] = max(60, int(round(1.3 * dist[u, v] / WALK_SPEED_MPS)))
    return SyntheticNetwork(coords, node_line, node_mode, np.array(landuse), lines, edges,
                            transfer_pairs, config)


def fare_cents(meters):
    """Distance-based piecewise-linear tariff starting at the base fare."""
    extra_km = max(0.0, meters - BASE_FARE_METERS) / 1000.0
    return int(min(MAX_FARE_CENTS, round(BASE_FARE_CENTS + FARE_CENTS_PER_KM * extra_km)))


def _ride(net, line, a, b):
    stops = net.line_stops(line)
    i, j = stops.index(a), stops.index(b)
    seq = stops[i:j + 1] if j > i else stops[j:i + 1][::-1]
    links = list(zip(seq[:-1], seq[1:]))
    secs = [net.edges[l][1] for l in links]
    meters = sum(net.edges[l][2] for l in links)
    return links, secs, meters


def _legs_for(net, origin, dest, modes):
    """Yield candidate leg plans ``[(line, board, alight), ...]`` and walk pairs."""
    o_line, d_line = net.node_line[origin], net.node_line[dest]
    if net.line_mode(o_line) != modes[0] or net.line_mode(d_line) != modes[-1]:
        return
    if len(modes) == 1:
        if o_line == d_line:
            yield [(o_line, origin, dest)], []
        return
    if o_line == d_line:
        return

    def ride_then_walk(line, board):
        for s in net.line_stops(line):
            if s == board:
                continue
            for s2, walk in net.transfers_from(s):
                yield s, s2, walk

    if len(modes) == 2:
        for s, s2, walk in ride_then_walk(o_line, origin):
            if net.node_line[s2] == d_line and s2 != dest:
                yield [(o_line, origin, s), (d_line, s2, dest)], [(s, s2, walk)]
        return
    for s, s2, walk in ride_then_walk(o_line, origin):
        mid = net.node_line[s2]
        if mid in (o_line, d_line) or net.line_mode(mid) != modes[1]:
            continue
        for t, t2, walk2 in ride_then_walk(mid, s2):
            if net.node_line[t2] == d_line and t2 != dest:
                yield ([(o_line, origin, s), (mid, s2, t), (d_line, t2, dest)],
                       [(s, s2, walk), (t, t2, walk2)])


def _build_route(net, category, legs, walks, origin, dest):
    links, costs, meters = [], [], 0.0
    for k, (line, a, b) in enumerate(legs):
        l, c, m = _ride(net, line, a, b)
        links += l
        costs += c
        meters += m
        if k < len(walks):
            s, s2, w = walks[k]
            links.append((s, s2))
            costs.append(w)
    ivtt = sum(c for l, c in zip(links, costs) if l in net.edges)
    walk = sum(w for _, _, w in walks)
    xfer = np.zeros(LANDUSE_DIM)
    if walks:
        # Land use of the first transfer station; multi-transfer routes average theirs.
        xfer = np.mean([net.landuse[s2] for _, s2, _ in walks], axis=0)
    return Route(
        ivtt_seconds=int(ivtt),
        fare_cents=fare_cents(meters),
        walk_transfer_seconds=int(walk),
        num_transfers=len(walks),
        links=[tuple(int(x) for x in l) for l in links],
        link_costs=costs,
        category=category,
        origin_landuse=net.landuse[origin],
        dest_landuse=net.landuse[dest],
        transfer_landuse=xfer,
    )


def enumerate_choice_set(net, od, top_k=MAX_PER_CATEGORY):
    """Feasible routes per category, the ``top_k`` fastest of each.

    Fastest means smallest IVTT plus transfer walk time; ties go to fewer
    transfers, then the lexicographically smaller link sequence.  Routes
    breaking the transfer rules (more than five transfers, any transfer over
    45 minutes, journey over two hours) are dropped.
    """
    origin, dest = od
    if origin == dest:
        raise StructuralError("origin and destination must differ")
    for n in od:
        if not 0 <= n < net.n_nodes:
            raise StructuralError(f"node {n} is not in the network")
    out = []
    for category in Category:
        found = []
        for legs, walks in _legs_for(net, origin, dest, category.legs):
            if len(walks) > MAX_TRANSFERS or any(w > MAX_TRANSFER_SECONDS for *_, w in walks):
                continue
            route = _build_route(net, category, legs, walks, origin, dest)
            if route.journey_seconds > MAX_JOURNEY_SECONDS:
                continue
            found.append(route)
        found.sort(key=lambda r: (r.journey_seconds, r.num_transfers, r.links))
        out.extend(found[:top_k])
    return out


@dataclass
class GroundTruthUtility:
    """Systematic utility used to simulate choices.

    ``beta_linear`` multiplies the four log-transformed policy attributes.
    Optional terms add quadratic policy effects, linear and interacted
    transfer-station land-use effects, a saturating land-use effect and a
    path-size (route overlap) term.  With
    only ``beta_linear`` set the generator is an exact MNL process.
    """

    beta_linear: np.ndarray = field(default_factory=lambda: np.array([-2.5, -1.0, -3.0, -3.7]))
    beta_quadratic: np.ndarray | None = None
    beta_landuse: np.ndarray | None = None
    landuse_interaction: np.ndarray | None = None
    card_landuse: np.ndarray | None = None
    landuse_threshold: dict | None = None
    beta_pathsize: float | None = None
    gumbel_scale: float = 1.0
    transform: TransformSpec = field(default_factory=TransformSpec)

    def __post_init__(self):
        if not self.gumbel_scale > 0:
            raise StructuralError("gumbel_scale must be positive")
        self.beta_linear = np.asarray(self.beta_linear, dtype=np.float64)
        if self.beta_quadratic is not None:
            q = np.asarray(self.beta_quadratic, dtype=np.float64)
            if q.shape != (4, 4) or not np.allclose(q, q.T):
                raise StructuralError("beta_quadratic must be a symmetric 4x4 matrix")
            self.beta_quadratic = q
        for name in ("beta_landuse", "landuse_interaction", "card_landuse"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=np.float64))

    @property
    def is_mnl(self):
        return all(getattr(self, k) is None for k in
                   ("beta_quadratic", "beta_landuse", "landuse_interaction", "card_landuse",
                    "landuse_threshold", "beta_pathsize"))

    def utilities(self, routes, card_type):
        x = transform_values(
            [r.ivtt_seconds for r in routes], [r.fare_cents for r in routes],
            [r.walk_transfer_seconds for r in routes], [r.num_transfers for r in routes],
            self.transform,
        )
        v = x @ self.beta_linear
        if self.beta_quadratic is not None:
            v = v + np.einsum("ri,ij,rj->r", x, self.beta_quadratic, x)
        xfer = np.array([r.transfer_landuse for r in routes])
        orig = np.array([r.origin_landuse for r in routes])
        if self.beta_landuse is not None:
            v = v + xfer @ self.beta_landuse
        if self.landuse_interaction is not None:
            v = v + np.einsum("ri,ij,rj->r", orig, self.landuse_interaction, xfer)
        if self.card_landuse is not None:
            v = v + xfer @ self.card_landuse[card_type.index]
        if self.landuse_threshold is not None:
            th = self.landuse_threshold
            score = xfer @ np.asarray(th["weights"], dtype=np.float64)
            has = np.array([r.num_transfers > 0 for r in routes])
            v = v + th["amplitude"] * has * np.tanh(th["sharpness"] * (score - th["threshold"]))
        if self.beta_pathsize is not None:
            v = v + self.beta_pathsize * path_size(routes).ln_ps
        return v

    def to_dict(self):
        conv = lambda v: None if v is None else np.asarray(v).tolist()  # noqa: E731
        th = self.landuse_threshold
        return {
            "beta_linear": conv(self.beta_linear),
            "beta_quadratic": conv(self.beta_quadratic),
            "beta_landuse": conv(self.beta_landuse),
            "landuse_interaction": conv(self.landuse_interaction),
            "card_landuse": conv(self.card_landuse),
            "landuse_threshold": None if th is None else {k: conv(v) for k, v in th.items()},
            "beta_pathsize": self.beta_pathsize,
            "gumbel_scale": self.gumbel_scale,
            "transform": asdict(self.transform),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["transform"] = TransformSpec(**d.get("transform", {}))
        return cls(**d)


DEFAULT_CARD_SHARES = (0.15, 0.7, 0.15)


def simulate_choices(net, od_pairs, truth, seed=0, card_shares=DEFAULT_CARD_SHARES, choice_sets=None):
    """Draw one observation per entry of ``od_pairs`` (repeats allowed).

    Choices maximise ``V + gumbel_scale * G`` with ``G`` standard Gumbel.
    ``choice_sets`` may supply precomputed sets keyed by OD pair.
    """
    rng = np.random.default_rng(seed)
    cache = {} if choice_sets is None else dict(choice_sets)
    cards = list(CardType)
    shares = np.asarray(card_shares, dtype=np.float64)
    shares = shares / shares.sum()
    out = []
    utility_cache = {}
    for od in od_pairs:
        od = tuple(int(n) for n in od)
        routes = cache.get(od)
        if routes is None:
            routes = cache[od] = enumerate_choice_set(net, od)
        if not routes:
            raise StructuralError(f"OD {od} has an empty choice set")
        card = cards[rng.choice(len(cards), p=shares)]
        v = utility_cache.get((od, card))
        if v is None:
            v = utility_cache[(od, card)] = truth.utilities(routes, card)
        noise = rng.gumbel(size=len(routes))
        chosen = int(np.argmax(v + truth.gumbel_scale * noise))
        out.append(ChoiceObservation(od, routes, chosen, card))
    return out


def feasible_od_pairs(net, n_od, seed=0, min_alternatives=2, max_tries=None):
    """Sample ``n_od`` distinct OD pairs whose choice sets have enough routes.

    Returns ``(od_list, choice_sets)``.
    """
    rng = np.random.default_rng(seed)
    n = net.n_nodes
    max_tries = max_tries or 50 * n_od + 1000
    chosen, sets, seen = [], {}, set()
    for _ in range(max_tries):
        if len(chosen) == n_od:
            break
        o, d = (int(x) for x in rng.choice(n, size=2, replace=False))
        if (o, d) in seen:
            continue
        seen.add((o, d))
        routes = enumerate_choice_set(net, (o, d))
        if len(routes) >= min_alternatives:
            chosen.append((o, d))
            sets[(o, d)] = routes
    return chosen, sets


def generate_dataset(net, truth, n_observations, n_od, seed=0, card_shares=DEFAULT_CARD_SHARES,
                     min_alternatives=2):
    """Sample OD pairs, then ``n_observations`` journeys spread uniformly over them."""
    ods, sets = feasible_od_pairs(net, n_od, seed=seed, min_alternatives=min_alternatives)
    if not ods:
        raise StructuralError("no OD pair with a feasible choice set")
    rng = np.random.default_rng([seed, 1])
    picks = rng.integers(len(ods), size=n_observations)
    return simulate_choices(net, [ods[i] for i in picks], truth, seed=seed + 1,
                            card_shares=card_shares, choice_sets=sets)
