"""Dataset files: a JSON network (stops, links, routes) and JSON-lines observations.

Observations carry raw route attributes so transforms stay a pipeline step;
link lists and costs live once per route in the network file.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..core import CardType, Category, ChoiceObservation, Route, StructuralError
from ..datagen import NetworkConfig, SyntheticNetwork

NETWORK_FILE = "network.json"
OBSERVATIONS_FILE = "observations.jsonl"
FORMAT_VERSION = 1
_RAW = ("ivtt_seconds", "fare_cents", "walk_transfer_seconds", "num_transfers")


class DataError(Exception):
    """Dataset files are missing, malformed or inconsistent."""


def _transfer_stations(net, route):
    return [int(b) for a, b in route.links if (a, b) not in net.edges]


def network_to_dict(net, routes=()):
    return {
        "format_version": FORMAT_VERSION,
        "config": net.config.to_dict(),
        "coords": np.asarray(net.coords).tolist(),
        "node_line": [int(x) for x in net.node_line],
        "node_mode": list(net.node_mode),
        "landuse": np.asarray(net.landuse).tolist(),
        "lines": [[mode, [int(s) for s in stops]] for mode, stops in net.lines],
        "edges": [[int(u), int(v), m, int(s), float(d)] for (u, v), (m, s, d) in sorted(net.edges.items())],
        "transfer_pairs": [[int(u), int(v), int(w)] for (u, v), w in sorted(net.transfer_pairs.items())],
        "routes": [
            {
                "id": k,
                "category": r.category.value,
                "origin": int(r.links[0][0]),
                "destination": int(r.links[-1][1]),
                **{f: int(getattr(r, f)) for f in _RAW},
                "links": [[int(a), int(b)] for a, b in r.links],
                "link_costs": [float(c) for c in r.link_costs],
                "transfer_stations": _transfer_stations(net, r),
            }
            for k, r in enumerate(routes)
        ],
    }


def network_from_dict(d):
    net = SyntheticNetwork(
        coords=np.array(d["coords"], dtype=np.float64),
        node_line=np.array(d["node_line"], dtype=np.int64),
        node_mode=list(d["node_mode"]),
        landuse=np.array(d["landuse"], dtype=np.float64),
        lines=[(mode, list(stops)) for mode, stops in d["lines"]],
        edges={(u, v): (m, s, dist) for u, v, m, s, dist in d["edges"]},
        transfer_pairs={(u, v): w for u, v, w in d["transfer_pairs"]},
        config=NetworkConfig(**d["config"]),
    )
    routes = []
    for rec in d.get("routes", []):
        stations = rec["transfer_stations"]
        xfer = np.mean([net.landuse[s] for s in stations], axis=0) if stations else np.zeros(net.landuse.shape[1])
        routes.append(Route(
            **{f: rec[f] for f in _RAW},
            links=[tuple(link) for link in rec["links"]],
            link_costs=rec["link_costs"],
            category=Category(rec["category"]),
            origin_landuse=net.landuse[rec["origin"]],
            dest_landuse=net.landuse[rec["destination"]],
            transfer_landuse=xfer,
        ))
    return net, routes


def write_dataset(out_dir, net, observations):
    """Write ``network.json`` and ``observations.jsonl`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids, routes = {}, []
    for obs in observations:
        for r in obs.alternatives:
            if id(r) not in ids:
                ids[id(r)] = len(routes)
                routes.append(r)
    (out / NETWORK_FILE).write_text(json.dumps(network_to_dict(net, routes), separators=(",", ":")) + "\n")
    with open(out / OBSERVATIONS_FILE, "w") as fh:
        for obs in observations:
            rec = {
                "od": [int(obs.od_pair[0]), int(obs.od_pair[1])],
                "card": obs.card_type.value,
                "chosen": int(obs.chosen),
                "alternatives": [
                    {"route": ids[id(r)], "category": r.category.value, **{f: int(getattr(r, f)) for f in _RAW}}
                    for r in obs.alternatives
                ],
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    return out / NETWORK_FILE, out / OBSERVATIONS_FILE


def read_dataset(data_dir):
    """Load ``(network, observations)``; raw attributes are checked against the route table."""
    data_dir = Path(data_dir)
    try:
        net, routes = network_from_dict(json.loads((data_dir / NETWORK_FILE).read_text()))
    except FileNotFoundError as e:
        raise DataError(f"missing network file {data_dir / NETWORK_FILE}") from e
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed network file: {e}") from e
    observations = []
    try:
        fh = open(data_dir / OBSERVATIONS_FILE)
    except FileNotFoundError as e:
        raise DataError(f"missing observations file {data_dir / OBSERVATIONS_FILE}") from e
    with fh:
        for line_no, line in enumerate(fh, 1):
            try:
                rec = json.loads(line)
                alts = []
                for a in rec["alternatives"]:
                    r = routes[a["route"]]
                    if a["category"] != r.category.value or any(a[f] != getattr(r, f) for f in _RAW):
                        raise DataError(f"line {line_no}: alternative disagrees with route {a['route']}")
                    alts.append(r)
                observations.append(ChoiceObservation(tuple(rec["od"]), alts, rec["chosen"], CardType(rec["card"])))
            except DataError:
                raise
            except (KeyError, IndexError, TypeError, ValueError, StructuralError) as e:
                raise DataError(f"{OBSERVATIONS_FILE} line {line_no}: {e}") from e
    if not observations:
        raise DataError("dataset holds no observations")
    return net, observations


def dataset_summary(observations):
    sizes = [len(o.alternatives) for o in observations]
    return {
        "n_observations": len(observations),
        "n_od_pairs": len({o.od_pair for o in observations}),
        "mean_choice_set_size": float(np.mean(sizes)),
    }
