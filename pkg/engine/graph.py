import logging
from dataclasses import replace

import numpy as np

from engine.ingest import read_text, slot_count, time_index
from models import (
    ACTIVITIES,
    CATEGORIES,
    TIME_MODES,
    BipartiteGraph,
    CategoryPrior,
    HeteroGraph,
    NodeKind,
    ValidationError,
)

logger = logging.getLogger(__name__)

GRAPH_HEADER = "EDHG-GRAPH v1"

# graph name -> (context kind, target kind)
ORIENTATION = {
    "bu": (NodeKind.POI, NodeKind.USER),
    "bt": (NodeKind.POI, NodeKind.TIME),
    "ba": (NodeKind.ACTIVITY, NodeKind.POI),
    "bb": (NodeKind.POI, NodeKind.POI),
}


def _count_pairs(name, context, target, n_context, n_target):
    """Aggregate (context, target) occurrences into a weighted bipartite graph."""
    context_kind, target_kind = ORIENTATION[name]
    context = np.asarray(context, dtype=np.int64)
    target = np.asarray(target, dtype=np.int64)
    keys, counts = np.unique(context * n_target + target, return_counts=True)
    return BipartiteGraph(
        name,
        context_kind,
        target_kind,
        n_context,
        n_target,
        keys // n_target,
        keys % n_target,
        counts.astype(np.float64),
    )


def build_hetero(data, time_mode="28"):
    """Build the POI-user, POI-time and activity-POI views of a dataset."""
    n_slots = slot_count(time_mode)
    user_index = data.user_index
    poi_index = data.poi_index

    unknown = {c.poi_id for c in data.checkins if c.poi_id not in poi_index}
    if unknown:
        raise ValidationError(f"Check-ins reference unknown POIs: {sorted(unknown)[:5]}")

    users = [user_index[c.user_id] for c in data.checkins]
    pois = [poi_index[c.poi_id] for c in data.checkins]
    slots = [time_index(c.timestamp, time_mode).id for c in data.checkins]
    n_users, n_pois = len(user_index), len(poi_index)

    g_bu = _count_pairs("bu", pois, users, n_pois, n_users)
    g_bt = _count_pairs("bt", pois, slots, n_pois, n_slots)

    activity_index = {a: i for i, a in enumerate(ACTIVITIES)}
    activities, activity_pois = [], []
    for poi_id in data.poi_ids:
        for functionality in data.venues[poi_id].functionalities:
            activities.append(activity_index[functionality])
            activity_pois.append(poi_index[poi_id])
    g_ba = _count_pairs("ba", activities, activity_pois, len(ACTIVITIES), n_pois)

    graph = HeteroGraph(
        g_bu=g_bu,
        g_bt=g_bt,
        g_ba=g_ba,
        user_ids=data.user_ids,
        poi_ids=data.poi_ids,
        poi_categories=tuple(data.venues[b].category for b in data.poi_ids),
        time_mode=time_mode,
    )
    logger.info(f"Built {graph!r} with {g_bu.n_edges + g_bt.n_edges + g_ba.n_edges} edges")
    return graph


def add_poi_poi(data, window_hours=4.0):
    """Directed POI transitions between consecutive records within the window."""
    if window_hours <= 0:
        raise ValidationError("window_hours must be positive")
    poi_index = data.poi_index
    window = window_hours * 3600

    sources, destinations = [], []
    for records in data.records_by_user().values():
        ordered = sorted(records, key=lambda c: c.timestamp)
        for prev, nxt in zip(ordered, ordered[1:]):
            if prev.poi_id == nxt.poi_id:
                continue
            if (nxt.timestamp - prev.timestamp).total_seconds() <= window:
                sources.append(poi_index[prev.poi_id])
                destinations.append(poi_index[nxt.poi_id])
    n_pois = len(poi_index)
    return _count_pairs("bb", sources, destinations, n_pois, n_pois)


def with_poi_poi(graph, data, window_hours=4.0):
    return replace(graph, g_bb=add_poi_poi(data, window_hours))


def density(g):
    """Distinct edges over all possible context-target pairs."""
    if g.n_context == 0 or g.n_target == 0:
        raise ValidationError(f"Density of {g.name} is undefined: empty side")
    return g.n_edges / (g.n_context * g.n_target)


def category_prior(data):
    """Share of check-ins landing in POIs of each category."""
    if not data.checkins:
        raise ValidationError("Category prior needs at least one check-in")
    counts = dict.fromkeys(CATEGORIES, 0)
    for record in data.checkins:
        counts[data.venues[record.poi_id].category] += 1
    total = len(data.checkins)
    return CategoryPrior({c: n / total for c, n in counts.items()})


def prior_from_graph(graph):
    """Category prior recovered from POI-user degrees (each check-in adds 1)."""
    degrees = graph.g_bu.degree_context
    total = degrees.sum()
    if total <= 0:
        raise ValidationError("Category prior needs at least one check-in")
    categories = np.asarray(graph.poi_categories)
    return CategoryPrior(
        {c: float(degrees[categories == c].sum() / total) for c in CATEGORIES}
    )


def graph_stats(graph):
    return {
        g.name: {
            "density": density(g),
            "edges": g.n_edges,
            "weight": float(g.weight.sum()),
        }
        for g in graph.views()
    }


# --- Persistence ---


def save_graph(graph, path):
    counts = graph.counts
    lines = [GRAPH_HEADER, f"time_mode {graph.time_mode}"]
    lines += [f"nodes {kind.value} {counts[kind]}" for kind in NodeKind]
    lines += [f"name user {i} {u}" for i, u in enumerate(graph.user_ids)]
    lines += [f"name poi {i} {b}" for i, b in enumerate(graph.poi_ids)]
    lines += [f"name activity {i} {a}" for i, a in enumerate(graph.activities)]
    lines += [f"category {i} {c}" for i, c in enumerate(graph.poi_categories)]
    for g in graph.views():
        lines += [
            f"{g.name} {i} {j} {format(w, '.17g')}"
            for i, j, w in zip(g.context.tolist(), g.target.tolist(), g.weight.tolist())
        ]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def load_graph(path):
    lines = read_text(path).splitlines()
    if not lines or lines[0].strip() != GRAPH_HEADER:
        raise ValidationError(f"{path} is not a graph file (missing {GRAPH_HEADER!r})")

    time_mode = "28"
    counts = {}
    names = {"user": {}, "poi": {}, "activity": {}}
    categories = {}
    edges = {name: ([], [], []) for name in ORIENTATION}

    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(maxsplit=3)
        tag = fields[0]
        try:
            if tag == "time_mode":
                time_mode = fields[1]
            elif tag == "nodes":
                counts[NodeKind(fields[1])] = int(fields[2])
            elif tag == "name":
                names[fields[1]][int(fields[2])] = fields[3]
            elif tag == "category":
                categories[int(fields[1])] = fields[2]
            elif tag in edges:
                context, target, weight = edges[tag]
                context.append(int(fields[1]))
                target.append(int(fields[2]))
                weight.append(float(fields[3]))
            else:
                raise ValidationError(f"Unknown record {tag!r}")
        except (IndexError, KeyError, ValueError) as e:
            raise ValidationError(f"{path}:{line_no}: cannot parse {line!r} ({e})")

    if time_mode not in TIME_MODES or counts.get(NodeKind.TIME) != TIME_MODES[time_mode]:
        raise ValidationError(f"{path}: time slot count does not match mode {time_mode}")

    def ordered(kind, table):
        n = counts.get(kind, 0)
        if sorted(table) != list(range(n)):
            raise ValidationError(f"{path}: {kind.value} names do not cover 0..{n - 1}")
        return tuple(table[i] for i in range(n))

    def view(name):
        context_kind, target_kind = ORIENTATION[name]
        context, target, weight = edges[name]
        return BipartiteGraph(
            name, context_kind, target_kind, counts[context_kind], counts[target_kind],
            context, target, weight,
        )

    poi_ids = ordered(NodeKind.POI, names["poi"])
    return HeteroGraph(
        g_bu=view("bu"),
        g_bt=view("bt"),
        g_ba=view("ba"),
        user_ids=ordered(NodeKind.USER, names["user"]),
        poi_ids=poi_ids,
        poi_categories=ordered(NodeKind.POI, categories),
        activities=ordered(NodeKind.ACTIVITY, names["activity"]),
        time_mode=time_mode,
        g_bb=view("bb") if edges["bb"][0] else None,
    )
