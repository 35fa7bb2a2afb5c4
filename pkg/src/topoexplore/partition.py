"""Graph Voronoi task allocation over the shared topological graph.

Nodes are assigned to the closest agent by graph distance (one multi-source
sweep of a single priority queue, not threads). Identical replicas give every
agent the same ownership map, so allocation needs no coordination round.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

from .dtg import EroiState, MrDtg, NodeKey, agent_key

# Link distances can be exactly 0 when an agent stands on a node; clamp so
# search-graph weights stay strictly positive.
_MIN_WEIGHT = 1e-9


@dataclass
class SearchGraph:
    nodes: set = field(default_factory=set)
    adjacency: dict = field(default_factory=dict)
    sources: list = field(default_factory=list)  # (agent_id, node_key)

    def add_node(self, key: NodeKey):
        self.nodes.add(key)
        self.adjacency.setdefault(key, [])

    def add_edge(self, a: NodeKey, b: NodeKey, w: float):
        w = max(float(w), _MIN_WEIGHT)
        self.add_node(a)
        self.add_node(b)
        for i, (nbr, old) in enumerate(self.adjacency[a]):
            if nbr == b:
                if w < old:  # parallel edges collapse to the cheapest
                    self.adjacency[a][i] = (b, w)
                    j = self.adjacency[b].index((a, old))
                    self.adjacency[b][j] = (a, w)
                return
        self.adjacency[a].append((b, w))
        self.adjacency[b].append((a, w))

    def finalize(self):
        """Canonical adjacency order so results never depend on build order."""
        for key in self.adjacency:
            self.adjacency[key].sort()
        self.sources.sort()


@dataclass
class PartitionResult:
    owner: dict  # node_key -> agent_id
    dist: dict  # node_key -> meters


@dataclass
class LocalAllocation:
    erois: set = field(default_factory=set)


@dataclass
class GlobalAllocation:
    history_nodes: set = field(default_factory=set)


def multi_source_dijkstra(g: SearchGraph) -> PartitionResult:
    """Ownership = closest source by graph distance, ties to the smallest
    agent id; unreachable nodes appear in neither map."""
    g.finalize()
    owner = {}
    dist = {}
    heap = []
    for agent_id, key in g.sources:
        if key not in g.nodes:
            continue
        heapq.heappush(heap, (0.0, agent_id, key))
    while heap:
        d, src, u = heapq.heappop(heap)
        if u in dist:
            continue
        dist[u] = d
        owner[u] = src
        for v, w in g.adjacency.get(u, ()):
            if v not in dist:
                heapq.heappush(heap, (d + w, src, v))
    return PartitionResult(owner=owner, dist=dist)


def build_local_graph(dtg: MrDtg, agent: int) -> SearchGraph:
    """The agent-centric neighborhood used for local allocation.

    Members: history nodes the agent links to; regions linked by the agent or
    connected to those nodes; peers linked to any of these members. The
    querying agent is always a source; included peers are sources too.
    """
    g = SearchGraph()
    me = agent_key(agent)
    g.add_node(me)
    my_links = dtg.uav_links.get(agent, {})

    n_h = {k for k in my_links if k[0] == "h" and k in dtg.nodes}
    n_e = {k for k in my_links
           if k[0] == "e" and dtg.erois[k[1]].state == EroiState.ACTIVE}
    for edge in dtg.edges.values():
        eid = edge.eroi_id
        if eid is None:
            continue
        a, b = edge.key
        nkey = b if a[0] == "e" else a
        ekey = a if a[0] == "e" else b
        if nkey in n_h and dtg.erois[eid].state == EroiState.ACTIVE:
            n_e.add(ekey)

    peers = set()
    for other, links in sorted(dtg.uav_links.items()):
        if other == agent:
            continue
        if any(k in n_h or k in n_e for k in links):
            peers.add(other)

    members = n_h | n_e
    for key in sorted(members):
        g.add_node(key)
    for a, b, w in _link_edges(dtg, [agent] + sorted(peers), members):
        g.add_edge(a, b, w)
    for edge in dtg.edges.values():
        a, b = edge.key
        if a in members and b in members:
            g.add_edge(a, b, edge.weight)

    g.sources.append((agent, me))
    for p in sorted(peers):
        g.add_node(agent_key(p))
        g.sources.append((p, agent_key(p)))
    return g


def _link_edges(dtg: MrDtg, agents, members):
    out = []
    for a in agents:
        akey = agent_key(a)
        for key, w in sorted(dtg.uav_links.get(a, {}).items()):
            if key in members:
                out.append((akey, key, w))
    return out


def local_partition(dtg: MrDtg, agent: int) -> LocalAllocation:
    """Regions of the local graph owned by the querying agent."""
    g = build_local_graph(dtg, agent)
    result = multi_source_dijkstra(g)
    mine = {key[1] for key, own in result.owner.items() if key[0] == "e" and own == agent}
    return LocalAllocation(erois=mine)


def build_global_graph(dtg: MrDtg) -> SearchGraph:
    """All history nodes plus all agents; regions stay out of this level."""
    g = SearchGraph()
    for key in sorted(dtg.nodes):
        g.add_node(key)
    for edge in dtg.edges.values():
        if edge.is_eroi_edge:
            continue
        a, b = edge.key
        g.add_edge(a, b, edge.weight)
    for a, links in sorted(dtg.uav_links.items()):
        akey = agent_key(a)
        g.add_node(akey)
        g.sources.append((a, akey))
        for key, w in sorted(links.items()):
            if key[0] == "h" and key in dtg.nodes:
                g.add_edge(akey, key, w)
    return g


def global_partition(dtg: MrDtg, agent: int) -> GlobalAllocation:
    """History nodes owned by the querying agent under the global sweep."""
    g = build_global_graph(dtg)
    result = multi_source_dijkstra(g)
    mine = {key for key, own in result.owner.items() if key[0] == "h" and own == agent}
    return GlobalAllocation(history_nodes=mine)
