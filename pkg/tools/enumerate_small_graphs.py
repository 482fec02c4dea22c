"""Write every connected graph on 2..8 nodes (up to isomorphism) as graph6.

Graphs on <= 7 nodes come from the networkx atlas; 8-node graphs are produced
by attaching a new vertex to every 7-node graph in every possible way and
deduplicating with pynauty certificates. Only needed to refresh
tests/data/connected_graphs_le8.g6.
"""

import itertools
import sys

import networkx as nx
import pynauty


def certificate(g: nx.Graph) -> bytes:
    n = g.number_of_nodes()
    adj = {v: [u for u in g.neighbors(v)] for v in range(n)}
    return pynauty.certificate(pynauty.Graph(n, adjacency_dict=adj))


def main(path: str) -> None:
    atlas = nx.graph_atlas_g()
    out = [g for g in atlas if 2 <= g.number_of_nodes() <= 7 and nx.is_connected(g)]
    seven = [g for g in atlas if g.number_of_nodes() == 7]
    seen = set()
    for g in seven:
        for r in range(1, 8):
            for nbrs in itertools.combinations(range(7), r):
                h = g.copy()
                h.add_node(7)
                h.add_edges_from((7, v) for v in nbrs)
                if not nx.is_connected(h):
                    continue
                c = certificate(h)
                if c in seen:
                    continue
                seen.add(c)
                out.append(h)
    with open(path, "wb") as fh:
        for g in out:
            fh.write(nx.to_graph6_bytes(g, header=False))
    counts = {}
    for g in out:
        counts[g.number_of_nodes()] = counts.get(g.number_of_nodes(), 0) + 1
    print(counts)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "tests/data/connected_graphs_le8.g6")
