"""
How functional is a relation?
=============================

A relation is functional when each head has a single tail. The score is the
number of distinct heads over the number of distinct head/tail pairs, and the
inverse score does the same from the tail side.
"""
from kgalign.kg import KnowledgeGraph, functionality_table

# two cities located in one country
names = ["Paris", "Lyon", "France", "Berlin", "Germany"]
triples = [(0, 0, 2), (1, 0, 2), (3, 0, 4), (2, 1, 4), (4, 1, 2)]
g = KnowledgeGraph(names, ["locate_in", "borders"], triples)

for rel, (f, finv, size) in functionality_table(g).items():
    print(f"{rel:10s} F={f:.3f}  F^-1={finv:.3f}  triples={size}")

# each relation also gets a reversed copy whose scores are swapped
r = g.relation_names.index("locate_in")
print("reversed locate_in:", g.functionality(r + g.num_relations), "=", g.inverse_functionality(r))



def rel_name(rel):
    n = g.num_relations
    return g.relation_names[rel] if rel < n else g.relation_names[rel - n] + "^-1"


# outgoing edges include the reversed ones, so France reaches its cities
print("neighbours of France:", [(rel_name(rel), g.entity_names[t]) for rel, t in g.neighbors_out(2)])
