"""Build one day's communication graph and feature matrix from a small synthetic fleet."""

import numpy as np

from gcnetomaly.features import FeatureConfig, extract_features, window_usage
from gcnetomaly.graph import build_adjacency
from gcnetomaly.ingest import label_machine, parse_networks, resolve_machine_ips
from gcnetomaly.synth import PopulationConfig, generate_population

fleet = generate_population(PopulationConfig(n_machines=8, n_days=3, seed=0))
days = [[e for e in fleet.events if fleet.window(d).contains(e.timestamp)] for d in range(3)]
events = days[-1]
graph = build_adjacency(events, resolve_machine_ips(fleet.events))
labels = [label_machine(ip, parse_networks(["10.0.0.0/8"]), fleet.inventory) for ip in graph.ips]
fm, _ = extract_features(events, graph, labels, [window_usage(d) for d in days[:-1]], FeatureConfig(), seed=0)

np.set_printoptions(precision=2, suppress=True, linewidth=140)
print(f"{len(events)} events, {len(graph.keys)} nodes: {graph.keys}")
print("normalized adjacency, machine rows x server columns:")
print(graph.normalized()[-8:, :4])
print("feature blocks:", {k: (s.start, s.stop) for k, s in fm.blocks.items()})
print(f"{graph.keys[-1]} stat features:", {n: round(float(v), 3) for n, v in zip(fm.names[:9], fm.values[-1, :9])})
