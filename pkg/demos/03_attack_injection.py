"""Inject the two-target C2 scenario and show where the targets land in the ranking."""

import sys

from gcnetomaly.config import RunConfig
from gcnetomaly.pipeline import run_pipeline
from gcnetomaly.synth import AttackSpec, PopulationConfig, generate_population, inject_attack

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
fleet = generate_population(PopulationConfig(seed=seed))
events, targets = inject_attack(fleet.events, AttackSpec(seed=seed), machine_ips=fleet.machine_ips)
print(f"seed {seed}: {len(events)} events, targets {targets}")
for ablation in ("vae", "ae", "no-embedding"):
    config = RunConfig.build("atm", overrides={"ingest.subset_cidrs": "10.1.0.0/16", "seed": seed,
                                               "ablation": ablation})
    window = run_pipeline(events, config, fleet.inventory).windows[-1]
    ranks = sorted(r.rank for r in window.reports if r.machine_key in targets)
    top = window.reports[0]
    print(f"{ablation:>12}: target ranks {ranks}, alerts {len(window.anomalies)}, "
          f"top {top.machine_key} final={top.final_anomaly_score:.3f}")
    for e in top.explanations[:3]:
        print(f"{'':>14}{e.name} true={e.true_value:.2f} recon={e.reconstructed:.2f}")
