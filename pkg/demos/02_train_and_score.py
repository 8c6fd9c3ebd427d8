"""Train on the last day of a clean fleet and print the ranked machines."""

from gcnetomaly.config import RunConfig
from gcnetomaly.pipeline import run_pipeline
from gcnetomaly.scoring import alert_table
from gcnetomaly.synth import PopulationConfig, generate_population

fleet = generate_population(PopulationConfig(n_machines=40, seed=1))
config = RunConfig.build("atm", overrides={"ingest.subset_cidrs": "10.1.0.0/16", "seed": 1})
result = run_pipeline(fleet.events, config, fleet.inventory)
for w in result.windows:
    curve = w.groups[0].curve
    print(f"{w.window.date}: loss {curve[0]['total']:.4f} -> {curve[-1]['total']:.4f}, "
          f"{len(w.anomalies)} alerts of {len(w.reports)}")
    for r in w.reports[:5]:
        print(f"  #{r.rank} {r.machine_key} RE={r.RE:.4f} ratio={r.self_difference:.2f} final={r.final_anomaly_score:.4f}")
print(alert_table(result.windows[-1].reports[:1]))
