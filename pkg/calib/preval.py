"""One-off sizing runs for the acceptance suite's standalone scenarios."""

import gc
import json
import time

from bilayer.harness import (
    doublespend_summary,
    run_leader_crash_trials,
    run_scenario,
    selfish_summary,
    with_updates,
)
from bilayer.scenario import load_bundled_scenario

out = {}

t0 = time.time()
report = run_leader_crash_trials(load_bundled_scenario("crash-10node"), trials=100)
out["crash"] = {
    "trials": len(report.trials),
    "all_recovered": report.all_recovered,
    "window_s": report.window_s,
    "worst_s": max((t.recovery_s for t in report.trials), default=-1.0),
    "wall": round(time.time() - t0, 1),
}
del report
gc.collect()
print("crash", json.dumps(out["crash"]), flush=True)

t0 = time.time()
res = run_scenario(load_bundled_scenario("attack-selfish"))
s = selfish_summary(res)
s["wall"] = round(time.time() - t0, 1)
out["selfish"] = s
del res
gc.collect()
print("selfish", json.dumps(s), flush=True)

for alpha in (0.2, 0.3):
    t0 = time.time()
    scn = with_updates(
        load_bundled_scenario("attack-selfish"),
        {"attack.alpha": alpha, "run.duration_s": 60_000.0, "name": f"alpha{alpha}"},
    )
    res = run_scenario(scn)
    s = selfish_summary(res)
    s["wall"] = round(time.time() - t0, 1)
    out[f"selfish-{alpha}"] = s
    del res
    gc.collect()
    print("selfish-sweep", json.dumps(s), flush=True)

t0 = time.time()
res = run_scenario(load_bundled_scenario("attack-doublespend"))
d = doublespend_summary(res)
d["wall"] = round(time.time() - t0, 1)
out["doublespend"] = d
del res
gc.collect()
print("doublespend", json.dumps(d), flush=True)

base = load_bundled_scenario("bench-50node")
for label, hop in (("scoped", 2), ("flood", 0)):
    t0 = time.time()
    scn = with_updates(
        base,
        {"run.duration_s": 1200.0, "gossip.tx_hop_limit": hop, "name": label},
    )
    res = run_scenario(scn)
    row = res.row
    out[label] = {
        k: row[k]
        for k in ("total_tps", "distinct_tps", "duplicate_share", "injected_tx", "blocks")
    }
    out[label]["wall"] = round(time.time() - t0, 1)
    del res
    gc.collect()
    print(label, json.dumps(out[label]), flush=True)

with open("/root/pkg/calib/preval.json", "w") as fh:
    json.dump(out, fh, indent=1)
print("DONE")
