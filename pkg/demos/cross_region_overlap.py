"""
Cross-region weight sync: when does the full-sync transfer stop hurting?
========================================================================

Two remote pools sit behind a 4 Gbit/s, 300 ms link. Every 20th version
they must pull a full 28 GB snapshot (about 56 s); other versions ship a
sparse delta. Generation gets longer as training goes on, so the trainer
step eventually outgrows the transfer and the pull hides behind it.
"""

from rlflow.harness import run
from rlflow.scenario import load_preset

res = run(load_preset("cross_region"))

rows = res.metrics.series("downtime")
wait = {r.version: r.value for r in rows if r.metric == "trainer_wait"}
step = {r.version: r.value for r in rows if r.metric == "trainer_step"}

print(" version   step_s   wait_s   wait/step")
for v in sorted(step):
    flag = "  <- full sync" if v > 20 and v % 20 in (1, 2, 3) and wait[v] > 0 else ""
    if v % 5 == 0 or wait[v] > 0:
        print(f"{v:8d} {step[v]:8.1f} {wait[v]:8.2f} {wait[v] / step[v]:10.4f}{flag}")

# same deployment, step held near 30 s: the full sync never hides
held = run(load_preset("cross_region_held"))
w = held.summary["trainers"]["A"]
print(f"\nheld step time: {w['wait_seconds']:.1f} s waiting over {w['busy_seconds']:.1f} s of compute")
