"""
Closed-loop rollout autoscaling against two fixed pools
=======================================================

Every 10 trainer versions the maintainer reads the balance report and
grows or shrinks the rollout fleet. Compare GPU-time and the trainer's
wait fraction with the smallest and largest fixed pools.
"""

from rlflow.harness import run
from rlflow.scenario import load_preset


def late_wait_fraction(res):
    rows = res.metrics.series("downtime")
    wait = {r.version: r.value for r in rows if r.metric == "trainer_wait"}
    step = {r.version: r.value for r in rows if r.metric == "trainer_step"}
    late = [v for v in step if v > max(step) // 2]
    return sum(wait[v] for v in late) / sum(wait[v] + step[v] for v in late)


for name in ("elastic_fixed6", "elastic", "elastic_fixed11"):
    res = run(load_preset(name))
    print(f"{name:16s} GPU-hours {res.summary['rollout_gpu_hours']:7.3f}   "
          f"late wait fraction {late_wait_fraction(res):.4f}")

auto = run(load_preset("elastic"))
print("\npool size over time (autoscaled):")
for r in auto.metrics.series("pool_size"):
    print(f"  t={r.time:9.1f}s  v{r.version:<4d} {int(r.value)} GPUs")

print("\nlast balance report:\n")
print(auto.reports[-1].report)
