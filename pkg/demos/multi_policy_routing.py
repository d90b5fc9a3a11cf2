"""
Two policies, one workflow: solver and verifier train separately
================================================================

Policy A writes solutions, policy B judges them. Each trainer only ever
sees its own policy's trajectories. Stalling B changes nothing for A,
because A's batches never depended on B's buffer.
"""

from rlflow.harness import run
from rlflow.scenario import load_preset

sc = load_preset("multi_policy")
res = run(sc)
for p in sc.policies:
    log = res.step_log(p)
    mixed = sum(rec.member_policies != (p,) for rec in log)
    print(f"trainer {p}: {len(log)} versions, {mixed} batches with foreign trajectories")

stalled = run(sc.with_stalled("B"))
alone = run(sc.solo("A"))
same = stalled.step_log("A") == alone.step_log("A")
print(f"A's step log with B stalled equals A trained alone: {same}")
print("conservation:", "balanced" if res.summary["conservation"]["balanced"] else "UNBALANCED")
