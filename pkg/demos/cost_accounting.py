"""
Parameter and FLOPs arithmetic at base-model scale
==================================================

Closed-form counts for a 12-block, 768-wide encoder with a 3072-wide FFN.
"""

from aflora import ShapeSpec, analytic_param_count, total_training_flops
from aflora.accounting import cost_report
from aflora.freezing import FreezeSchedule

T = 20000
schedule = FreezeSchedule(t_i=2000, t_f=14000, total_steps=T)

lora = ShapeSpec.deberta_v3_base("lora", 8)
elora = ShapeSpec.deberta_v3_base("elora", 1024)
aflora = ShapeSpec.deberta_v3_base("aflora", 4)
vectors = ShapeSpec.deberta_v3_base("aflora", 4, pm_trainable_sites=())

for name, spec in (("lora r=8", lora), ("elora r=1024", elora), ("aflora r=4", aflora), ("vectors only", vectors)):
    print(f"{name:<14}{analytic_param_count(spec):>12,} trainable")

# Averaging over the schedule: the projection matrices only count while unfrozen.
avg = cost_report(aflora, schedule).avg_trainable_params
print(f"\naflora average over {T} steps: {avg:,.0f}  (lora / average = {analytic_param_count(lora) / avg:.1f}x)")

flops = {
    "lora": total_training_flops(lora, total_steps=T),
    "elora": total_training_flops(elora, total_steps=T),
    "aflora": total_training_flops(aflora, schedule),
}
print(f"elora / aflora training FLOPs: {flops['elora'] / flops['aflora']:.3f}")
print(f"aflora / lora training FLOPs:  {flops['aflora'] / flops['lora']:.3f}")
