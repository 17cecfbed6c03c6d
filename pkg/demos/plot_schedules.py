"""
Learning-rate schedules
=======================

Linear warmup into a cosine decay, the batch-size scaling rule, and the
layer-wise decay that gives early encoder blocks smaller steps when fine-tuning.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from planktomae.optim import Schedule, cosine_warmup_lr, llrd_multipliers, scaled_base_lr

out = Path("demo_output")
out.mkdir(exist_ok=True)

# the reference rate is quoted per 256 images
print("1.5e-4 at batch 4096 ->", scaled_base_lr(1.5e-4, 4096))
print("1.5e-4 at batch 64   ->", scaled_base_lr(1.5e-4, 64))

schedule = Schedule(base_lr=2e-3, warmup_epochs=5, total_epochs=50, steps_per_epoch=10)
steps = np.arange(schedule.total_steps + 1)
lrs = [cosine_warmup_lr(schedule, int(s)) for s in steps]

plan = llrd_multipliers(depth=4, decay=0.75)
for group in ("embed", "block.1", "block.2", "block.3", "block.4", "head"):
    print(f"{group:>8}: x{plan.multiplier(group):.4f}")

fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3))
a.plot(steps, lrs)
a.set_xlabel("step")
a.set_ylabel("learning rate")
b.bar(range(len(plan.multipliers)), plan.multipliers)
b.set_xlabel("group (embed ... head)")
b.set_ylabel("lr multiplier")
fig.tight_layout()
fig.savefig(out / "schedules.png", dpi=100)
