"""
Scores and the cubic freezing schedule
======================================

The controller keeps two moving averages per projection matrix. The
fraction of matrices that must be frozen follows a cubic ramp, and the
lowest scorers go first.
"""

import numpy as np

from aflora import FreezeController, FreezeSchedule, ScoreState, adapter_init, freeze_fraction, freezing_score
from aflora.freezing import PMHandle, update_score_state
from aflora.tensor import SeededRng

# Two steps of an all-ones gradient from a zero start.
state = ScoreState.zeros(1)
for step in (1, 2):
    update_score_state(state, np.ones(1), np.ones(1))
    print(f"step {step}: ema_i={state.ema_i[0]:.4f} ema_u={state.ema_u[0]:.4f} score={freezing_score(state):.6f}")

# The ramp: nothing before t_i, everything from T - t_f on.
schedule = FreezeSchedule(t_i=10, t_f=20, total_steps=60)
print("r(t):", " ".join(f"{freeze_fraction(t, schedule):.2f}" for t in range(0, 60, 5)))

# Six matrices whose gradients differ in scale. Small gradients mean low scores,
# so those matrices are frozen early.
rng = np.random.default_rng(0)
layers = [adapter_init(6, 6, 2, "aflora", SeededRng(i)) for i in range(3)]
handles = [PMHandle(i, "ffn_inter", m, layer) for i, layer in enumerate(layers) for m in "AB"]
scale = {h: 10.0 ** -(i % 3) for i, h in enumerate(handles)}
controller = FreezeController(handles, schedule)
for t in range(schedule.total_steps):
    for h in controller.handles:
        h.tensor.grad = scale[h] * rng.normal(size=h.tensor.shape)
    controller.update_scores()
    for h in controller.apply_freezing(t):
        print(f"t={t:>2}  froze {h.label}  (gradient scale {scale[h]:g})")
