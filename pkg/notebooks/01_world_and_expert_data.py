# %% [markdown]
# # The synthetic highway and its expert drivers
#
# The training data comes from a small kinematic world: straight parallel
# lanes, unicycle vehicles, and scripted drivers that track a lane centre and
# a slowly wandering target speed. This script generates a dataset, checks
# that the recorded actions really produce the recorded motion, and measures
# how far a vehicle drifts if it simply holds its speed and heading.

# %%
import numpy as np

from clode import evaluator as ev
from clode import simenv as se

data = se.generate_expert(se.ExpertConfig(n_agents=22, n_steps=500, seed=0))
print(len(data), "agents,", len(data[0]), "steps each, obs dim", data[0].observations.shape[1])

# %% [markdown]
# Each trajectory stores states, actions `(accel, yaw_rate)` and the 66-dim
# observation vector. A quick look at the spread of actions:

# %%
acts = np.concatenate([t.actions for t in data])
print("accel    mean %+.3f  std %.3f" % (acts[:, 0].mean(), acts[:, 0].std()))
print("yaw rate mean %+.4f std %.4f" % (acts[:, 1].mean(), acts[:, 1].std()))
speeds = np.concatenate([t.states[:, 3] for t in data])
print("speed range %.1f .. %.1f m/s" % (speeds.min(), speeds.max()))

# %% [markdown]
# ## Replaying the recorded actions
#
# Feeding the ground-truth actions back through the simulator should land on
# exactly the recorded positions. This is the consistency check the
# evaluator relies on.

# %%
oracle = ev.evaluate_rollout(None, data, horizon=25, history_len=5, replay_ground_truth=True, stride=25)
print("max replay error over", oracle.m, "samples:", oracle.rmse_total.max())

# %% [markdown]
# ## A constant-velocity reference
#
# Zero acceleration and zero yaw rate keeps each vehicle on its current
# heading and speed. Its error after 2.5 s is the bar a learned model has to
# clear.

# %%
cv = ev.evaluate_rollout(lambda: se.ZeroActionPolicy(), data, horizon=25, history_len=5, stride=25)
for step in (5, 10, 25):
    i = step - 1
    print(f"t = {step * 0.1:.1f} s  long {cv.rmse_long[i]:.3f}  lat {cv.rmse_lat[i]:.3f}  total {cv.rmse_total[i]:.3f}")
