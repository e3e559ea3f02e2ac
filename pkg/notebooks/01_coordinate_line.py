# %% [markdown]
# # A coordinate line between two experts
#
# Two experts fine-tuned from one anchor define a line of checkpoints.
# This script builds a small random operator family, walks the line, and
# checks that a prefix of a trajectory is enough to find where on the line
# the data came from.

# %%
import numpy as np

from ccmlab.checkpoints import Checkpoint
from ccmlab.merge import CoordinateLine, compose_at
from ccmlab.operator import FNO, OperatorConfig, init_weights
from ccmlab.select import AlphaBank, select_prefix
from ccmlab.weights import flatten

cfg = OperatorConfig(width=8, modes=3, layers=2, channels=1, grid=16)
rng = np.random.default_rng(0)
theta0 = init_weights(cfg, 0)
anchor = Checkpoint(theta0, {}, {"operator": cfg.to_dict()}, {"role": "anchor"})
h = anchor.content_hash
experts = [theta0.map(lambda v: v + 0.1 * rng.standard_normal(v.shape)) for _ in range(2)]
low = Checkpoint(experts[0], {}, anchor.config, {"role": "endpoint-low", "parent": h})
high = Checkpoint(experts[1], {}, anchor.config, {"role": "endpoint-high", "parent": h})
line = CoordinateLine.from_checkpoints(anchor, low, high)

# %% the two algebraic forms of the line agree, and the endpoints are recovered bitwise
for a in (-1.5, -1.0, 0.0, 0.5, 1.0, 1.5):
    gap = np.max(np.abs(flatten(line.weights_at(a))[0] - flatten(line.weights_at_anchor_form(a))[0]))
    print(f"alpha={a:+.2f}  max |convex - anchor form| = {gap:.1e}")
print("theta(-1) == expert-low:", compose_at(line, -1).weights == low.weights)
print("theta(+1) == expert-high:", compose_at(line, 1).weights == high.weights)

# %% [markdown]
# Roll out theta(0.75) as "ground truth" and hand only the first four frames
# to the prefix selector.

# %%
model = FNO(cfg)


def rollout(alpha, u0, K):
    frames = model.rollout(line.weights_at(alpha), u0, K).frames
    return np.concatenate([u0[:, None], frames], axis=1)


u0 = rng.standard_normal((4, 16, 16, 1))
truth = rollout(0.75, u0, 12)
bank = AlphaBank.default()
for r in select_prefix(rollout, bank, truth[:, :5]):
    best = sorted(zip(r.losses, bank))[:3]
    print(f"alpha_hat={r.alpha:+.2f}  three best: " + ", ".join(f"{a:+.2f}:{l:.2e}" for l, a in best))
