import numpy as np
import pytest
from hypothesis import settings

from ccmlab.checkpoints import Checkpoint
from ccmlab.operator import Normalizer, OperatorConfig, init_weights
from ccmlab.weights import WeightSet

settings.register_profile("ccm", max_examples=60, deadline=None)
settings.load_profile("ccm")

TINY = OperatorConfig(width=4, modes=2, layers=2, channels=2, grid=8, steps=5, batch_size=4, eval_every=1,
                      finetune_steps=3)


def random_weights(rng, schema=None):
    if schema is None:
        schema = (("a", (3, 4)), ("b", (5,)), ("c", (2, 2, 2)))
    return WeightSet({n: rng.standard_normal(s) for n, s in schema})


def lineage_triplet(seed=0, cfg=TINY):
    """Anchor plus two experts that share it, built from random weights."""
    rng = np.random.default_rng(seed)
    th0 = init_weights(cfg, seed)
    buf = Normalizer.identity(cfg.channels).as_buffers()
    anchor = Checkpoint(th0, buf, {"operator": cfg.to_dict()}, {"role": "anchor"})
    h = anchor.content_hash
    lo = th0.map(lambda v: v + 0.01 * rng.standard_normal(v.shape))
    hi = th0.map(lambda v: v + 0.01 * rng.standard_normal(v.shape))
    low = Checkpoint(lo, buf, anchor.config, {"role": "endpoint-low", "parent": h, "anchor": h})
    high = Checkpoint(hi, buf, anchor.config, {"role": "endpoint-high", "parent": h, "anchor": h})
    return anchor, low, high


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def triplet():
    return lineage_triplet()


def self_consistent_family(seed=0, spread=0.1, cfg=TINY):
    """A line whose experts sit ``spread`` away from a random anchor, with a
    rollout callable matching the select_prefix interface."""
    from ccmlab.merge import CoordinateLine
    from ccmlab.operator import FNO

    rng = np.random.default_rng(seed)
    anchor, _, _ = lineage_triplet(seed, cfg)
    h = anchor.content_hash
    exp = [anchor.weights.map(lambda v: v + spread * rng.standard_normal(v.shape)) for _ in range(2)]
    low = Checkpoint(exp[0], anchor.buffers, anchor.config, {"role": "endpoint-low", "parent": h, "anchor": h})
    high = Checkpoint(exp[1], anchor.buffers, anchor.config, {"role": "endpoint-high", "parent": h, "anchor": h})
    line = CoordinateLine.from_checkpoints(anchor, low, high)
    model = FNO(cfg)

    def rollout(alpha, u0, T):
        frames = model.rollout(line.weights_at(alpha), u0, T).frames
        return np.concatenate([u0[:, None], frames], axis=1)

    return line, rollout


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
