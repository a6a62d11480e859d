import copy

import numpy as np
import pytest

from cardioseg.data import Case4D
from cardioseg.synth import DEFAULT_SYNTH_CONFIG

TINY_SYNTH = copy.deepcopy(DEFAULT_SYNTH_CONFIG)
TINY_SYNTH.update(slices=2, phases=3, es_index=1)
TINY_SYNTH["diseases"] = {
    "NOR": {"train_cases": 2, "test_cases": 1},
    "ARV": {"rv_length": [6.0, 7.0], "train_cases": 2, "test_cases": 1},
}


@pytest.fixture
def tiny_synth():
    return copy.deepcopy(TINY_SYNTH)


@pytest.fixture
def make_case():
    def make(case_id="c0", disease="NOR", p=4, h=16, w=16, z=3, ed=0, es=2, seed=0):
        rng = np.random.default_rng(seed)
        image = rng.random((p, h, w, z), dtype=np.float32)
        label = rng.integers(0, 4, (p, h, w, z)).astype(np.uint8)
        return Case4D(case_id, disease, image, label, ed, es, (1.25, 1.25))

    return make
