import time

import numpy as np
import pytest

from eeunet import netgraph as ng
from eeunet import scenegen as sg
from eeunet import trainer as tr

# desk-scale acceptance run
DESK_SEED = 42
DESK_RES = 32
DESK_SCENES = 250
DESK_HYPER = tr.Hyperparams(epochs=25, lr0=0.01, decay=0.98, batch_size=4, momentum=0.9, seed=DESK_SEED)

# wall-clock seconds of the session fixtures, read by the acceptance report
TIMINGS = {}

TOY = ng.ModelConfig(in_channels=3, classes=4, widths=(4, 6, 8), resolution=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def as_f64(params):
    return {n: ng.Layer(l.kernel.astype(np.float64), l.bias.astype(np.float64)) for n, l in params.items()}


def directional_check(f, x, grad, rng, h=1e-3):
    """Relative error between <grad, v> and a central difference of f along random v."""
    v = rng.standard_normal(x.shape)
    fd = (f(x + h * v) - f(x - h * v)) / (2 * h)
    an = float(np.sum(grad * v))
    return abs(fd - an) / max(abs(fd), abs(an), 1e-8)


@pytest.fixture(scope="session")
def desk_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk") / "data"
    start = time.perf_counter()
    sg.generate_dataset(root, DESK_SCENES, DESK_RES, DESK_RES, DESK_SEED)
    TIMINGS["datagen"] = time.perf_counter() - start
    return root


@pytest.fixture(scope="session")
def desk_run(desk_data):
    """Trained desk-scale model: (config, best params, history, dataset)."""
    start = time.perf_counter()
    ds = sg.load_dataset(desk_data)
    config = ng.ModelConfig(resolution=DESK_RES)
    best, history = tr.fit(config, ds.train_x, ds.train_y, ds.test_x, ds.test_y, DESK_HYPER)
    TIMINGS["train"] = time.perf_counter() - start
    return config, best, history, ds
