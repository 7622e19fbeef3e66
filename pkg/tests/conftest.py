import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


@pytest.fixture(scope="session")
def l96_small():
    """Five Lorenz-96 (n_s = 40) trajectories and a held-out one."""
    from tensorvar.dynamics import generate_trajectories, lorenz96_spec

    spec = lorenz96_spec(40)
    train = generate_trajectories(spec, 5, 600, 500, seed=11)
    test = generate_trajectories(spec, 1, 400, 500, seed=12)
    return spec, train, test


@pytest.fixture(scope="session")
def l96_model(l96_small):
    from tensorvar.cme import KernelDims, train_kernel_model
    from tensorvar.kernel import KernelSpec
    from tensorvar.observation import ObservationSpec, every_kth, make_training_data

    spec, train, _ = l96_small
    ospec = ObservationSpec(every_kth(40, 5), 0.1, 5)
    data = make_training_data(train, ospec)
    kernels = {k: KernelSpec(1.0, "median") for k in ("state", "obs", "hist")}
    model = train_kernel_model(data, kernels, KernelDims(30, 12, 12, 800), seed=0)
    return model, data, ospec
