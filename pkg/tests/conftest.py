import numpy as np
import pytest

from graspfield.field import FieldConfig, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_config():
    """A narrow model that keeps gradient and rendering tests quick."""
    return FieldConfig(stage_channels=(4, 4), stage_strides=(1, 2), hidden=16, phi_blocks=2,
                       psi_blocks=1, image_width=24, image_height=24)


@pytest.fixture(scope="session")
def small_params(small_config):
    return init_params(small_config, seed=7)


def to_float64(params):
    """Copy of ``params`` in double precision, for finite-difference checks."""
    from graspfield.autodiff import Tensor
    from graspfield.field import ModelParams

    return ModelParams({k: Tensor(np.asarray(v.data, np.float64)) for k, v in params.tensors.items()},
                       params.config)


class _ReluRecorder:
    def __init__(self):
        self.calls = []

    def __enter__(self):
        from graspfield import autodiff as ad

        self._orig = ad.relu

        def recording(x):
            self.calls.append(np.array(x.data))
            return self._orig(x)

        ad.relu = recording
        return self

    def __exit__(self, *exc):
        from graspfield import autodiff as ad

        ad.relu = self._orig


def relu_signs(f, x, n_rows):
    """Per-row sign pattern of every relu input met while evaluating ``f(x)``."""
    from graspfield import autodiff as ad

    with _ReluRecorder() as rec:
        f(ad.Tensor(x))
    return np.concatenate([(c > 0).reshape(n_rows, -1) for c in rec.calls], axis=1)


def kink_free_rows(f, x, h):
    """Rows of ``x`` whose central-difference stencil crosses no relu kink.

    ``f`` must treat rows independently; relu inputs must be row-major in the
    rows of ``x`` (several consecutive relu rows per input row are fine).
    """
    n = len(x)
    base = relu_signs(f, x, n)
    keep = np.ones(n, dtype=bool)
    for j in range(x.shape[1]):
        for s in (h, -h):
            xs = x.copy()
            xs[:, j] += s
            keep &= (relu_signs(f, xs, n) == base).all(axis=1)
    return keep


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
