import numpy as np
import pytest
import torch

from sgpmil.kernel import KernelParams
from sgpmil.sgp_attention import SgpAttentionState

torch.set_num_threads(1)


def random_state(seed, m=4, d=3, use_lm=True, diag_only=True, offset=0.05, factor_scale=0.3):
    """A well-conditioned random SGP state built directly from constrained values."""
    rng = np.random.default_rng(seed)
    z = rng.uniform(-1, 1, (m, d))
    factor = np.tril(rng.normal(0, factor_scale, (m, m)), -1) + np.diag(rng.uniform(0.2, 0.8, m))
    kern = KernelParams(outputscale=rng.uniform(0.5, 2.0), lengthscales=rng.uniform(0.5, 2.0, d),
                        offset=offset)
    return SgpAttentionState(
        inducing_locations=z,
        variational_mean=rng.normal(0, 1, m),
        variational_cov_factor=factor,
        prior_mean=np.zeros(m),
        lm_weights=rng.normal(0, 1, d),
        lm_bias=rng.normal(),
        kernel=kern,
        use_lm=use_lm,
        diag_only=diag_only,
    )


def kparams_tuple(state):
    k = state.kernel
    return float(k.outputscale), k.lengthscales.numpy(), float(k.offset)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_fixture(seed, normalization="sigmoid", diag_only=True, use_lm=True, n_samples=2):
    """K=6, D=8, h=6, d'=3, m=4, C=3 model with every SGP parameter randomized."""
    from sgpmil.trainer import gradient_fixture

    return gradient_fixture(seed, normalization, diag_only, use_lm, n_samples)


@pytest.fixture
def criterion(request):
    """Record a one-line PASS/FAIL verdict, echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


_VERDICTS = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
