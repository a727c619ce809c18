import pytest
import torch

from haploomni.verify import tiny_bundle, tiny_config


@pytest.fixture(autouse=True)
def _deterministic():
    torch.use_deterministic_algorithms(True)
    yield


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny():
    return tiny_bundle()


@pytest.fixture
def small_cfg():
    """Smallest config that still renders the synthetic RGB scenes."""
    from haploomni.model import ModelConfig

    return ModelConfig(d=16, heads=2, d_ff=32, d_t=8, n_pre=1, n_base=1, n_post=1, image_size=8,
                       patch_size=4, adaln_init_std=0.1)


@pytest.fixture
def small_data(small_cfg):
    from haploomni.data import generate_synthetic

    return generate_synthetic(0, 4, 4, small_cfg)


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion."""

    def report(number: int, title: str, passed: bool, detail: str = "") -> bool:
        line = f"[{number:2d}] {'PASS' if passed else 'FAIL'}  {title}  {detail}".rstrip()
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
