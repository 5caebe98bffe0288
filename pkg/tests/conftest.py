import pytest
import torch

from latentfill.backbone import BackboneConfig, build_params
from latentfill.schedule import make_schedule

# Single-threaded reductions: the determinism contract tests compare bits.
torch.set_num_threads(1)


def grid_image(h: int, w: int, seed: int = 0) -> torch.Tensor:
    """Random RGB buffer snapped to the 8-bit grid, as file loading produces."""
    g = torch.Generator().manual_seed(seed)
    raw = torch.randint(0, 256, (3, h, w), generator=g, dtype=torch.int64)
    return (raw.to(torch.float64) / 255.0).to(torch.float32)


def rect_mask(h: int, w: int, hole) -> torch.Tensor:
    """All-known mask with a rectangular hole (top, left, height, width)."""
    m = torch.ones(h, w, dtype=torch.float64)
    top, left, hh, ww = hole
    m[top : top + hh, left : left + ww] = 0.0
    return m


def stroke_rgba(h: int, w: int, region, color=(1.0, 0.0, 0.0)) -> torch.Tensor:
    """RGBA buffer painted with a solid color inside ``region``."""
    rgba = torch.zeros(4, h, w, dtype=torch.float32)
    top, left, hh, ww = region
    for c, v in enumerate(color):
        rgba[c, top : top + hh, left : left + ww] = v
    rgba[3, top : top + hh, left : left + ww] = 1.0
    return rgba


@pytest.fixture(scope="session")
def sched():
    return make_schedule(1000)


@pytest.fixture(scope="session")
def tiny_config():
    return BackboneConfig(widths=(16, 24, 32), text_dim=16, time_dim=16, norm_groups=8)


@pytest.fixture(scope="session")
def tiny_params(tiny_config):
    return build_params(tiny_config, seed=0)


@pytest.fixture()
def params():
    return build_params(seed=0)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    reports = []
    for key in ("passed", "failed"):
        reports += [
            r for r in terminalreporter.stats.get(key, [])
            if "test_acceptance" in r.nodeid and r.when == "call"
        ]
    if not reports:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for r in sorted(reports, key=lambda r: r.nodeid):
        status = "PASS" if r.passed else "FAIL"
        terminalreporter.write_line(f"{status}  {r.nodeid.split('::')[-1]}")
