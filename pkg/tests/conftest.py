import numpy as np
import pytest

from palmpipe.imaging import Image
from palmpipe.synth import CaptureParams, PalmIdentity, pose_matrix, render_palm


def texture(seed: int = 0, size: int = 64) -> Image:
    """Smooth random texture in [0, 1]."""
    from scipy import ndimage

    rng = np.random.default_rng(seed)
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), 2.0, mode="wrap")
    f = (f - f.min()) / (f.max() - f.min())
    return Image(0.1 + 0.8 * f)


def frontal_capture(seed: int = 0, jitter: float = 0.0, **kw) -> CaptureParams:
    return CaptureParams(pose=pose_matrix(384, 0.0, 0.0, 0.0, 0.85), tps_jitter_px=jitter, seed=seed, **kw)


@pytest.fixture(scope="session")
def palm_render():
    return render_palm(PalmIdentity.from_seed(3), frontal_capture(1))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    from palmpipe.synth import generate_dataset

    out = tmp_path_factory.mktemp("tiny")
    manifest = generate_dataset(4, 2, 5, out)
    return manifest


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
