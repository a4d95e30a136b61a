import pytest

from ecgfed.segnet import NetConfig, SegNet
from ecgfed.synthgen import BUILTIN_PROFILES, make_page


@pytest.fixture(scope="session")
def clean_page():
    """One unperturbed C1 render, shared by the image and digitizer tests."""
    return make_page("C1-00001", BUILTIN_PROFILES["C1"], 0, perturb=False)


@pytest.fixture(scope="session")
def perturbed_pages():
    return {name: make_page(f"{name}-00003", prof, 0) for name, prof in BUILTIN_PROFILES.items()}


@pytest.fixture(scope="session")
def tiny_model():
    return SegNet(NetConfig(depth=2, channels=(2, 3), convs_per_level=1, deep_supervision_weights=(1.0, 0.5),
                            patch=16, batch=2))
