import pytest

from vsanet.core import TrainConfig
from vsanet.data import FaceDataset, synth_corpus


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Six subjects, six images each, at 32 px."""
    out = tmp_path_factory.mktemp("corpus")
    path, manifest = synth_corpus(6, 6, seed=5, image_size=32, out_dir=out)
    return path, manifest


@pytest.fixture()
def tiny_dataset(tiny_corpus):
    return FaceDataset(tiny_corpus[1], 32)


@pytest.fixture()
def tiny_config():
    return TrainConfig(image_size=32, width_divisor=16, latent_dim=16, batch_size=2, iterations=3)


def pytest_terminal_summary(terminalreporter):
    acceptance = __import__("sys").modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
