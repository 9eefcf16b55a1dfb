import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

import oracles  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def paper_model():
    from orsiseg.config import default_paper_config
    from orsiseg.model import SegmentationModel

    torch.manual_seed(0)
    return SegmentationModel(default_paper_config()).eval()


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    from orsiseg.data import synth_dataset

    root = tmp_path_factory.mktemp("synth")
    synth_dataset(root, 16, 96, 7)
    return root


def pytest_terminal_summary(terminalreporter):
    if not oracles.ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in oracles.ACCEPTANCE:
        status = {True: "PASS", False: "FAIL", None: "N/A "}[passed]
        terminalreporter.write_line(f"{status}  {name}  {detail}")


@pytest.fixture(scope="session")
def desk_run(synth_root, tmp_path_factory):
    """Two-epoch desk training run on the synthetic set."""
    from dataclasses import replace

    from orsiseg.config import desk_config, desk_train_config
    from orsiseg.data import DatasetSpec, load_dataset
    from orsiseg.runtime.train import train

    out = tmp_path_factory.mktemp("desk_run")
    ds = load_dataset(DatasetSpec(synth_root, "train", (96, 96)))
    return train(desk_config(), replace(desk_train_config(), epochs=2), ds, out, plot=False)
