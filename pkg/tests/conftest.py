import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import numpy as np
import pytest

from fercnn import data, synthetic
from fercnn.metrics import accuracy
from fercnn.model import build_model, save_checkpoint
from fercnn.train import evaluate, fit


def toy_dataset(per_class, seed):
    imgs, labels = synthetic.generate_arrays(per_class, seed)
    small = np.stack([np.clip(np.rint(data.resize_bilinear(i[..., None].astype(float))), 0, 255)
                      for i in imgs]).astype(np.uint8)
    return data.ImageDataset(small, labels, [f"toy_{i}" for i in range(len(labels))])


@pytest.fixture(scope="session")
def toy_files(tmp_path_factory):
    """A 28-sample synthetic dataset on disk: (directory, manifest path)."""
    root = tmp_path_factory.mktemp("toy")
    manifest = synthetic.write_dataset(root, per_class=4, seed=3)
    return root, manifest


@pytest.fixture(scope="session")
def perfect_checkpoint(toy_files, tmp_path_factory):
    """Checkpoint trained until Infer-mode accuracy on its own data reaches 1.0."""
    root, manifest = toy_files
    entries, _ = data.load_manifest(manifest)
    ds = data.load_dataset(entries, root)
    model = build_model(0)
    fit(model, ds, None, epochs=150, batch_size=4, seed=0,
        stop_when=lambda r: accuracy(evaluate(model, ds)[0]) == 1.0)
    assert accuracy(evaluate(model, ds)[0]) == 1.0
    path = tmp_path_factory.mktemp("ckpt") / "perfect.ckpt"
    save_checkpoint(model, path)
    return path


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
