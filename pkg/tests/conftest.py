import pytest
import torch

from cgh.config import TrainConfig

torch.set_num_threads(1)


def tiny_config(**overrides) -> TrainConfig:
    """A few-second CPU config: 4 classes of 16 px synthetic images, mini backbone."""
    base = dict(backbone="resnet-mini", synthetic_classes=4, synthetic_train_per_class=32,
                synthetic_val_per_class=8, image_size=16, hidden_dim=64, embed_dim=32, bank_size=96,
                batch_size=32, epochs=3, knn_monitor_k=10, base_lr=0.05)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
