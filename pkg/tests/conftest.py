import numpy as np
import pytest

from artcritic.model import ModelConfig, VlmModel
from artcritic.vocab import CRITIQUE_ID, SCORING_ID

TINY = dict(d_model=16, n_layers=2, n_heads=2, image_size=16, patch_size=8,
            vocab_size=20, max_seq_len=40, lora_rank=4, lora_alpha=8.0, quant_block=16)


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_model(tiny_config):
    return VlmModel(tiny_config)


def random_image(seed: int, size: int = 16) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, (size, size, 3))


def random_prompt(seed: int, length: int = 8, vocab: int = 20) -> list[int]:
    body = np.random.default_rng(seed).integers(6, vocab, length - 3).tolist()
    return [1] + body + [SCORING_ID, CRITIQUE_ID]


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
