from pathlib import Path

import pytest
import torch

from bertdst import data_io
from bertdst.encoder import EncoderConfig, init_params
from bertdst.tokenizer import build_vocab

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures():
    return FIXTURES


@pytest.fixture
def tiny_config():
    return EncoderConfig(N=2, d1=8, d2=16, h=2, V=20, P=16, dropout_rate=0.0)


@pytest.fixture
def tiny_params(tiny_config):
    params = init_params(tiny_config, seed=3)
    # move away from the near-zero init so every path carries signal
    gen = torch.Generator().manual_seed(11)
    for name, t in params.tensors.items():
        t.add_(0.3 * torch.randn(t.shape, generator=gen))
    return params


@pytest.fixture(scope="session")
def small_domain():
    spec = data_io.SyntheticDomainSpec(train_dialogs=20, dev_dialogs=0, test_dialogs=10, seed=5)
    ontology, splits = data_io.generate_synthetic_domain(spec)
    text = [s for d in splits["train"] + splits["test"] for t in d.turns
            for s in (t.system_utterance, t.user_utterance) if s]
    text += [f"{slot} = {v}" for slot, vs in ontology.informable.items() for v in vs]
    text += [f"request = {r}" for r in ontology.requestable]
    vocab = build_vocab(text, 150)
    return ontology, splits, vocab


def pytest_configure(config):
    config.acceptance_lines = []
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number, name, ok, detail):
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        assert ok, line

    return record
