import numpy as np
import pytest

from tgnn.config import ModelConfig, TrainConfig
from tgnn.data import ConversationGraph, Dataset, GeneratorConfig, Message, synth_generate


def small_model_config(**kw) -> ModelConfig:
    base = dict(d=8, d_v=4, heads=2, n_buckets=256, patch_grid=2, image_size=8)
    base.update(kw)
    return ModelConfig(**base)


def small_train_config(**kw) -> TrainConfig:
    model = kw.pop("model", None) or small_model_config()
    base = dict(batch_size=8, epochs=2, lr=1e-3, seed=0)
    base.update(kw)
    return TrainConfig(model=model, **base)


@pytest.fixture(scope="session")
def tiny_dataset() -> Dataset:
    return synth_generate(GeneratorConfig(n_events=3, conversations_per_event=16, max_replies=5, image_size=8), 0)


@pytest.fixture
def five_node_conversation():
    """Source with four replies (one nested) and an image."""
    msgs = [
        Message("m0", "reportedly a bridge collapsed downtown", None),
        Message("m1", "is it real or fake?", "m0"),
        Message("m2", "so sad", "m0"),
        Message("m3", "fake news", "m1"),
        Message("m4", "stay safe everyone", "m0"),
    ]
    g = ConversationGraph("conv-5", "event0", "rumour", msgs, "images/conv-5.img")
    img = np.random.default_rng(42).uniform(-0.5, 0.5, (8, 8, 3))
    return Dataset([g], {"images/conv-5.img": img})


# lines recorded by the acceptance gate, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def record_acceptance(label: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {label}: {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":").split("-")[0])):
            terminalreporter.write_line(line)
