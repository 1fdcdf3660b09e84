import pytest

from model_core import ModelConfig, ModelHandle, Tokenizer
from trainer import TrainConfig, train_lm
from worldgen import (
    CLOZE_TEMPLATES,
    DECODER_QUESTIONS,
    DEFAULT_INPUT_TEMPLATE,
    build_world,
    make_reading_corpus,
    registered_templates,
    render_corpus,
)

TINY = ModelConfig(n_layers=2, d_model=32, n_heads=2, ff_mult=2, context_len=160, seed=11)


@pytest.fixture(scope="session")
def plain_world():
    return build_world(3, "plain", n_personas=12, labels_per_attribute=4)


@pytest.fixture(scope="session")
def plain_documents(plain_world):
    _, personas = plain_world
    return render_corpus(personas, 1, 1, seed=5)


@pytest.fixture(scope="session")
def tokenizer(plain_world, plain_documents):
    _, personas = plain_world
    texts = [d.text for d in plain_documents] + make_reading_corpus(personas)
    texts += [t.format(x="", distractor="") for t in registered_templates()]
    texts += list(DECODER_QUESTIONS.values())
    texts += [t.format(x="") for t in list(CLOZE_TEMPLATES.values()) + [DEFAULT_INPUT_TEMPLATE]]
    return Tokenizer.fit(texts)


@pytest.fixture
def tiny_model(tokenizer):
    return ModelHandle.create(TINY, tokenizer, "target")


@pytest.fixture(scope="session")
def trained_model(tokenizer, plain_documents):
    model = ModelHandle.create(TINY, tokenizer, "target")
    cfg = TrainConfig(learning_rate=1e-3, batch_size=4, max_steps=6, seed=2)
    return train_lm(model, [d.text for d in plain_documents], cfg).model
