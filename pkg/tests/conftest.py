import numpy as np
import pytest

from seqrisk.cohort import GeneratorConfig, generate_synthetic, split
from seqrisk.seqmodel import (
    CohortSchema,
    ModelConfig,
    SequenceModel,
    encode_records,
    train,
)


@pytest.fixture(scope="session")
def tiny_cohort():
    """240 synthetic patients, encoded and split; shared read-only."""
    cfg = GeneratorConfig(
        n_patients=240, vocab_size=40, mean_days=3.0, events_per_day=3.0
    )
    records, vocab = generate_synthetic(cfg, seed=101)
    encode_records(records, vocab)
    data = split(records, seed=7)
    schema = CohortSchema.from_vocabulary(vocab)
    return records, vocab, data, schema


def tiny_config(**overrides):
    base = dict(
        batch_size=32,
        learning_rate=1e-2,
        annealing_steps=200,
        prior_std=0.3,
        dense_embedding_dim=8,
        embedding_dim_multiplier=1.0,
        rnn_dim=12,
        num_rnn_layers=1,
        hidden_layer_dim=8,
        seed=3,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def trained_tiny_model(tiny_cohort):
    _, _, data, schema = tiny_cohort
    model = SequenceModel(tiny_config(), schema)
    train(model, data, epochs=12, patience=4)
    return model
