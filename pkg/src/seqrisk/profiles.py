"""Shipped hyperparameter profiles.

``paper``-profile values are the published per-variant settings carried
verbatim; the ``desk`` profile shrinks dimensions and annealing so full
train/evaluate cycles run in seconds on a CPU. Both stay inside the
documented search space.
"""

from dataclasses import replace

from .bayeslayers import StochasticityConfig
from .seqmodel import ModelConfig

VARIANTS = tuple(StochasticityConfig.VARIANTS)

# batch, lr, annealing steps, prior std, dense emb dim, emb multiplier,
# rnn dim, rnn layers, hidden dim, bias uncertainty
_PAPER_VALUES = {
    "deterministic": (256, 3.035e-4, 1, 0.3, 32, 0.858, 1024, 1, 512, False),
    "bayesian-embeddings": (256, 1.238e-3, 972_200, 0.292, 32, 0.858, 1024, 1, 512, False),
    "bayesian-output": (256, 1.647e-4, 878_200, 0.149, 32, 0.858, 1024, 1, 512, False),
    "bayesian-hidden-output": (256, 2.710e-4, 991_200, 0.149, 32, 0.858, 1024, 1, 512, False),
    "bayesian-rnn-hidden-output": (512, 1.488e-3, 634_200, 0.252, 32, 1.291, 16, 1, 0, True),
    "fully-bayesian": (128, 1.265e-3, 998_300, 0.162, 256, 1.061, 16, 1, 0, True),
}

_DESK_VALUES = {
    variant: (64, 5e-3, 2000, 0.3, 16, 1.0, 32, 1, 32, paper[9])
    for variant, paper in _PAPER_VALUES.items()
}

PROFILES = {"paper": _PAPER_VALUES, "desk": _DESK_VALUES}


def make_config(variant, profile="desk", seed=0, task="binary", num_classes=2, **overrides):
    """ModelConfig for a named variant under a named profile."""
    try:
        values = PROFILES[profile][variant]
    except KeyError:
        raise ValueError(
            f"unknown profile/variant {profile!r}/{variant!r}; "
            f"profiles: {sorted(PROFILES)}, variants: {sorted(_PAPER_VALUES)}"
        ) from None
    batch, lr, anneal, prior, dense, mult, rnn, layers, hidden, bias = values
    config = ModelConfig(
        batch_size=batch,
        learning_rate=lr,
        annealing_steps=anneal,
        prior_std=prior,
        dense_embedding_dim=dense,
        embedding_dim_multiplier=mult,
        rnn_dim=rnn,
        num_rnn_layers=layers,
        hidden_layer_dim=hidden,
        stochasticity=StochasticityConfig.from_variant(variant, bias_uncertainty=bias),
        task=task,
        num_classes=num_classes,
        seed=seed,
    ).validate_search_ranges()
    return replace(config, **overrides) if overrides else config
