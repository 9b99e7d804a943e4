"""Patient-sequence risk model: forward pass, ELBO training, ensembles.

Architecture: sequential event embeddings are mean-bagged into 1-day
blocks (with a learned vector for event-free days), run through an LSTM
stack, and the final step's hidden state is concatenated with embedded
context (gender, ethnicity) plus normalized age, then passed through an
optional hidden dense layer with ReLU and an output dense layer. Binary
tasks emit a sigmoid probability; multiclass tasks a softmax row.

Training minimizes mean NLL plus an annealed KL term (stochastic layers
only), scaled per-example by the training set size, using Adam. One
weight realization is drawn per forward pass and shared across all
timesteps and lookups in that pass.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import bayeslayers as bl
from . import numcore as nc
from .bayeslayers import IsotropicPrior, StochasticityConfig
from .cohort import VocabularyError, day_bagging
from .numcore import Tape, Tensor

log = logging.getLogger(__name__)

AGE_CENTER = 50.0
AGE_SCALE = 30.0

# Appendix-style search space for range-constrained construction
SEARCH_SPACE = {
    "batch_size": {32, 64, 128, 256, 512},
    "learning_rate": (1e-5, 0.1),
    "annealing_steps": (1, 1_000_000),
    "prior_std": (0.135, 1.0),
    "dense_embedding_dim": {16, 32, 64, 100, 128, 256, 512},
    "embedding_dim_multiplier": (0.5, 1.5),
    "rnn_dim": {16, 32, 64, 128, 256, 512, 1024},
    "num_rnn_layers": {1, 2, 3},
    "hidden_layer_dim": {0, 16, 32, 64, 128, 256, 512},
}


class TrainingDiverged(RuntimeError):
    """Loss went non-finite during optimization."""


@dataclass(frozen=True)
class ModelConfig:
    batch_size: int = 64
    learning_rate: float = 5e-3
    annealing_steps: int = 2000
    prior_std: float = 0.3
    dense_embedding_dim: int = 16
    embedding_dim_multiplier: float = 1.0
    rnn_dim: int = 32
    num_rnn_layers: int = 1
    hidden_layer_dim: int = 32
    stochasticity: StochasticityConfig = field(default_factory=StochasticityConfig)
    task: str = "binary"
    num_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("binary", "multiclass"):
            raise ValueError(f"task must be 'binary' or 'multiclass', got {self.task!r}")
        if self.task == "multiclass" and self.num_classes < 2:
            raise ValueError("multiclass task needs num_classes >= 2")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.annealing_steps < 1:
            raise ValueError("annealing_steps must be >= 1")
        if self.prior_std <= 0:
            raise ValueError("prior_std must be positive")

    @property
    def event_embedding_dim(self):
        return max(2, int(round(self.dense_embedding_dim * self.embedding_dim_multiplier)))

    def validate_search_ranges(self):
        """Enforce the documented hyperparameter search sets/ranges."""
        for name, allowed in SEARCH_SPACE.items():
            value = getattr(self, name)
            if isinstance(allowed, set):
                if value not in allowed:
                    raise ValueError(f"{name}={value} outside search set {sorted(allowed)}")
            else:
                lo, hi = allowed
                if not lo <= value <= hi:
                    raise ValueError(f"{name}={value} outside search range [{lo}, {hi}]")
        return self

    @property
    def output_dim(self):
        return 1 if self.task == "binary" else self.num_classes


@dataclass(frozen=True)
class CohortSchema:
    """Vocabulary sizes the model is built against."""

    event_vocab: int
    gender_vocab: int
    ethnicity_vocab: int

    @classmethod
    def from_vocabulary(cls, vocab):
        return cls(vocab.size("event"), vocab.size("gender"), vocab.size("ethnicity"))


@dataclass(frozen=True)
class EnsembleSpec:
    """M member configs that differ only in their random seed."""

    base: ModelConfig
    seeds: tuple

    def __post_init__(self):
        seeds = tuple(int(s) for s in self.seeds)
        object.__setattr__(self, "seeds", seeds)
        if len(seeds) < 1:
            raise ValueError("ensemble needs at least one seed")
        if len(set(seeds)) != len(seeds):
            raise ValueError("member seeds must be distinct")

    @property
    def size(self):
        return len(self.seeds)

    def member_config(self, m):
        return replace(self.base, seed=self.seeds[m])


# ---------------------------------------------------------------------------
# batch preparation


@dataclass
class PreparedBatch:
    n: int
    max_days: int
    event_ids: np.ndarray      # (total_events,) day-ordered feature ids
    day_slots: np.ndarray      # (total_events,) flat slot index i * max_days + t
    empty_day: np.ndarray      # (n * max_days, 1) 1.0 on real days with no events
    mask: np.ndarray           # (n, max_days) 1.0 while t is a real day
    gender_ids: np.ndarray
    ethnicity_ids: np.ndarray
    age: np.ndarray            # (n, 1) normalized
    labels: np.ndarray         # (n,) int


def prepare_batch(records, schema):
    """Bag each record's events into day blocks and pack model inputs."""
    n = len(records)
    if n == 0:
        raise ValueError("empty batch")
    bags = [day_bagging(r) for r in records]
    max_days = max(len(b) for b in bags)
    event_ids, day_slots = [], []
    empty_day = np.zeros((n * max_days, 1))
    mask = np.zeros((n, max_days))
    for i, rec_bags in enumerate(bags):
        mask[i, : len(rec_bags)] = 1.0
        for t, bag in enumerate(rec_bags):
            if bag:
                event_ids.extend(bag)
                day_slots.extend([i * max_days + t] * len(bag))
            else:
                empty_day[i * max_days + t, 0] = 1.0
    event_ids = np.asarray(event_ids, dtype=np.intp)
    if event_ids.size and event_ids.max() >= schema.event_vocab:
        raise VocabularyError(
            f"record feature id {event_ids.max()} exceeds model vocabulary "
            f"({schema.event_vocab})"
        )
    gender_ids = np.array([_context_id(r, "_gender_id") for r in records], dtype=np.intp)
    eth = np.array([_context_id(r, "_ethnicity_id") for r in records], dtype=np.intp)
    if gender_ids.max(initial=0) >= schema.gender_vocab or eth.max(initial=0) >= schema.ethnicity_vocab:
        raise VocabularyError("context id exceeds model vocabulary")
    age = np.array([[(r.age_years - AGE_CENTER) / AGE_SCALE] for r in records])
    labels = np.array([r.label for r in records], dtype=np.intp)
    return PreparedBatch(
        n, max_days, event_ids, np.asarray(day_slots, dtype=np.intp), empty_day,
        mask, gender_ids, eth, age, labels,
    )


def _context_id(record, attr):
    value = getattr(record, attr, None)
    if value is None:
        raise VocabularyError(
            f"record {record.patient_id} lacks resolved context ids; "
            "call encode_records(records, vocab) first"
        )
    return value


def encode_records(records, vocab, frozen=True):
    """Attach dense context ids from a vocabulary to each record (in place)."""
    for rec in records:
        rec._gender_id = vocab.id("gender", rec.gender, frozen=frozen)
        rec._ethnicity_id = vocab.id("ethnicity", rec.ethnicity, frozen=frozen)
    return records


# ---------------------------------------------------------------------------
# the model


class SequenceModel:
    def __init__(self, config, schema):
        self.config = config
        self.schema = schema
        self.prior = IsotropicPrior(config.prior_std)
        st = config.stochasticity
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0,)))
        emb_dim = config.event_embedding_dim
        ctx_dim = config.dense_embedding_dim
        self.event_emb = bl.EmbeddingLayer(
            "seq_emb", schema.event_vocab, emb_dim, st.embeddings, self.prior, rng
        )
        self.no_events = bl.EmbeddingLayer(
            "no_events", 1, emb_dim, st.embeddings, self.prior, rng
        )
        self.gender_emb = bl.EmbeddingLayer(
            "gender_emb", schema.gender_vocab, ctx_dim, st.embeddings, self.prior, rng
        )
        self.ethnicity_emb = bl.EmbeddingLayer(
            "ethnicity_emb", schema.ethnicity_vocab, ctx_dim, st.embeddings, self.prior, rng
        )
        self.lstm = []
        in_dim = emb_dim
        for layer_idx in range(config.num_rnn_layers):
            self.lstm.append(
                bl.LSTMLayer(
                    f"rnn{layer_idx}", in_dim, config.rnn_dim, st.rnn,
                    st.bias_uncertainty, self.prior, rng,
                )
            )
            in_dim = config.rnn_dim
        concat_dim = config.rnn_dim + 2 * ctx_dim + 1
        if config.hidden_layer_dim > 0:
            self.hidden = bl.DenseLayer(
                "hidden", concat_dim, config.hidden_layer_dim, st.hidden,
                st.bias_uncertainty, self.prior, rng,
            )
            out_in = config.hidden_layer_dim
        else:
            self.hidden = None
            out_in = concat_dim
        self.output = bl.DenseLayer(
            "output", out_in, config.output_dim, st.output, st.bias_uncertainty,
            self.prior, rng,
        )

    def layers(self):
        layers = [self.event_emb, self.no_events, self.gender_emb, self.ethnicity_emb]
        layers.extend(self.lstm)
        if self.hidden is not None:
            layers.append(self.hidden)
        layers.append(self.output)
        return layers

    def parameters(self):
        out = {}
        for layer in self.layers():
            out.update(layer.parameters())
        return out

    def posteriors(self):
        out = {}
        for layer in self.layers():
            out.update(layer.posteriors())
        return out

    def realize(self, rng=None, mode="sample"):
        """Draw one weight realization for a whole forward pass."""
        w = {
            "events": self.event_emb.realize(rng, mode),
            "no_events": self.no_events.realize(rng, mode),
            "gender": self.gender_emb.realize(rng, mode),
            "ethnicity": self.ethnicity_emb.realize(rng, mode),
            "lstm": [layer.realize(rng, mode) for layer in self.lstm],
            "output": self.output.realize(rng, mode),
        }
        w["hidden"] = None if self.hidden is None else self.hidden.realize(rng, mode)
        return w

    def forward_logits(self, batch, weights):
        n, tmax = batch.n, batch.max_days
        ev = nc.index_rows(weights["events"], batch.event_ids)
        days = nc.segment_mean(ev, batch.day_slots, n * tmax)
        days = nc.add(days, nc.matmul(Tensor(batch.empty_day), weights["no_events"]))

        h_dim = self.config.rnn_dim
        step_rows = np.arange(n) * tmax
        xs = [nc.index_rows(days, step_rows + t) for t in range(tmax)]
        for wx, wh, b in weights["lstm"]:
            h = Tensor(np.zeros((n, h_dim)))
            c = Tensor(np.zeros((n, h_dim)))
            outputs = []
            for t in range(tmax):
                h_new, c_new = bl.lstm_step(xs[t], h, c, wx, wh, b)
                col = batch.mask[:, t]
                if np.all(col == 1.0):
                    h, c = h_new, c_new
                else:
                    # padded steps carry state through unchanged
                    m = Tensor(np.repeat(col[:, None], h_dim, axis=1))
                    h = nc.add(h, nc.mul(m, nc.sub(h_new, h)))
                    c = nc.add(c, nc.mul(m, nc.sub(c_new, c)))
                outputs.append(h)
            xs = outputs
        last = xs[-1]

        gender = nc.index_rows(weights["gender"], batch.gender_ids)
        eth = nc.index_rows(weights["ethnicity"], batch.ethnicity_ids)
        feats = nc.concat_cols([last, gender, eth, Tensor(batch.age)])
        if weights["hidden"] is not None:
            wH, bH = weights["hidden"]
            feats = nc.relu(nc.add(nc.matmul(feats, wH), bH))
        wO, bO = weights["output"]
        return nc.add(nc.matmul(feats, wO), bO)

    def forward(self, batch, mode="sample", rng=None, weights=None):
        """Predictive-distribution parameters for a prepared batch."""
        if weights is None:
            if mode == "sample" and not self.config.stochasticity.any_stochastic:
                mode = "mean"
            weights = self.realize(rng, mode)
        logits = self.forward_logits(batch, weights)
        if self.config.task == "binary":
            return nc.sigmoid(logits)
        return nc.softmax(logits)


# ---------------------------------------------------------------------------
# losses


def elbo_beta(step, annealing_steps):
    """Linear KL ramp, clamped to [0, 1]."""
    return min(1.0, max(0.0, step / annealing_steps))


def nll_loss(model, batch, weights):
    """Mean negative log-likelihood, computed stably from logits."""
    z = model.forward_logits(batch, weights)
    n = batch.n
    if model.config.task == "binary":
        y = Tensor(batch.labels.reshape(n, 1).astype(float))
        per = nc.sub(nc.softplus(z), nc.mul(y, z))
        return nc.reduce_mean(per)
    zmax = np.max(z.data, axis=1, keepdims=True)
    shifted = nc.sub(z, Tensor(np.repeat(zmax, z.shape[1], axis=1)))
    lse = nc.add(nc.log(nc.reduce_sum(nc.exp(shifted), axis=1, keepdims=True)), Tensor(zmax))
    picked = nc.take_per_row(z, batch.labels)
    return nc.reduce_mean(nc.sub(lse, picked))


def loss_elbo(model, batch, global_step, train_size, rng=None):
    """Mean NLL plus the annealed per-example KL of all stochastic layers."""
    mode = "sample" if model.config.stochasticity.any_stochastic else "mean"
    weights = model.realize(rng, mode)
    loss = nll_loss(model, batch, weights)
    beta = elbo_beta(global_step, model.config.annealing_steps)
    posteriors = model.posteriors()
    if beta > 0.0 and posteriors:
        kl = None
        for post in posteriors.values():
            term = bl.kl_to_prior(post, model.prior)
            kl = term if kl is None else nc.add(kl, term)
        loss = nc.add(loss, nc.mul(kl, beta / train_size))
    return loss


# ---------------------------------------------------------------------------
# optimization


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.names = sorted(params)
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}

    def zero_grad(self):
        for n in self.names:
            self.params[n].grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correct1 = 1.0 - b1**self.t
        correct2 = 1.0 - b2**self.t
        for n in self.names:
            p = self.params[n]
            g = p.grad
            if g is None:
                continue
            self.m[n] = b1 * self.m[n] + (1 - b1) * g
            self.v[n] = b2 * self.v[n] + (1 - b2) * (g * g)
            m_hat = self.m[n] / correct1
            v_hat = self.v[n] / correct2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self):
        return {
            "t": self.t,
            "m": {n: self.m[n].copy() for n in self.names},
            "v": {n: self.v[n].copy() for n in self.names},
        }

    def load_state_dict(self, state):
        self.t = int(state["t"])
        for n in self.names:
            self.m[n] = np.asarray(state["m"][n], dtype=float).copy()
            self.v[n] = np.asarray(state["v"][n], dtype=float).copy()


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochStats:
    epoch: int
    global_step: int
    train_loss: float
    val_nll: float


@dataclass
class TrainHistory:
    epochs: list
    best_epoch: int
    best_val_nll: float
    global_step: int


def _batches(items, size):
    for start in range(0, len(items), size):
        yield items[start : start + size]


def lambda_nll(lam, labels, eps=1e-12):
    """Plain-array NLL of predictive-distribution parameters."""
    lam = np.clip(np.asarray(lam, dtype=float), eps, 1.0 - eps)
    labels = np.asarray(labels)
    if lam.ndim == 2 and lam.shape[1] > 1:
        picked = lam[np.arange(len(labels)), labels]
    else:
        lam = lam.reshape(-1)
        picked = np.where(labels == 1, lam, 1.0 - lam)
    return float(-np.mean(np.log(picked)))


def evaluate_nll(model, records, batch_size=512):
    """Mean-mode validation NLL over records."""
    vals = []
    weights = model.realize(mode="mean")
    for chunk in _batches(records, batch_size):
        batch = prepare_batch(chunk, model.schema)
        lam = model.forward(batch, weights=weights).data
        vals.append((lambda_nll(lam, batch.labels), len(chunk)))
    total = sum(n for _, n in vals)
    return sum(v * n for v, n in vals) / total


def train(model, data, epochs=40, patience=5, log_file=None, start_step=0):
    """Adam-optimize the model on a CohortSplit; early stop on validation NLL.

    Returns a TrainHistory; the model is left at its best-validation
    epoch's parameters. Raises TrainingDiverged if the loss goes
    non-finite.
    """
    cfg = model.config
    params = model.parameters()
    opt = Adam(params, lr=cfg.learning_rate)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    noise_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
    train_records = list(data.train)
    n_train = len(train_records)
    global_step = start_step
    history = []
    best_nll = math.inf
    best_epoch = -1
    best_params = None
    since_best = 0
    log_fh = open(log_file, "a", encoding="utf-8") if log_file else None
    try:
        for epoch in range(1, epochs + 1):
            order = shuffle_rng.permutation(n_train)
            losses = []
            for idx_chunk in _batches(order, cfg.batch_size):
                chunk = [train_records[i] for i in idx_chunk]
                batch = prepare_batch(chunk, model.schema)
                global_step += 1
                opt.zero_grad()
                try:
                    with Tape():
                        loss = loss_elbo(model, batch, global_step, n_train, noise_rng)
                        nc.backward(loss)
                except nc.NonFiniteError as e:
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {global_step}: {e}"
                    ) from e
                opt.step()
                losses.append(loss.item())
            val_nll = evaluate_nll(model, data.validation) if data.validation else float(
                np.mean(losses)
            )
            stats = EpochStats(epoch, global_step, float(np.mean(losses)), val_nll)
            history.append(stats)
            line = (
                f"epoch={stats.epoch} step={stats.global_step} "
                f"train_loss={stats.train_loss:.6f} val_nll={stats.val_nll:.6f}"
            )
            log.info("%s", line)
            if log_fh:
                log_fh.write(line + "\n")
            if val_nll < best_nll:
                best_nll = val_nll
                best_epoch = epoch
                best_params = {n: p.data.copy() for n, p in params.items()}
                since_best = 0
            else:
                since_best += 1
                if since_best >= patience:
                    break
    finally:
        if log_fh:
            log_fh.close()
    if best_params is not None:
        for n, p in params.items():
            p.data[...] = best_params[n]
    return TrainHistory(history, best_epoch, best_nll, global_step)


def train_ensemble(spec, data, schema, epochs=40, patience=5, workers=1, log_dir=None):
    """Train spec.size members independently; training order is irrelevant
    because each member depends only on its own seed."""

    def build_and_train(m):
        model = SequenceModel(spec.member_config(m), schema)
        log_file = None
        if log_dir is not None:
            log_file = f"{log_dir}/member_{spec.seeds[m]:d}_train_log.txt"
        train(model, data, epochs=epochs, patience=patience, log_file=log_file)
        return model

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(build_and_train, range(spec.size)))
    return [build_and_train(m) for m in range(spec.size)]


# ---------------------------------------------------------------------------
# prediction


def predict_lambda(model, records, weights=None, batch_size=512):
    """(n, output_dim) predictive parameters under one weight realization."""
    if weights is None:
        weights = model.realize(mode="mean")
    rows = []
    for chunk in _batches(records, batch_size):
        batch = prepare_batch(chunk, model.schema)
        rows.append(model.forward(batch, weights=weights).data)
    return np.concatenate(rows, axis=0)


def predict_samples(model_or_ensemble, records, m_samples=None, seed=0, mode="global"):
    """Sample predictive-uncertainty values: (n, M, output_dim).

    Ensembles contribute one sample per member (M fixed to the member
    count). A single Bayesian model draws M weight realizations; in
    "global" mode each realization is shared across all records, in
    "per-example" mode every record gets its own M draws.
    """
    single = False
    if not isinstance(records, (list, tuple)):
        records = [records]
        single = True
    if isinstance(model_or_ensemble, (list, tuple)):
        members = list(model_or_ensemble)
        if m_samples is not None and m_samples != len(members):
            raise ValueError(
                f"ensemble sample count must equal member count {len(members)}"
            )
        cols = [predict_lambda(m, records) for m in members]
        out = np.stack(cols, axis=1)
        return out[0] if single else out

    model = model_or_ensemble
    if m_samples is None or m_samples <= 0:
        raise ValueError("m_samples must be a positive integer for a single model")
    stochastic = model.config.stochasticity.any_stochastic
    n = len(records)
    out = np.empty((n, m_samples, model.config.output_dim))
    if mode == "global" or not stochastic:
        for m in range(m_samples):
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(m,)))
            weights = model.realize(rng, "sample" if stochastic else "mean")
            out[:, m, :] = predict_lambda(model, records, weights=weights)
    elif mode == "per-example":
        for i, rec in enumerate(records):
            for m in range(m_samples):
                rng = np.random.default_rng(
                    np.random.SeedSequence(seed, spawn_key=(i, m))
                )
                weights = model.realize(rng, "sample")
                out[i, m, :] = predict_lambda(model, [rec], weights=weights)
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    return out[0] if single else out
