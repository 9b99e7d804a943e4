from dataclasses import replace

import numpy as np
import pytest

from seqrisk import numcore as nc
from seqrisk import seqmodel as sm
from seqrisk.bayeslayers import StochasticityConfig
from seqrisk.cohort import GeneratorConfig, VocabularyError, generate_synthetic, split
from seqrisk.numcore import Tape
from seqrisk.profiles import make_config
from seqrisk.seqmodel import (
    Adam,
    CohortSchema,
    EnsembleSpec,
    ModelConfig,
    SequenceModel,
    TrainingDiverged,
    elbo_beta,
    encode_records,
    evaluate_nll,
    loss_elbo,
    nll_loss,
    predict_lambda,
    predict_samples,
    prepare_batch,
    train,
    train_ensemble,
)

from conftest import tiny_config
from gradcheck import fd_gradients


def bayesify(config, variant="fully-bayesian", bias=False):
    return replace(config, stochasticity=StochasticityConfig.from_variant(variant, bias))


class TestModelConfig:
    def test_search_range_validation(self):
        make_config("deterministic", "desk").validate_search_ranges()
        make_config("fully-bayesian", "paper").validate_search_ranges()
        with pytest.raises(ValueError):
            tiny_config(batch_size=48).validate_search_ranges()
        with pytest.raises(ValueError):
            tiny_config(learning_rate=0.5).validate_search_ranges()

    def test_paper_profile_values_verbatim(self):
        cfg = make_config("bayesian-embeddings", "paper")
        assert cfg.learning_rate == 1.238e-3
        assert cfg.annealing_steps == 972_200
        assert cfg.prior_std == 0.292
        assert cfg.rnn_dim == 1024
        assert cfg.hidden_layer_dim == 512
        assert not cfg.stochasticity.bias_uncertainty
        rnn = make_config("bayesian-rnn-hidden-output", "paper")
        assert (rnn.batch_size, rnn.rnn_dim, rnn.hidden_layer_dim) == (512, 16, 0)
        assert rnn.stochasticity.bias_uncertainty

    def test_bad_task_rejected(self):
        with pytest.raises(ValueError):
            tiny_config(task="regression")
        with pytest.raises(ValueError):
            tiny_config(task="multiclass", num_classes=1)

    def test_event_embedding_dim_scales_with_multiplier(self):
        assert tiny_config(embedding_dim_multiplier=0.5).event_embedding_dim == 4
        assert tiny_config(embedding_dim_multiplier=1.5).event_embedding_dim == 12


class TestForward:
    def test_binary_output_in_open_interval(self, tiny_cohort, trained_tiny_model):
        records, _, data, _ = tiny_cohort
        lam = predict_lambda(trained_tiny_model, data.validation)
        assert lam.shape == (len(data.validation), 1)
        assert np.all(lam > 0.0) and np.all(lam < 1.0)

    def test_multiclass_rows_sum_to_one(self, tiny_cohort):
        records, _, _, schema = tiny_cohort
        model = SequenceModel(tiny_config(task="multiclass", num_classes=4), schema)
        lam = predict_lambda(model, records[:16])
        assert lam.shape == (16, 4)
        np.testing.assert_allclose(lam.sum(axis=1), 1.0, atol=1e-12)

    def test_sigma_zero_bayesian_matches_deterministic_means(self, tiny_cohort):
        records, _, _, schema = tiny_cohort
        det = SequenceModel(tiny_config(seed=5), schema)
        bayes = SequenceModel(bayesify(tiny_config(seed=6), "fully-bayesian", True), schema)
        det_params = det.parameters()
        for name, post in bayes.posteriors().items():
            post.mean.data[...] = det_params[name].data
            post.rho.data[...] = -60.0  # sigma -> 0
        lam_det = predict_lambda(det, records[:8])
        batch = prepare_batch(records[:8], schema)
        lam_bayes = bayes.forward(batch, mode="sample", rng=np.random.default_rng(0)).data
        np.testing.assert_allclose(lam_bayes, lam_det, atol=1e-9)

    def test_batch_permutation_permutes_outputs(self, tiny_cohort, trained_tiny_model):
        records, _, data, schema = tiny_cohort
        chunk = data.validation[:12]
        perm = np.random.default_rng(3).permutation(len(chunk))
        lam = predict_lambda(trained_tiny_model, chunk)
        lam_perm = predict_lambda(trained_tiny_model, [chunk[i] for i in perm])
        np.testing.assert_allclose(lam_perm, lam[perm], atol=1e-12)

    def test_empty_sequence_patient_uses_learned_day_vector(self, tiny_cohort):
        records, _, _, schema = tiny_cohort
        rec = replace(records[0], events=[])
        rec._gender_id = records[0]._gender_id
        rec._ethnicity_id = records[0]._ethnicity_id
        model = SequenceModel(tiny_config(), schema)
        lam1 = predict_lambda(model, [rec])
        model.no_events.table.data[...] += 5.0
        lam2 = predict_lambda(model, [rec])
        assert abs(lam1[0, 0] - lam2[0, 0]) > 1e-6

    def test_vocabulary_mismatch_raises(self, tiny_cohort):
        records, _, _, _ = tiny_cohort
        small = CohortSchema(event_vocab=3, gender_vocab=2, ethnicity_vocab=4)
        model = SequenceModel(tiny_config(), small)
        with pytest.raises(VocabularyError):
            predict_lambda(model, records[:4])


class TestLossElbo:
    def test_deterministic_loss_is_plain_nll(self, tiny_cohort):
        records, _, _, schema = tiny_cohort
        model = SequenceModel(tiny_config(), schema)
        batch = prepare_batch(records[:16], schema)
        loss = loss_elbo(model, batch, global_step=10, train_size=100)
        lam = model.forward(batch, weights=model.realize(mode="mean")).data
        assert abs(loss.item() - sm.lambda_nll(lam, batch.labels)) < 1e-10

    def test_beta_schedule(self):
        assert elbo_beta(0, 100) == 0.0
        assert elbo_beta(50, 100) == 0.5
        assert elbo_beta(100, 100) == 1.0
        assert elbo_beta(250, 100) == 1.0
        assert elbo_beta(1, 1) == 1.0  # annealing_steps = 1: full weight from the first step

    def test_beta_monotone_and_clamped(self):
        rng = np.random.default_rng(0)
        steps = np.sort(rng.integers(0, 5000, size=50))
        betas = [elbo_beta(int(s), 2000) for s in steps]
        assert all(0.0 <= b <= 1.0 for b in betas)
        assert all(b2 >= b1 for b1, b2 in zip(betas, betas[1:]))

    def test_kl_term_equals_sum_of_layer_kls(self, tiny_cohort):
        from seqrisk import bayeslayers as bl

        records, _, _, schema = tiny_cohort
        model = SequenceModel(bayesify(tiny_config(), "fully-bayesian", True), schema)
        batch = prepare_batch(records[:8], schema)
        n_train = 50
        rng_a = np.random.default_rng(77)
        rng_b = np.random.default_rng(77)
        full = loss_elbo(model, batch, global_step=10 ** 9, train_size=n_train, rng=rng_a)
        weights = model.realize(rng_b, "sample")
        nll = nll_loss(model, batch, weights)
        kl = sum(bl.kl_to_prior(p, model.prior).item() for p in model.posteriors().values())
        assert abs(full.item() - (nll.item() + kl / n_train)) < 1e-9

    def test_elbo_gradient_matches_fd_over_noise_draws(self, tiny_cohort):
        records, _, _, schema = tiny_cohort
        cfg = bayesify(tiny_config(rnn_dim=6, dense_embedding_dim=4, hidden_layer_dim=4),
                       "fully-bayesian", True)
        model = SequenceModel(cfg, schema)
        batch = prepare_batch(records[:2], schema)
        params = model.parameters()
        names = sorted(params)
        tensors = [params[n] for n in names]

        def avg_loss_tensor():
            total = None
            for k in range(10):  # common random numbers across evaluations
                rng = np.random.default_rng(1000 + k)
                term = loss_elbo(model, batch, 10 ** 9, 100, rng=rng)
                total = term if total is None else nc.add(total, term)
            return nc.mul(total, 0.1)

        for t in tensors:
            t.grad = None
        with Tape():
            loss = avg_loss_tensor()
            nc.backward(loss)
        auto = {n: params[n].grad.copy() for n in names}

        rng_pick = np.random.default_rng(5)
        fd = fd_gradients(
            lambda: avg_loss_tensor().item(),
            [params[n].data for n in names],
            h=1e-5,
            coords=4,
            rng=rng_pick,
        )
        for n, (idxs, vals) in zip(names, fd):
            got = auto[n].reshape(-1)[idxs]
            rel = np.abs(got - vals) / (np.abs(vals) + 1e-8)
            assert rel.max() < 1e-3, f"{n}: rel err {rel.max():.2e}"


class TestTrain:
    def test_learns_low_noise_cohort(self):
        from seqrisk.cohort import CohortSplit

        cfg = GeneratorConfig(
            n_patients=200, vocab_size=30, mean_days=2.5, events_per_day=3.0,
            noise_by_age_band=(0.02, 0.02, 0.02, 0.02, 0.02),
        )
        records, vocab = generate_synthetic(cfg, seed=33)
        encode_records(records, vocab)
        data = CohortSplit(records, [], [], 0)  # fit capability: all 200 are train
        model = SequenceModel(tiny_config(seed=0, learning_rate=2e-2), CohortSchema.from_vocabulary(vocab))
        train(model, data, epochs=50, patience=50)
        assert evaluate_nll(model, data.train) < 0.3

    def test_same_seed_bit_identical_parameters(self, tiny_cohort):
        _, _, data, schema = tiny_cohort
        results = []
        for _ in range(2):
            model = SequenceModel(bayesify(tiny_config(seed=9), "bayesian-embeddings"), schema)
            train(model, data, epochs=3, patience=3)
            results.append({n: p.data.copy() for n, p in model.parameters().items()})
        for name in results[0]:
            assert np.array_equal(results[0][name], results[1][name]), name

    def test_zero_learning_rate_keeps_parameters(self, tiny_cohort):
        _, _, data, schema = tiny_cohort
        model = SequenceModel(tiny_config(learning_rate=0.0), schema)
        before = {n: p.data.copy() for n, p in model.parameters().items()}
        train(model, data, epochs=2, patience=1)
        after = model.parameters()
        changed = [n for n in before if not np.array_equal(before[n], after[n].data)]
        assert changed == []

    def test_divergence_is_reported(self, tiny_cohort):
        _, _, data, schema = tiny_cohort
        model = SequenceModel(tiny_config(learning_rate=0.1), schema)
        model.output.weight.data[...] = np.nan  # corrupted state must abort loudly
        with pytest.raises(TrainingDiverged) as err:
            train(model, data, epochs=1, patience=1)
        assert "epoch 1" in str(err.value)

    def test_metrics_log_one_line_per_epoch(self, tiny_cohort, tmp_path):
        _, _, data, schema = tiny_cohort
        model = SequenceModel(tiny_config(), schema)
        log_file = tmp_path / "train_log.txt"
        history = train(model, data, epochs=3, patience=3, log_file=str(log_file))
        lines = log_file.read_text().strip().splitlines()
        assert len(lines) == len(history.epochs)
        assert all(line.startswith("epoch=") and "val_nll=" in line for line in lines)


class TestEnsemble:
    def test_spec_requires_distinct_seeds(self):
        with pytest.raises(ValueError):
            EnsembleSpec(tiny_config(), seeds=(1, 1, 2))

    def test_single_member_equals_plain_train(self, tiny_cohort):
        _, _, data, schema = tiny_cohort
        spec = EnsembleSpec(tiny_config(), seeds=(21,))
        members = train_ensemble(spec, data, schema, epochs=3, patience=3)
        solo = SequenceModel(replace(tiny_config(), seed=21), schema)
        train(solo, data, epochs=3, patience=3)
        for name, p in solo.parameters().items():
            assert np.array_equal(p.data, members[0].parameters()[name].data)

    def test_member_permutation_permutes_predictions(self, tiny_cohort):
        _, _, data, schema = tiny_cohort
        fwd = train_ensemble(EnsembleSpec(tiny_config(), (5, 6)), data, schema, epochs=2, patience=2)
        rev = train_ensemble(EnsembleSpec(tiny_config(), (6, 5)), data, schema, epochs=2, patience=2)
        lam_fwd = predict_samples(fwd, data.validation[:6])
        lam_rev = predict_samples(rev, data.validation[:6])
        np.testing.assert_array_equal(lam_fwd[:, [1, 0], :], lam_rev)

    def test_workers_do_not_change_results(self, tiny_cohort):
        _, _, data, schema = tiny_cohort
        spec = EnsembleSpec(tiny_config(), seeds=(31, 32))
        seq = train_ensemble(spec, data, schema, epochs=2, patience=2, workers=1)
        par = train_ensemble(spec, data, schema, epochs=2, patience=2, workers=2)
        for a, b in zip(seq, par):
            for name, p in a.parameters().items():
                assert np.array_equal(p.data, b.parameters()[name].data)


class TestPredictSamples:
    def test_deterministic_singleton(self, tiny_cohort, trained_tiny_model):
        _, _, data, _ = tiny_cohort
        out = predict_samples(trained_tiny_model, data.validation[0], m_samples=1, seed=0)
        assert out.shape == (1, 1)

    def test_sigma_zero_samples_identical(self, tiny_cohort):
        records, _, _, schema = tiny_cohort
        model = SequenceModel(bayesify(tiny_config(), "bayesian-embeddings"), schema)
        for post in model.posteriors().values():
            post.rho.data[...] = -60.0
        out = predict_samples(model, records[:5], m_samples=7, seed=1)
        assert np.allclose(out.std(axis=1), 0.0, atol=1e-12)

    def test_seeded_sampling_reproducible(self, tiny_cohort):
        records, _, _, schema = tiny_cohort
        model = SequenceModel(bayesify(tiny_config(), "bayesian-embeddings"), schema)
        a = predict_samples(model, records[:4], m_samples=5, seed=42)
        b = predict_samples(model, records[:4], m_samples=5, seed=42)
        assert np.array_equal(a, b)

    def test_samples_vary_for_stochastic_model(self, tiny_cohort):
        records, _, _, schema = tiny_cohort
        model = SequenceModel(bayesify(tiny_config(), "bayesian-embeddings"), schema)
        out = predict_samples(model, records[:4], m_samples=6, seed=2)
        assert out.std(axis=1).max() > 0.0

    def test_ensemble_m_must_match(self, tiny_cohort, trained_tiny_model):
        _, _, data, _ = tiny_cohort
        with pytest.raises(ValueError):
            predict_samples([trained_tiny_model], data.validation[:2], m_samples=3)

    def test_nonpositive_m_rejected(self, tiny_cohort, trained_tiny_model):
        _, _, data, _ = tiny_cohort
        with pytest.raises(ValueError):
            predict_samples(trained_tiny_model, data.validation[:2], m_samples=0)

    def test_per_example_mode_draws_independently(self, tiny_cohort):
        records, _, _, schema = tiny_cohort
        model = SequenceModel(bayesify(tiny_config(), "bayesian-embeddings"), schema)
        glob = predict_samples(model, records[:3], m_samples=4, seed=3, mode="global")
        per = predict_samples(model, records[:3], m_samples=4, seed=3, mode="per-example")
        assert glob.shape == per.shape == (3, 4, 1)
        assert not np.array_equal(glob, per)


class TestAdam:
    def test_matches_reference_update(self):
        # one Adam step against the closed-form update on a known gradient
        p = nc.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        p.grad = np.array([0.5, -1.0])
        opt.step()
        g = np.array([0.5, -1.0])
        m_hat = (0.1 * g) / (1 - 0.9)
        v_hat = (0.001 * g * g) / (1 - 0.999)
        expect = np.array([1.0, 2.0]) - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
        np.testing.assert_allclose(p.data, expect, rtol=1e-12)
