import json
import zipfile
from dataclasses import replace

import numpy as np
import pytest

from seqrisk.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from seqrisk.seqmodel import Adam, SequenceModel, predict_lambda, predict_samples

from conftest import tiny_config


def _rezip_with(path, out, replacements):
    with zipfile.ZipFile(path) as zf:
        entries = {n: zf.read(n) for n in zf.namelist()}
    entries.update(replacements)
    with zipfile.ZipFile(out, "w") as zf:
        for name, data in entries.items():
            zf.writestr(name, data)


class TestRoundTrip:
    def test_predictions_bit_exact(self, tiny_cohort, trained_tiny_model, tmp_path):
        _, _, data, _ = tiny_cohort
        path = tmp_path / "model.ckpt"
        save_checkpoint(trained_tiny_model, path, global_step=123)
        bundle = load_checkpoint(path)
        assert bundle.global_step == 123
        before = predict_lambda(trained_tiny_model, data.validation)
        after = predict_lambda(bundle.model, data.validation)
        assert np.array_equal(before, after)

    def test_bayesian_sampling_reproduced_after_reload(self, tiny_cohort, tmp_path):
        from seqrisk.bayeslayers import StochasticityConfig

        records, _, _, schema = tiny_cohort
        cfg = replace(
            tiny_config(), stochasticity=StochasticityConfig.from_variant("bayesian-embeddings")
        )
        model = SequenceModel(cfg, schema)
        path = tmp_path / "bayes.ckpt"
        save_checkpoint(model, path)
        reloaded = load_checkpoint(path).model
        a = predict_samples(model, records[:4], m_samples=3, seed=9)
        b = predict_samples(reloaded, records[:4], m_samples=3, seed=9)
        assert np.array_equal(a, b)

    def test_optimizer_state_round_trip(self, tiny_cohort, trained_tiny_model, tmp_path):
        path = tmp_path / "opt.ckpt"
        opt = Adam(trained_tiny_model.parameters(), lr=1e-3)
        opt.t = 17
        for n in opt.names:
            opt.m[n][...] = 0.25
        save_checkpoint(trained_tiny_model, path, optimizer=opt, global_step=17)
        bundle = load_checkpoint(path)
        assert bundle.optimizer_state["t"] == 17
        assert all(np.all(bundle.optimizer_state["m"][n] == 0.25) for n in opt.names)


class TestRejection:
    def test_wrong_version_tag(self, trained_tiny_model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(trained_tiny_model, path)
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
        manifest["format_version"] = 99
        bad = tmp_path / "bad_version.ckpt"
        _rezip_with(path, bad, {"manifest.json": json.dumps(manifest)})
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(bad)

    def test_corrupted_parameter_bytes(self, trained_tiny_model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(trained_tiny_model, path)
        with zipfile.ZipFile(path) as zf:
            name = next(n for n in zf.namelist() if n.startswith("params/"))
            payload = bytearray(zf.read(name))
        payload[-3] ^= 0xFF  # flip bits inside the float data
        bad = tmp_path / "corrupt.ckpt"
        _rezip_with(path, bad, {name: bytes(payload)})
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(bad)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "noise.ckpt"
        path.write_bytes(b"not a zip at all")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_manifest(self, tmp_path):
        path = tmp_path / "hollow.ckpt"
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("params/x.npy", b"123")
        with pytest.raises(CheckpointError, match="manifest"):
            load_checkpoint(path)
