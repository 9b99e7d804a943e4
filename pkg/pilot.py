import time

import numpy as np

from seqrisk.cohort import GeneratorConfig, generate_synthetic, split
from seqrisk.profiles import make_config
from seqrisk.seqmodel import (
    CohortSchema, EnsembleSpec, SequenceModel, encode_records,
    evaluate_nll, predict_samples, train, train_ensemble,
)
from seqrisk import uq

t0 = time.time()
gen = GeneratorConfig(n_patients=5000, mean_days=3.0, events_per_day=3.0)
records, vocab = generate_synthetic(gen, seed=2024)
encode_records(records, vocab)
data = split(records, seed=2024)
vocab.recount(data.train)
schema = CohortSchema.from_vocabulary(vocab)
print(f"gen+split: {time.time()-t0:.1f}s, train={len(data.train)} val={len(data.validation)}")
print("pos rate:", np.mean([r.label for r in records]))

cfg = make_config("deterministic", "desk", seed=100)
t1 = time.time()
model = SequenceModel(cfg, schema)
hist = train(model, data, epochs=20, patience=5)
t_member = time.time() - t1
print(f"one member: {t_member:.1f}s, best epoch {hist.best_epoch}, val NLL {hist.best_val_nll:.4f}, epochs run {len(hist.epochs)}")

# two more members for a variability peek
members = [model]
for seed in (101, 102, 103):
    m = SequenceModel(make_config("deterministic", "desk", seed=seed), schema)
    train(m, data, epochs=20, patience=5)
    members.append(m)
print(f"4 members total: {time.time()-t1:.1f}s")

val = data.validation
labels = np.array([r.label for r in val])
samples = predict_samples(members, val)[:, :, 0]
aucs = [uq.auc_roc(samples[:, j], labels) for j in range(len(members))]
print("member val AUC-ROC:", [f"{a:.4f}" for a in aucs], "popstd:", np.std(aucs))
rng_ = samples.max(axis=1) - samples.min(axis=1)
pos, neg = rng_[labels == 1], rng_[labels == 0]
print(f"range>0.2 among positives: {np.mean(pos > 0.2):.3f}  mean range pos {pos.mean():.3f} neg {neg.mean():.3f}")

t2 = time.time()
bcfg = make_config("bayesian-embeddings", "desk", seed=100)
bmodel = SequenceModel(bcfg, schema)
bhist = train(bmodel, data, epochs=20, patience=5)
print(f"bayes member: {time.time()-t2:.1f}s best epoch {bhist.best_epoch} val NLL {bhist.best_val_nll:.4f}")
bsamp = predict_samples(bmodel, val, m_samples=30, seed=7)[:, :, 0]
marg_b = bsamp.mean(axis=1)
marg_e = samples.mean(axis=1)
nll_b = uq.nll(marg_b, labels)
nll_e = uq.nll(marg_e, labels)
print(f"marg NLL bayes {nll_b:.4f} ens {nll_e:.4f} ratio {nll_b/nll_e:.3f}")
ece_marg = uq.ece(marg_e, labels)
ece_members = np.mean([uq.ece(samples[:, j], labels) for j in range(len(members))])
print(f"ens marg ECE {ece_marg:.4f} mean member ECE {ece_members:.4f}")

from seqrisk.insight import entropy_frequency_report
rep = entropy_frequency_report(bmodel, vocab)
print(f"entropy/log10count pearson r = {rep.pearson_log10:.4f}")
print(f"total pilot: {time.time()-t0:.1f}s")
