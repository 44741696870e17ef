"""Temperature scaling and ensembles over hyper-parameter trials."""

# %%
import numpy as np

from uqbed import metrics
from uqbed.algorithms import Seeds, train_run
from uqbed.dataforge import BlobSpec, SplitSpec, generate_blobs, holdout_split, split_train_val
from uqbed.netcore import PredictorConfig
from uqbed.pipeline import sample_hparams
from uqbed.posthoc import ensemble_select

data = generate_blobs(BlobSpec(classes=6, per_class=150, dim=8, supercluster_count=1, noise=1.2), seed=3)
pool, test = holdout_split(data, 0.25, seed=0)
train, val = split_train_val(pool, SplitSpec(0))
base = PredictorConfig.for_tier("small", data.dim, data.class_count)

# %% Five trials: trial 0 uses the defaults, the rest are random draws.
models = []
for trial in range(5):
    hp = sample_hparams("erm", trial, seed=0)
    m = train_run("erm", base, hp, train, val, Seeds(init=100 + trial, data=0, trial=trial), epochs=40)
    models.append(m)
    print(f"trial {trial}: lr {hp.learning_rate:.3f} momentum {hp.momentum}  val NLL {m.val_nll:.4f}")

# %% Best single trial versus all five, before and after fitting a temperature on validation data.
for K in (1, 5):
    ens = ensemble_select(models, K)[0]
    print(f"\nk={K} trials {ens.provenance['trials']}")
    for label, e in (("initial", ens), ("learned", ens.calibrated(val.features, val.labels))):
        P = e.predict_proba(test.features)
        print(f"  {label:8s} tau {e.tau:6.3f}  ACC@1 {metrics.acc_topk(P, test.labels):.3f}"
              f"  ECE {metrics.ece(P, test.labels):.4f}  NLL {metrics.nll(P, test.labels):.4f}")
