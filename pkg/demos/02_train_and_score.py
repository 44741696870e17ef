"""Train two models on the in-domain classes and see which uncertainty scores flag the out-domain ones."""

# %%
import numpy as np

from uqbed import metrics
from uqbed.algorithms import HyperParams, Seeds, train_run
from uqbed.dataforge import (BlobSpec, SplitSpec, apply_partition, class_prototypes, generate_blob_splits,
                             root_partition, split_train_val, ward_tree)
from uqbed.measures import MeasureContext, fit_measure, score
from uqbed.netcore import PredictorConfig
from uqbed.posthoc import Ensemble

pool, test = generate_blob_splits(BlobSpec(), seed=0, test_per_class=100)
part = root_partition(ward_tree(class_prototypes(pool)))
pool_in, _ = apply_partition(pool, part)
test_in, test_out = apply_partition(test, part)
train, val = split_train_val(pool_in, SplitSpec(0))
print(f"train {len(train)}  val {len(val)}  test in {len(test_in)}  test out {len(test_out)}")

# %% Plain ERM and MC-Dropout with the default hyper-parameters.
base = PredictorConfig.for_tier("small", pool_in.dim, pool_in.class_count)
models = {alg: train_run(alg, base, HyperParams(), train, val, Seeds(init=1), epochs=60)
          for alg in ("erm", "mcdropout")}
for alg, m in models.items():
    print(f"{alg:10s} final train loss {m.train_loss[-1]:.4f}  val NLL {m.val_nll:.4f}")

# %% Score validation, in-domain test and out-domain test inputs with every measure that applies.
for alg, m in models.items():
    ens = Ensemble([m])
    acc = metrics.acc_topk(ens.predict_proba(test_in.features), test_in.labels)
    print(f"\n{alg}: ACC@1 {acc:.3f}")
    for measure in ("largest", "gap", "entropy", "jacobian", "gmm", "augment", "native"):
        if measure == "native" and alg == "erm":
            continue  # ERM has no algorithm-specific score
        ctx = fit_measure(measure, ens, val.features, val.labels, MeasureContext())
        s_val, s_in, s_out = (score(measure, ens, X, ctx) for X in (val.features, test_in.features,
                                                                   test_out.features))
        od = metrics.out_domain_metrics(s_val, s_in, s_out)
        print(f"  {measure:9s} AUC {od['AUC']:.3f}  InAsIn {od['InAsIn']:.3f}  OutAsOut {od['OutAsOut']:.3f}")
