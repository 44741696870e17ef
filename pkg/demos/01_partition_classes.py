"""Splitting classes into in-domain and out-domain halves with Ward clustering."""

# %% Eight Gaussian classes whose means sit around two far-apart centres.
import numpy as np

from uqbed.dataforge import BlobSpec, class_prototypes, generate_blobs, root_partition, ward_tree

spec = BlobSpec(classes=8, per_class=200, dim=16, supercluster_count=2, spread=1.5, separation=3.0)
data = generate_blobs(spec, seed=0)
print(data.features.shape, np.bincount(data.labels))

# %% One prototype per class: the mean input (a trained featurizer can be passed instead).
protos = class_prototypes(data)
print(np.round(protos[:, :4], 2))

# %% Agglomerate the prototypes.  Each merge is (left node, right node, Ward cost).
tree = ward_tree(protos)
for i, j, cost in tree.merges:
    print(f"merge {i:2d} + {j:2d}  cost {cost:8.3f}")

# %% The two subtrees under the root become the in- and out-domain class sets.
part = root_partition(tree)
print("in :", part.in_classes)
print("out:", part.out_classes)
print("superclusters of in-domain classes:", {c % 2 for c in part.in_classes})
