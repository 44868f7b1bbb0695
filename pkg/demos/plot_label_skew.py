"""
Label skew from a Dirichlet partition
=====================================

Smaller beta concentrates each class on fewer clients.
"""

import numpy as np
from fedlora.data import PartitionPlan, Scheme, gen_synthetic_classification, label_tv_distance, partition

ds = gen_synthetic_classification(d=8, num_classes=4, n=2000, cluster_spread=1.0, seed=0)

for beta in (0.1, 1.0, 10.0):
    shards = partition(ds, PartitionPlan(Scheme.DIRICHLET, num_clients=20, seed=0, beta=beta))
    tv = np.mean([label_tv_distance(s, ds) for s in shards])
    dominant = np.mean([s.class_counts().max() / s.n for s in shards])
    print(f"beta={beta:5}  mean TV to global {tv:.3f}  mean dominant-class share {dominant:.2f}")

# every sample lands on exactly one client
shards = partition(ds, PartitionPlan(Scheme.DIRICHLET, num_clients=50, seed=1, beta=0.1))
print("sizes:", sorted(s.n for s in shards)[:10], "...", "total", sum(s.n for s in shards))

# contiguous shards of the label-sorted data: most clients see one class
shards = partition(ds, PartitionPlan(Scheme.SHARDS, num_clients=8))
print([np.flatnonzero(s.class_counts()).tolist() for s in shards])
