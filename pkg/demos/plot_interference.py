"""
Why averaging LoRA factors is not averaging updates
===================================================

Each client holds an update dW_i = alpha * B_i A_i. The server wants the mean
of the dW_i but only receives the factors.
"""

import numpy as np
from fedlora import LoraAdapter, Rng
from fedlora.fedcore import factor_average_product, interference_gap, oracle_product_average

rng = Rng(0)
d, r, n = 12, 2, 5

# independent factors on every client
free = [LoraAdapter(rng.normal(size=(r, d)), rng.normal(size=(d, r))) for _ in range(n)]
print("mean of products   norm:", np.linalg.norm(oracle_product_average(free)))
print("product of means   norm:", np.linalg.norm(factor_average_product(free)))
print("gap                     :", interference_gap(free))

# share A across clients and the gap disappears (up to rounding)
shared_a = rng.normal(size=(r, d))
tied = [LoraAdapter(shared_a, rng.normal(size=(d, r))) for _ in range(n)]
print("gap with A shared       :", interference_gap(tied))

# clients start from one adapter and drift apart by eps: gap ~ eps**2
a0, b0 = rng.normal(size=(r, d)), rng.normal(size=(d, r))
for eps in (1e-1, 1e-2, 1e-3):
    drifted = [LoraAdapter(a0 + eps * rng.normal(size=a0.shape), b0 + eps * rng.normal(size=b0.shape))
               for _ in range(n)]
    print(f"eps={eps:g}  gap {interference_gap(drifted):.2e}")
