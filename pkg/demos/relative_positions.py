"""
Relative position representations
=================================

Offsets are clipped to +/-k, so far-apart tokens share one boundary embedding.
"""

import numpy as np

from ssan.attention import RelativePositionTable, attention, attention_rpr, relative_index
from ssan.tensor import Tensor

k = 2
print(relative_index(6, k))

rng = np.random.default_rng(0)
Q, K, V = (Tensor(rng.normal(size=(1, 6, 4))) for _ in range(3))
mask = np.ones((1, 6), dtype=bool)

# all-zero tables leave plain attention untouched, bit for bit
zero = RelativePositionTable(Tensor(np.zeros((2 * k + 1, 4))), Tensor(np.zeros((2 * k + 1, 4))), k)
print("identical:", np.array_equal(attention(Q, K, V, mask).data, attention_rpr(Q, K, V, zero, mask).data))

# random tables make the output order-aware
tables = RelativePositionTable(Tensor(rng.normal(size=(2 * k + 1, 4))),
                               Tensor(rng.normal(size=(2 * k + 1, 4))), k)
shift = attention_rpr(Q, K, V, tables, mask).data - attention(Q, K, V, mask).data
print("rpr shift per position:", np.abs(shift).max(axis=-1).round(3))
