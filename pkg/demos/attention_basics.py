"""
Scaled dot-product attention by hand
====================================

One query against two orthogonal keys, then the same weights through the tape.
"""

import numpy as np

from ssan import tensor as T
from ssan.attention import attention, attention_weights

# the query matches the first key, so its score is 1/sqrt(2) against 0
Q = T.parameter([[[1.0, 0.0]]])
K = T.Tensor([[[1.0, 0.0], [0.0, 1.0]]])
V = T.Tensor([[[1.0, 0.0], [0.0, 1.0]]])
mask = np.ones((1, 2), dtype=bool)
print("weights", attention_weights(Q, K, V, mask).round(4))

# masking the second key puts all the weight on the first
print("masked ", attention_weights(Q, K, V, np.array([[True, False]])))

# gradients flow back to the query
out = attention(Q, K, V, mask)
T.backward(T.sum_(out * np.array([1.0, -1.0])))
print("dL/dQ  ", Q.grad.round(4))
