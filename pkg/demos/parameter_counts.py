"""
Counting parameters
===================

Closed-form counts for the 300-dimensional, 5-class setting, checked
against the materialized parameter tensors.
"""

from ssan.bench import count_parameters, enumerate_parameters
from ssan.attention import AttentionSpec
from ssan.model import Arch, ModelSpec, init_params, ssan_spec

specs = {
    "ssan1+rpr": ssan_spec(1, 300, 5, "rpr", 10),
    "ssan1+pe": ssan_spec(1, 300, 5, "pe"),
    "ssan2+rpr": ssan_spec(2, 300, 5, "rpr", 10),
    "transformer+rpr": ModelSpec(Arch.TRANSFORMER, 300, 5,
                                 AttentionSpec(300, 6, "rpr", 10)),
    "ave": ModelSpec(Arch.AVE, 300, 5),
}

for name, spec in specs.items():
    closed = count_parameters(spec)
    print(f"{name:16s} {closed:>9,d}  enumerated {enumerate_parameters(init_params(spec, 0)):>9,d}")

# relative positions add two (2k+1) x d tables per layer
print(count_parameters(specs["ssan1+rpr"]) - count_parameters(specs["ssan1+pe"]), "=", 2 * 21 * 300)
