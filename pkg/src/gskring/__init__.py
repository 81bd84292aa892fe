"""Group secret-key generation over Gaussian-integer rings.

Submodules
----------
constellation
    Source/transmit constellations, the quantization map and ``Z_M[i]`` arithmetic.
protocols
    Three-node coherence-block simulator and the GSK / AQGSK / A-SQGSK exchanges.
leakage
    Plug-in entropy and mutual-information estimates of eavesdropper leakage.
quantizer
    Guard-band multi-level quantizers and the EM-EM design algorithm.
consensus
    Excursion-based index-set exchange and key metrics.
experiments
    Parameter sweeps wiring the above together; ``python -m gskring`` is the CLI.
"""

from . import consensus, constellation, experiments, leakage, protocols, quantizer

__version__ = "0.1.0"

__all__ = ["consensus", "constellation", "experiments", "leakage", "protocols", "quantizer", "__version__"]
