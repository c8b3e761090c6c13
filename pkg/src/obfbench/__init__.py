"""Single-token obfuscation attacks against toy neural translators.

Subpackages and modules:

* ``textkit``: vocabularies, token sequences, synthetic parallel corpora
* ``gradkit``: a small reverse-mode autodiff tape over numpy
* ``seqmodels``: transformer translator and causal LM, training and decoding
* ``obfuscator``: the gradient projection attack and its baselines
* ``metrics``: edit distance, sentence BLEU, perplexity, ASR aggregation
* ``bench`` / ``cli``: experiment harness and the ``obfbench`` command
"""
from ._kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
