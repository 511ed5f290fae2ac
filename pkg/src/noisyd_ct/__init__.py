"""Noise-robust Conformer-Transducer speech recognition at desk scale.

Subpackages: autodiff substrate, audio simulation, acoustic features,
Conformer encoder, transducer decoder, training losses, disentanglement
module, tri-stage trainer, WER evaluation, and a CLI.
"""

__version__ = "0.1.0"
