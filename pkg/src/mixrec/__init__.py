"""Toy-scale mixture-of-transformers for joint 3D generation and feed-forward reconstruction.

Submodules: :mod:`geometry`, :mod:`registration`, :mod:`camera`,
:mod:`overlap_bias`, :mod:`block_matching`, :mod:`model`, :mod:`flow`,
:mod:`synth_data`, :mod:`io` and :mod:`cli`.
"""

__version__ = "0.1.0"
