"""Desk-scale language model toolkit.

Corpus cleaning, byte-level BPE, a grouped-query-attention transformer on a
small autodiff core, stabilized pretraining, SFT/DPO alignment losses, and
KV-cached CPU inference, all sized to run and be tested on one machine.
"""

__version__ = "0.1.0"
