"""Desk-scale lab for a unified reason-or-act manipulation policy.

A single small transformer both writes structured reasoning text and emits
continuous action chunks for a simulated 2-D tabletop kitchen.  At every
decide tick it picks one of two special tokens — begin-reasoning or
begin-acting — and the runtime follows whichever it chose.
"""

__version__ = "0.1.0"
