"""advforge: adversarial PE sample pipeline.

Mutates PE binaries with functionality-preserving edits, orchestrates
external generator workers, selects the best adversarial candidates,
and runs data-poisoning experiments against a retrainable GBDT.
"""

__version__ = "0.1.0"
