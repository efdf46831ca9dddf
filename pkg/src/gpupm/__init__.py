"""GPU memory-persistency toolkit.

A miniature SIMT kernel language, persistency and durable-transaction
compiler passes, an NVM-aware memory-hierarchy simulator and a crash-recovery
harness.
"""

__version__ = "0.1.0"
