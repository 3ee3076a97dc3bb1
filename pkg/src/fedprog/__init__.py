"""Federated battery prognosis simulator.

Two-stage federated training (autoencoder compression, then remaining-
useful-life regression) over simulated battery clients, plus the
replacement-policy economics used to score it against periodic-maintenance
and centralized baselines.
"""

__version__ = "0.1.0"
