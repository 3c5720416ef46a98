"""Graph-learning attack laboratory.

Feature poisoning of a partially known graph that amplifies link
leakage in trained GNNs, link-inference detectors over posterior
similarity features, and the evaluation metrics to measure the damage.
"""

__version__ = "0.1.0"
