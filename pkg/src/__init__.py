"""
IDM-Follower - Core Package

Physics-informed car-following prediction: an attention sequence-to-sequence
network trained on a hybrid loss that mixes observed follower trajectories
with Intelligent Driver Model predictions.
"""

__version__ = "1.0.0"
