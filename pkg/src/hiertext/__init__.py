"""
Hierarchical text classification with per-level ordered-neurons LSTM
classifiers, parent-label joint embedding and level-to-level parameter
transfer.
"""
