"""Toy-scale workbench for converting softmax transformers into linear-attention RNNs."""
