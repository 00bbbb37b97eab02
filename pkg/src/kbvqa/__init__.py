"""Retriever-reader VQA with loss-gap supervision, small enough for one core.

The package splits into the autodiff substrate (tensor), the shared
multi-modal encoder (encoder), knowledge-base plumbing (knowledge), dense
retrieval (retriever), the answering head and its losses (reader, model),
a synthetic task generator (synth), and the training/evaluation harness
(train, experiments, plots, cli).
"""

__version__ = "0.1.0"
