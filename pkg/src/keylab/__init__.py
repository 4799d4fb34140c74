"""keylab: a desk-scale lab for tag-structured chain-of-thought fine-tuning.

Trains a tiny from-scratch autoregressive transformer on synthetic
reasoning corpora under four supervision strategies (full-response vs
answer-span-only loss, single- and two-stage) and evaluates accuracy,
format adherence, and their composite score.
"""

__version__ = "0.1.0"
