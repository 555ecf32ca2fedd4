"""Conditional diffusion transformers at desk scale: OU schedule, oracle
targets, diffused local polynomials, a numpy DiT with hand-written reverse
mode, an explicit universal-approximation construction and the evaluation
plumbing around them."""

__all__ = ["schedule", "targets", "localpoly", "transformer", "uat", "training", "evaluation", "harness",
           "seeds"]
