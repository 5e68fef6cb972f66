"""Desk-scale action-conditioned diffusion world model for 2D navigation:
synthetic unicycle world, two-stage training (teacher-forced pretraining
plus consistency post-training with few-step sampling), and CEM planning.
"""

__version__ = "0.1.0"
