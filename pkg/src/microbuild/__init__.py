"""MicroBuild: a desk-scale build-order mini-game with narration-guided,
subtask-shaped, and unshaped actor-critic agents, plus the mutual
state/command embedding that grounds natural-language commands in game
states."""

__version__ = "0.1.0"
