"""Monte-Carlo path planning: MCTS with epsilon-ball action sampling for robot paths."""

__version__ = "0.1.0"
