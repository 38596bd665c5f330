"""Solitaire Concentration: environment, baseline agents and PPO training."""
