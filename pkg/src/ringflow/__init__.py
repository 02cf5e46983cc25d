"""Ring-road macro/micro traffic learning: IDM data, scene completion, shared PPO policy."""

__version__ = "0.1.0"
