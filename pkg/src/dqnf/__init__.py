"""DQN with a frontier margin loss for environments that reject actions."""
__version__ = "0.1.0"
