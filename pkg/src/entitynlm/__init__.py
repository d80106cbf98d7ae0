"""EntityNLM: a language model that generates text together with entity mentions
and keeps a continuous, dynamically updated vector for every entity."""

__version__ = "0.1.0"
