"""HinFlow: flow-conditioned online imitation in a planar manipulation sim."""

__version__ = "0.1.0"
