"""Reserve allocation among distribution-feeder DERs with a from-scratch DDPG agent."""

__version__ = "0.1.0"
