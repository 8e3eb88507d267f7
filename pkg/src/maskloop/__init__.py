"""maskloop: interactive instance-mask annotation at desk scale."""

__version__ = "0.1.0"
