"""Jigsaw-puzzle self-supervision on knee MR clips and transfer to ACL tear detection."""

__version__ = "0.1.0"
