"""Late fusion of deep and hand-crafted slice features for tendon healing scores."""

__version__ = "0.1.0"
