"""facedeform - predict facial soft-tissue change from planned bone movement."""

__version__ = "0.1.0"
