"""Object-aware gaze target detection."""

__version__ = "0.1.0"
