"""Token-skipping transformer inference engine with probe-guided selection."""

__version__ = "0.1.0"
