"""Request-level mixture of heterogeneous frozen experts with routed late fusion."""

__version__ = "0.1.0"
