"""Hypergraph spatiotemporal forecasting of EV charging demand, on a small numpy autodiff engine."""

__version__ = "0.1.0"
