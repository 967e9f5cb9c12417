"""Mean-field quantum filtering: Belavkin filters, particle and Picard solvers, chaos diagnostics."""

__version__ = "0.1.0"
