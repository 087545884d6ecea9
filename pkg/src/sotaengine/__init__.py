"""Control plane that turns a paper's reference repository into an optimized one."""

__version__ = "0.1.0"
