"""Deep FBSDE solver built on neural Hamiltonian operators."""

__version__ = "0.1.0"
