"""Particle simulation of slow-fast McKean-Vlasov systems: averaging,
Poisson correctors and fluctuation limits."""

__version__ = "0.1.0"
