"""Simulation-based Bayesian inversion with an informed VAE, a conditional
RealNVP likelihood surrogate and differential-evolution MCMC."""

__version__ = "0.1.0"
