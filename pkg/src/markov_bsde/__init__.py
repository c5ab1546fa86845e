"""Classical and anticipated BSDEs driven by a finite-state Markov chain."""

__version__ = "0.1.0"
