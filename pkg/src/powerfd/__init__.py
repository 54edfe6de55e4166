"""Stealthy false-data injection on AC state estimation, and a detector for it.

The package covers the full chain: grid modeling and AC power flow, weighted
least-squares state estimation with chi-square bad-data detection, stealthy
attack crafting that provably bypasses that detection, labeled time-series
dataset generation, a from-scratch neural-network kernel, the PowerFDNet
spatiotemporal detector, and an experiment harness with a CLI.
"""

__version__ = "0.1.0"
