"""
HBT Correlations - source-size estimation from higher-order intensity correlations.

This package simulates thermal-light speckle on a pixel array, evaluates the analytic
correlation functions of order 2n for disc and slit sources, and measures how well the
source dimension can be recovered from them against the Cramer-Rao bound.
"""

__version__ = "0.1.0"
__author__ = "Suhail Khan"
__description__ = "Higher-order intensity interferometry toolkit for estimating thermal source dimensions"
