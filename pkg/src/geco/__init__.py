"""Time-unconditional flow matching as iterative optimization.

Trains a stationary velocity field over action chunks, samples by gradient
descent on that field with early exit, and scores out-of-distribution
conditions by the residual field norm. A time-conditioned rectified-flow
head is included as a fixed-schedule baseline.
"""

__version__ = "0.1.0"
