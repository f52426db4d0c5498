"""Joint sequence reading and frame generation trained with dual transformation.

A CTC-based trace reader and two text-to-trace generators share limited paired
data and improve each other through pseudo pairs built from unpaired text and
unpaired traces.
"""

__version__ = "0.1.0"
