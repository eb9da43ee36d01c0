"""Complete-foliation construction kit: shell labyrinths with certified length
enlargement, polynomial witnesses that blow up on them, and automorphism
twisting that makes a proper foliation complete in a chosen metric.
"""

__version__ = "0.1.0"
