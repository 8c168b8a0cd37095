"""Task-sequencing simulator: concept models, an engine pipeline, and a trainer.

Learned and programmed task blocks share one interface, so a policy trained inside
a short sequence can be dropped unchanged into a longer one.
"""

__version__ = "0.1.0"
