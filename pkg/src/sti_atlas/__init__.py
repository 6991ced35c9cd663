"""Research-landscape mapping pipeline: harvest, tag, embed, cluster, classify, report."""

__version__ = "0.1.0"
