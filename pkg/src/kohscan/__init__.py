"""kohscan: fungus vs. keratin patch classification for KOH microscopy slides."""

__version__ = "0.1.0"
