"""Expression-clustered feature learning lab: EC-STFL loss, annotation agreement and UAR/WAR evaluation."""

__version__ = "0.1.0"
