"""Social machine learning over networked agents: trained classifiers feeding social-learning recursions."""

__version__ = "0.1.0"
