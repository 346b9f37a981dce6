"""Off-policy trust-region policy optimization via multi-step softmax path
consistencies, with a tabular oracle and desk-scale environments."""

__version__ = "0.1.0"
