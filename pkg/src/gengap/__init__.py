"""gengap: trains grids of small stochastic classifiers, estimates output
inconsistency/instability/disagreement on unlabeled data, evaluates the
matching generalization bound, and scores how well each quantity predicts
the generalization gap."""

__version__ = "0.1.0"
