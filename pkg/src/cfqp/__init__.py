"""Counterfactual query prediction under a categorical background variable.

Subpackages group by pipeline stage: synthetic generators (`datagen`,
`odesim`, `dataio`), the regression stack (`nn`, `clustering`, `model`),
comparison methods (`baselines`), evaluation (`metrics`), constructive
identifiability checks (`oracle`), and the experiment harness (`cli`).
"""

__version__ = "0.1.0"
