"""Feasibility-controlled neural surrogates.

Train networks whose outputs must satisfy input-dependent nonlinear
constraints, using a differentiable iterative repair layer with adaptive
constraint relaxation, plus benchmark generators, a desk-scale optimality
oracle, and an evaluation/reporting harness.
"""

__version__ = "0.1.0"
