"""rflab: a desk-scale rectified flow matching laboratory.

Conditional vector-field regression with straight paths, Euler and
Dormand-Prince sampling, logit-normal objective re-weighting,
classifier-free guidance, guided-field reflow and one-step distillation,
all on a small numpy autodiff engine and synthetic tasks with known ground
truth.
"""

__version__ = "0.1.0"
