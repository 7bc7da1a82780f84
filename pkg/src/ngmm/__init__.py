"""Neural generalized mixed-effects models.

Fixed effects ``f_theta(x)`` and random-effect loadings ``g_psi(z)`` are
multilayer perceptrons; the random effect ``gamma ~ N(0, I_k)`` is
integrated out group by group, reducing to a one-dimensional integral
that is evaluated with a fixed-step ODE solver or a quadrature rule.
"""

__version__ = "0.1.0"
