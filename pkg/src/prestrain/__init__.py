"""Numerical laboratory for prestrained thin sheets.

Modules: ``geometry`` (metrics and curvature), ``energy`` (densities and the
thin-film energy hierarchy), ``minimize`` (L-BFGS engine), ``scaling``
(thickness sweeps and closed-form exponents), ``convex`` (zigzags and
corrugations), ``monge_ampere`` (weak prestrain), ``growth`` (growth
feedback) and ``cli``/``config``/``io`` (runs and files).
"""

__version__ = "0.1.0"
