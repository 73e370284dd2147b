"""Voxel feature fields trained jointly with a keyframe action policy, on numpy.

Modules: ``tensor`` (autodiff), ``scene`` (synthetic scenes and analytic
rendering), ``voxelizer``, ``encoder``, ``gnf`` (neural feature field and
volume rendering), ``policy``, ``demos`` and ``trainer``.
"""

__version__ = "0.1.0"
