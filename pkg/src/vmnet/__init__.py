"""Voxel-mesh segmentation network with hand-written gradients.

Modules: ``mesh`` (surface meshes, adjacency, I/O), ``hierarchy`` (vertex
clustering, QEM, trace maps), ``voxel`` (sparse grids, convolutions,
projection), ``nn`` (ops, graph attention, checkpoints), ``network`` (model
assembly), ``training`` (scenes, SGD, metrics), ``benchmark``, ``checks`` and
``cli``.  Submodules are imported explicitly so the CLI can configure thread
counts before numpy loads.
"""

__version__ = "0.1.0"
