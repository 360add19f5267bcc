"""lightforge: a desk-scale relighting sandbox.

Procedural room scenes are rendered into one-light-at-a-time (OLAT) HDR
bases, recombined into arbitrary target lighting, encoded into per-pixel
condition videos, and distilled into a voxel radiance field for novel-view
synthesis. A small flow-matching toolkit (biased timestep sampler, noising,
a per-pixel relighting MLP with manual backprop) rounds out the training-side
machinery.
"""

__version__ = "0.1.0"
