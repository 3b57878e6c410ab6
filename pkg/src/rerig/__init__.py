"""rerig: adapt multi-camera driving scenes from one vehicle rig to another.

A decomposed neural scene representation (static environment + rigid actors
+ sky) is trained from posed images and sparse depth, quality-gated against
the original views, and used to synthesize the full image set of a shifted
camera rig. Ships with a procedural dual-rig benchmark generator and a
cross-sensor detection evaluation harness.
"""

__version__ = "0.1.0"
