"""Geometry toolkit for human-object interaction meshes.

Splits a combined scan into human and object parts from multi-view masks,
registers an articulated body, labels contacts, reanimates scenes and curates
datasets.  Units are meters, +y is up.
"""
__version__ = "0.1.0"
