"""Small constructors shared by the tests."""
from lt3d.geometry import Box3D
from lt3d.matching import Detection3D, GroundTruth3D

# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS: dict = {}


def box(x=0.0, y=0.0, z=0.0, l=1.0, w=1.0, h=1.0, yaw=0.0):
    return Box3D((x, y, z), (l, w, h), yaw)


def det(id, cls, x, y, score, frame="f0", **aux):
    return Detection3D(id, frame, cls, box(x, y), score, aux)


def gt(id, cls, x, y, frame="f0"):
    return GroundTruth3D(id, frame, cls, box(x, y))
