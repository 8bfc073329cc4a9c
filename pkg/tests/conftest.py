import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from spidp.kinematics import SerialChain


def random_chain(rng, n, spheres=True) -> SerialChain:
    """Random revolute chain with random axes, link offsets and one sphere per link."""
    joints = []
    for i in range(n):
        axis = rng.normal(size=3)
        joints.append({
            "axis": (axis / np.linalg.norm(axis)).tolist(),
            "xyz": rng.uniform(-0.3, 0.3, 3).tolist() if i else [0, 0, 0],
            "rpy": rng.uniform(-1, 1, 3).tolist(),
            "lower": -3.0,
            "upper": 3.0,
        })
    doc = {"joints": joints, "tool": {"xyz": rng.uniform(-0.2, 0.2, 3).tolist(), "rpy": [0.1, -0.2, 0.3]}}
    if spheres:
        doc["collision_spheres"] = [{"link": i, "offset": rng.uniform(-0.1, 0.1, 3).tolist(), "radius": 0.05}
                                    for i in range(n)]
    return SerialChain.from_dict(doc)


def planar_chain(lengths=(1.0, 1.0), limits=3.1) -> SerialChain:
    joints = []
    for i, _ in enumerate(lengths):
        joints.append({"axis": [0, 0, 1], "xyz": [lengths[i - 1] if i else 0.0, 0, 0],
                       "lower": -limits, "upper": limits})
    spheres = [{"link": i, "offset": [f * L, 0, 0], "radius": 0.05}
               for i, L in enumerate(lengths) for f in (0.25, 0.5, 0.75, 1.0)]
    return SerialChain.from_dict({"joints": joints, "collision_spheres": spheres,
                                  "tool": {"xyz": [lengths[-1], 0, 0]}})


def oracle_fk(doc_chain: SerialChain, q) -> list[np.ndarray]:
    """Independent homogeneous-transform FK: 4x4 world pose per link followed by the tool pose."""
    T = doc_chain.base.copy()
    poses = []
    for joint, qi in zip(doc_chain.joints, np.asarray(q, float)):
        rot = np.eye(4)
        rot[:3, :3] = Rotation.from_rotvec(joint.axis * qi).as_matrix()
        T = T @ joint.origin @ rot
        poses.append(T.copy())
    poses.append(T @ doc_chain.tool)
    return poses


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
