import numpy as np
import pytest

from streamsplat import synthgen
from streamsplat.types import GaussianField


def random_field(rng, n, depth=(2.0, 6.0), spread=1.0, subgroup=None):
    """Gaussians in front of an identity camera, roughly filling its view."""
    z = rng.uniform(*depth, n)
    xy = rng.uniform(-spread, spread, (n, 2)) * z[:, None] * 0.4
    mu = np.column_stack([xy, z])
    rot = rng.normal(size=(n, 4))
    scale = rng.uniform(0.03, 0.3, (n, 3))
    color = rng.uniform(0, 1, (n, 3))
    opacity = rng.uniform(0.05, 1.0, n)
    return GaussianField(mu, rot, scale, color, opacity, subgroup)


@pytest.fixture(scope="session")
def sphere_scene():
    params = synthgen.TrajectoryParams(frames=8, radius_shell=(2.5, 3.5), seed=0)
    traj = synthgen.sample_trajectory(params)
    obj = synthgen.make_object("sphere", seed=0, count=3000)
    frames = synthgen.render_sequence(obj, traj)
    return obj, frames, [p for p, _ in traj], traj[0][1]


@pytest.fixture(scope="session")
def box_scene():
    params = synthgen.TrajectoryParams(frames=8, radius_shell=(2.5, 3.5), seed=0)
    traj = synthgen.sample_trajectory(params)
    obj = synthgen.make_object("box", seed=0, count=3000)
    frames = synthgen.render_sequence(obj, traj)
    return obj, frames, [p for p, _ in traj], traj[0][1]
