import numpy as np
import pytest

from src.config import Hyperparams, ModelConfig, ModelVariant
from src.geometry import BodyRegion, Plane, PlaneTriplet, RigidTransform
from src.phantom_data import canonical_planes, generate_dataset
from src.rotation_codecs import RepresentationKind, euler_to_matrix


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def small_rotation(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    return euler_to_matrix(*np.deg2rad(rng.uniform(-max_deg, max_deg, size=3)))


def posed_triplet(region: BodyRegion, rng: np.random.Generator) -> PlaneTriplet:
    pose = RigidTransform(random_rotation(rng), rng.uniform(-20, 20, size=3))
    planes = [p.transformed(pose.rotation, pose.translation) for p in canonical_planes(region)]
    return PlaneTriplet(*planes, region=region)


def perturb_plane(plane: Plane, rng: np.random.Generator, max_deg: float = 15.0, max_mm: float = 5.0) -> Plane:
    r = small_rotation(rng, max_deg)
    return Plane(plane.center + rng.uniform(-max_mm, max_mm, size=3), r @ plane.e_u, r @ plane.e_v)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_cfg():
    """Small float64 network for gradient checks."""
    return ModelConfig(
        variant=ModelVariant.MULTI_HEAD,
        representation=RepresentationKind.SIX_D_XY,
        input_dims=(5, 4, 4),
        conv_channels=(2, 3),
        fc_widths=(6, 5),
        dtype="float64",
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Five volumes per region at 16^3 (10 mm spacing), one per fold."""
    out = tmp_path_factory.mktemp("phantoms")
    manifest = generate_dataset(out, n_per_region=5, seed=7, pair_fraction=0.0, dims=16, spacing_mm=10.0, workers=2)
    return manifest


@pytest.fixture
def fast_model_cfg():
    return ModelConfig(input_dims=(16, 16, 16), conv_channels=(2, 4, 4), fc_widths=(12, 8))


@pytest.fixture
def fast_hparams():
    return Hyperparams(batch_size=4, epochs=2, workers=1)
