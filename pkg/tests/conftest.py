import pytest

from posesearch.backend import DegradationModel, OracleObject, make_oracle_backend
from posesearch.geometry import fibonacci_hemisphere
from posesearch.imaging import make_schedule

# one shared object keeps the asymmetry-guard redraw cost out of every test
OBJ_SEED = 5
CATALOG_N = 21


@pytest.fixture(scope="session")
def schedule():
    return make_schedule()


@pytest.fixture(scope="session")
def blob_object():
    return OracleObject.from_seed(OBJ_SEED)


@pytest.fixture(scope="session")
def catalog():
    return fibonacci_hemisphere(CATALOG_N)


@pytest.fixture(scope="session")
def perfect_backend(blob_object, schedule, catalog):
    be = make_oracle_backend(blob_object, DegradationModel(), schedule, 64)
    be.register_viewpoints(catalog)
    return be


@pytest.fixture(scope="session")
def degraded_backend(blob_object, schedule, catalog):
    be = make_oracle_backend(
        blob_object, DegradationModel(gain=1.0, exponent=1.0), schedule, 64
    )
    be.register_viewpoints(catalog)
    return be
