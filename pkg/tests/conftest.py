import io
import os
import sys

import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from app import create_app  # noqa: E402
from engine.ingest import filter_users, load_venues, parse_checkins  # noqa: E402

TOY_CHECKINS = """user_id,timestamp,poi_id
u1,2016-09-05T08:15,b1
u1,2016-09-05T09:30,b1
u1,2016-09-05T12:30,b2
u1,2016-09-05T18:00,b3
u2,2016-09-05T08:40,b1
u2,2016-09-05T13:00,b2
u2,2016-09-05T13:20,b2
u2,2016-09-05T19:00,b3
"""

TOY_VENUES = """poi_id,category,functionalities
b1,Academic,Classrooms
b2,Auxiliary,Dining
b3,Residential,Residence
"""


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow benchmark tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long training runs, skipped without --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def toy_data():
    """Two users, three POIs, eight records on one Monday."""
    venues = load_venues(io.StringIO(TOY_VENUES))
    return filter_users(parse_checkins(io.StringIO(TOY_CHECKINS)), 1, venues)


@pytest.fixture
def toy_files(tmp_path):
    checkins = tmp_path / "checkins.csv"
    venues = tmp_path / "venues.csv"
    checkins.write_text(TOY_CHECKINS, encoding="utf-8")
    venues.write_text(TOY_VENUES, encoding="utf-8")
    return str(checkins), str(venues)


@pytest.fixture
def app():
    return create_app({"TESTING": True, "LOG": "WARNING", "MIN_CHECKINS": 1})


@pytest.fixture
def runner(app):
    return app.test_cli_runner()
