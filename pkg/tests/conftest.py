import pytest

from usbwarden.image import write_blank_image
from usbwarden.pki import CertificateAuthority, DeviceIdentity


def pytest_addoption(parser):
    parser.addoption(
        "--slow",
        action="store_true",
        default=False,
        help="run the 10^7-trial Monte Carlo checks (a few minutes)",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--slow"):
        return
    skip = pytest.mark.skip(reason="pass --slow to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def ca():
    return CertificateAuthority()


@pytest.fixture(scope="session")
def formatter(ca):
    return DeviceIdentity.create("FORMATTER", ca)


@pytest.fixture(scope="session")
def device(ca):
    return DeviceIdentity.create("GUARD-1", ca)


@pytest.fixture(scope="session")
def second_device(ca):
    return DeviceIdentity.create("GUARD-2", ca)


@pytest.fixture
def make_image(formatter):
    """In-memory image factory; B=32 is allowed here so exhaustive sweeps stay fast."""

    def _make(secure_blocks=8, block_size=512, rsd_id="TEST", shift=1, **kw):
        return write_blank_image(
            None,
            secure_blocks=secure_blocks,
            block_size=block_size,
            rsd_id=rsd_id,
            formatter=formatter,
            shift=shift,
            **kw,
        )

    return _make
