import pytest
from hypothesis import given, settings, strategies as st

from usbwarden.image import (
    ADS_HEADER_SIZE,
    AdsGeometry,
    NotAuthorized,
    PT_ADS,
    PT_PLAIN,
    PT_SECURE,
    PartitionEntry,
    PartitionTable,
    RsdImage,
    authorize_rsd,
    format_image,
    write_blank_image,
)
from usbwarden.integrity import BlockedError, init_session


class TestFormat:
    def test_nodes_region_size_n8(self, make_image):
        image = make_image(secure_blocks=8, block_size=512)
        layout = authorize_rsd(image)
        assert layout.geometry.nodes_size == (2 * 8 - 1) * 32 == 480

    def test_overhead_ratio_large_n(self):
        # nodes bytes over protected bytes approaches 2m/B = 1.5625% at B=4096
        geo = AdsGeometry(n=2**16, block_size=4096, shift=1, visible=2**16)
        ratio = geo.nodes_size / (geo.n * geo.block_size)
        assert abs(ratio - 2 * 32 / 4096) < 1e-6
        assert round(ratio * 100, 1) == 1.6

    def test_fresh_image_serves_zero_blocks(self, make_image, device, ca):
        image = make_image(secure_blocks=8, block_size=512)
        session = init_session(image, device, ca.public_key)
        for lba in range(8):
            assert session.protected_read(lba) == bytes(512)

    def test_block_size_policy(self, formatter):
        with pytest.raises(ValueError):
            format_image(None, secure_blocks=4, block_size=256, rsd_id="X", formatter=formatter)
        # the unchecked writer takes reduced test sizes
        assert write_blank_image(
            None, secure_blocks=4, block_size=32, rsd_id="X", formatter=formatter
        ).block_size == 32

    def test_capacity_checked(self, formatter):
        with pytest.raises(ValueError, match="capacity"):
            format_image(
                None, secure_blocks=64, block_size=512, rsd_id="X",
                formatter=formatter, device_blocks=10,
            )

    def test_extra_space_becomes_plain_partition(self, formatter):
        image = format_image(
            None, secure_blocks=8, block_size=512, rsd_id="X",
            formatter=formatter, device_blocks=40,
        )
        table = image.read_table()
        assert table.find(PT_PLAIN) is not None
        assert image.total_blocks == 40

    def test_deterministic_for_fixed_inputs(self, formatter):
        a = make = lambda: write_blank_image(
            None, secure_blocks=5, block_size=512, rsd_id="DET", formatter=formatter, shift=2
        )
        assert make().snapshot() == make().snapshot()

    def test_non_power_of_two_rounds_up(self, make_image):
        image = make_image(secure_blocks=5, block_size=512)
        layout = authorize_rsd(image)
        assert layout.geometry.n == 8
        assert layout.geometry.visible == 5


class TestAuthorize:
    def test_formatted_image_authorizes(self, make_image):
        layout = authorize_rsd(make_image())
        assert layout.n == 8

    def test_missing_ads_partition(self, make_image):
        image = make_image()
        table = image.read_table()
        keep = tuple(e for e in table.entries if e.kind != PT_ADS)
        image.write_table(PartitionTable(keep))
        with pytest.raises(NotAuthorized) as exc:
            authorize_rsd(image)
        assert exc.value.reason == NotAuthorized.MISSING_PARTITION

    def test_missing_secure_partition(self, make_image):
        image = make_image()
        keep = tuple(e for e in image.read_table().entries if e.kind != PT_SECURE)
        image.write_table(PartitionTable(keep))
        with pytest.raises(NotAuthorized) as exc:
            authorize_rsd(image)
        assert exc.value.reason == NotAuthorized.MISSING_PARTITION

    def test_overlapping_entries(self, make_image):
        image = make_image()
        entries = list(image.read_table().entries)
        bad = PartitionEntry(entries[0].kind, entries[0].start_block, entries[0].block_count + 1)
        image.write_table(PartitionTable((bad, *entries[1:])))
        with pytest.raises(NotAuthorized) as exc:
            authorize_rsd(image)
        assert exc.value.reason == NotAuthorized.MALFORMED_TABLE

    def test_out_of_bounds_entry(self, make_image):
        image = make_image()
        entries = list(image.read_table().entries)
        entries[0] = PartitionEntry(entries[0].kind, image.total_blocks, 4)
        image.write_table(PartitionTable(tuple(entries)))
        with pytest.raises(NotAuthorized) as exc:
            authorize_rsd(image)
        assert exc.value.reason == NotAuthorized.MALFORMED_TABLE

    def test_size_mismatch(self, make_image):
        image = make_image()
        table = image.read_table()
        secure = table.find(PT_SECURE)
        ads = table.find(PT_ADS)
        # shrink the secure partition by one block; no overlap, sizes disagree
        smaller = PartitionEntry(PT_SECURE, secure.start_block, secure.block_count - 1)
        image.write_table(PartitionTable((smaller, ads)))
        with pytest.raises(NotAuthorized) as exc:
            authorize_rsd(image)
        assert exc.value.reason == NotAuthorized.SIZE_MISMATCH


class TestRawAccess:
    def test_shift_block_reads_zero(self, make_image):
        image = make_image()
        secure = image.read_table().find(PT_SECURE)
        assert image.raw_read(secure.start_block) == bytes(512)

    def test_raw_round_trip(self, make_image):
        image = make_image()
        payload = bytes(range(256)) * 2
        image.raw_write(3, payload)
        assert image.raw_read(3) == payload

    def test_out_of_range(self, make_image):
        image = make_image()
        with pytest.raises(IndexError):
            image.raw_read(image.total_blocks)
        with pytest.raises(ValueError):
            image.raw_write(0, b"short")


class TestHeaderTamper:
    def test_every_ads_header_byte_is_load_bearing(self, make_image, device, ca):
        """Any single-byte change of the 64-byte geometry header must fail
        authorization or session init; silent acceptance is never allowed."""
        image = make_image(secure_blocks=8, block_size=512)
        # give the image real content so data-dependent checks bite too
        session = init_session(image, device, ca.public_key)
        for lba in range(8):
            session.protected_write(lba, bytes([lba + 1]) * 512)
        session.close()
        ads = image.read_table().find(PT_ADS)
        base = ads.start_block * image.block_size
        pristine = image.read_at(base, ADS_HEADER_SIZE)
        for offset in range(ADS_HEADER_SIZE):
            for mutated in ((pristine[offset] + 1) & 0xFF, pristine[offset] ^ 0xFF):
                dirty = bytearray(pristine)
                dirty[offset] = mutated
                image.write_at(base, bytes(dirty))
                with pytest.raises((NotAuthorized, BlockedError)):
                    init_session(image, device, ca.public_key)
                image.write_at(base, pristine)
        # untouched image still opens
        init_session(image, device, ca.public_key)


class TestSerialization:
    @given(
        n_exp=st.integers(min_value=0, max_value=20),
        block_size=st.sampled_from([32, 512, 4096]),
        shift=st.integers(min_value=1, max_value=4),
        data=st.data(),
    )
    @settings(max_examples=60, deadline=None)
    def test_geometry_round_trip(self, n_exp, block_size, shift, data):
        n = 2**n_exp
        visible = data.draw(st.integers(min_value=n // 2 + 1, max_value=n))
        geo = AdsGeometry(n=n, block_size=block_size, shift=shift, visible=visible)
        assert AdsGeometry.unpack(geo.pack()) == geo

    @given(data=st.data())
    @settings(max_examples=60, deadline=None)
    def test_table_round_trip(self, data):
        kinds = data.draw(st.permutations([PT_SECURE, PT_ADS, PT_PLAIN]))
        count = data.draw(st.integers(min_value=0, max_value=3))
        start = 1
        entries = []
        for kind in kinds[:count]:
            size = data.draw(st.integers(min_value=1, max_value=1000))
            gap = data.draw(st.integers(min_value=0, max_value=10))
            entries.append(PartitionEntry(kind, start + gap, size))
            start += gap + size
        table = PartitionTable(tuple(entries))
        parsed = PartitionTable.unpack(table.pack())
        assert parsed == table
        parsed.validate(total_blocks=start + 1)

    def test_image_header_round_trip(self, make_image):
        image = make_image(rsd_id="ROUND-TRIP-01")
        clone = RsdImage.from_bytes(image.snapshot())
        assert (clone.block_size, clone.total_blocks, clone.rsd_id) == (
            image.block_size,
            image.total_blocks,
            image.rsd_id,
        )

    def test_open_rejects_garbage(self, tmp_path):
        path = tmp_path / "junk.rsd"
        path.write_bytes(b"\x00" * 4096)
        with pytest.raises(ValueError):
            RsdImage.open(path)
