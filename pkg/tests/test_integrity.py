import pytest

from usbwarden.cs import CsStore, CsUnreachableError, UnreachableCs
from usbwarden.image import PT_SECURE, RsdImage, authorize_rsd
from usbwarden.integrity import (
    BlockedError,
    InhibitedError,
    IntegritySession,
    OutOfRangeError,
    TamperDetectedError,
    init_session,
)
from usbwarden.merkle import MerkleTree


def reopen(image, device, ca, **kw):
    return init_session(image, device, ca.public_key, **kw)


def secure_physical(image, lba, shift=1):
    return image.read_table().find(PT_SECURE).start_block + shift + lba


class TestInitChain:
    def test_fresh_image_has_empty_state_root(self, make_image, device, ca):
        image = make_image(secure_blocks=8, block_size=512)
        session = init_session(image, device, ca.public_key)
        assert session.trusted_root == MerkleTree.build([bytes(512)] * 8).root
        assert not session.dirty

    def test_signature_slot_byte_flip_blocks(self, make_image, device, ca):
        image = make_image()
        layout = authorize_rsd(image)
        base = layout._ads_offset(layout.geometry.signature_offset)
        raw = image.read_at(base, 96)
        image.write_at(base, bytes([raw[40] ^ 0x01]).join([raw[:40], raw[41:]]))
        with pytest.raises(BlockedError) as exc:
            init_session(image, device, ca.public_key)
        assert exc.value.reason == BlockedError.BAD_SIGNATURE

    def test_certificate_slot_byte_flip_blocks(self, make_image, device, ca):
        image = make_image()
        layout = authorize_rsd(image)
        base = layout._ads_offset(layout.geometry.cert_offset)
        raw = image.read_at(base, 16)
        image.write_at(base + 10, bytes([raw[10] ^ 0xFF]))
        with pytest.raises(BlockedError) as exc:
            init_session(image, device, ca.public_key)
        assert exc.value.reason == BlockedError.BAD_CERTIFICATE

    def test_node_tamper_blocks(self, make_image, device, ca):
        image = make_image()
        layout = authorize_rsd(image)
        node_base = layout._ads_offset(64)
        raw = image.read_at(node_base, 32)
        image.write_at(node_base, bytes([raw[0] ^ 0x01]) + raw[1:])
        with pytest.raises(BlockedError) as exc:
            init_session(image, device, ca.public_key)
        assert exc.value.reason == BlockedError.ADS_INCONSISTENT

    def test_revoked_writer_blocks(self, make_image, device, ca):
        image = make_image()
        # the empty state is signed by the formatter; revoke its serial
        serial = authorize_rsd(image).read_certificate().serial
        rl = ca.sign_revocations({serial}, version=1)
        with pytest.raises(BlockedError) as exc:
            init_session(image, device, ca.public_key, revocation_list=rl)
        assert exc.value.reason == BlockedError.BAD_CERTIFICATE

    def test_cs_with_newer_root_blocks(self, make_image, device, ca):
        cs = CsStore()
        image = make_image(rsd_id="CS-ROLL")
        session = init_session(image, device, ca.public_key, cs_client=cs)
        session.protected_write(0, b"v2" + bytes(510))
        session.close()
        # registry remembers the new root; hand it an older (fresh) image
        stale = make_image(rsd_id="CS-ROLL")
        with pytest.raises(BlockedError) as exc:
            init_session(stale, device, ca.public_key, cs_client=cs)
        assert exc.value.reason == BlockedError.ROLLBACK_DETECTED

    def test_cs_unreachable_blocks(self, make_image, device, ca):
        with pytest.raises(BlockedError) as exc:
            init_session(make_image(), device, ca.public_key, cs_client=UnreachableCs())
        assert exc.value.reason == BlockedError.CS_UNREACHABLE

    def test_unknown_id_at_cs_is_enrolled_on_flush(self, make_image, device, ca):
        cs = CsStore()
        image = make_image(rsd_id="NEWCOMER")
        session = init_session(image, device, ca.public_key, cs_client=cs)
        session.protected_write(1, b"x" * 512)
        session.flush()
        record = cs.get_root("NEWCOMER")
        assert record.version == 1
        assert record.root == session.trusted_root


class TestProtectedRead:
    def test_zero_after_format(self, make_image, device, ca):
        session = init_session(make_image(), device, ca.public_key)
        assert session.protected_read(0) == bytes(512)

    def test_illegal_write_detected_for_every_block(self, make_image, device, ca):
        image = make_image(secure_blocks=8, block_size=512)
        session = init_session(image, device, ca.public_key)
        for lba in range(8):
            image.raw_write(secure_physical(image, lba), bytes([0xBD]) * 512)
            with pytest.raises(TamperDetectedError):
                session.protected_read(lba)

    def test_out_of_range_and_inhibited(self, make_image, device, ca):
        image = make_image(secure_blocks=8)
        session = init_session(image, device, ca.public_key)
        with pytest.raises(InhibitedError):
            session.protected_read(8)  # inside the device, outside secure content
        with pytest.raises(OutOfRangeError):
            session.protected_read(image.total_blocks)
        with pytest.raises(OutOfRangeError):
            session.protected_read(-1)

    def test_padding_leaves_not_addressable(self, make_image, device, ca):
        # 5 visible blocks ride on an 8-leaf tree; leaves 5..7 are off-limits
        session = init_session(make_image(secure_blocks=5), device, ca.public_key)
        assert session.protected_read(4) == bytes(512)
        with pytest.raises(InhibitedError):
            session.protected_read(5)


class TestProtectedWrite:
    def test_write_read_round_trip(self, make_image, device, ca):
        session = init_session(make_image(), device, ca.public_key)
        payload = bytes(range(256)) * 2
        session.protected_write(3, payload)
        assert session.protected_read(3) == payload

    def test_reopen_after_flush_sees_new_root(self, make_image, device, ca):
        image = make_image()
        session = init_session(image, device, ca.public_key)
        session.protected_write(2, b"durable" + bytes(505))
        session.flush()
        root = session.trusted_root
        again = reopen(RsdImage.from_bytes(image.snapshot()), device, ca)
        assert again.trusted_root == root
        assert again.protected_read(2) == b"durable" + bytes(505)

    def test_write_over_illegally_written_block_fails_precheck(self, make_image, device, ca):
        image = make_image()
        session = init_session(image, device, ca.public_key)
        image.raw_write(secure_physical(image, 4), bytes([7]) * 512)
        with pytest.raises(TamperDetectedError):
            session.protected_write(4, b"new" + bytes(509))
        # and the dirty content was not laundered into the tree
        with pytest.raises(TamperDetectedError):
            session.protected_read(4)

    def test_wrong_block_size_rejected(self, make_image, device, ca):
        session = init_session(make_image(), device, ca.public_key)
        with pytest.raises(ValueError):
            session.protected_write(0, b"short")

    def test_shift_translation(self, make_image, device, ca):
        image = make_image(shift=2)
        session = init_session(image, device, ca.public_key)
        session.protected_write(0, b"@" * 512)
        secure_start = image.read_table().find(PT_SECURE).start_block
        assert image.raw_read(secure_start + 2) == b"@" * 512
        # the shift prefix blocks stay zeroed and are never host-addressable
        assert image.raw_read(secure_start) == bytes(512)
        assert image.raw_read(secure_start + 1) == bytes(512)


class TestComplexity:
    @pytest.mark.parametrize("blocks", [2, 8, 1024])
    def test_node_access_bounds(self, make_image, device, ca, blocks):
        depth = blocks.bit_length() - 1
        session = init_session(make_image(secure_blocks=blocks, block_size=32), device, ca.public_key)
        session.protected_read(blocks - 1)
        assert session.last_node_reads <= depth + 1
        assert session.last_node_writes == 0
        session.protected_write(0, b"y" * 32)
        assert session.last_node_reads <= depth + 1
        assert session.last_node_writes == depth + 1

    @pytest.mark.parametrize("blocks", [2, 8, 1024])
    def test_proof_size_exact(self, make_image, device, ca, blocks):
        session = init_session(make_image(secure_blocks=blocks, block_size=32), device, ca.public_key)
        proof = session.tree.prove(0)
        assert len(proof.siblings) == blocks.bit_length() - 1


class TestFlush:
    def test_clean_flush_is_a_no_op(self, make_image, device, ca):
        image = make_image()
        before = image.snapshot()
        session = init_session(image, device, ca.public_key)
        session.flush()
        assert image.snapshot() == before

    def test_crash_without_flush_detected_on_next_read(self, make_image, device, ca):
        image = make_image()
        session = init_session(image, device, ca.public_key)
        session.protected_write(1, b"torn" + bytes(508))
        session.abandon()  # unplug before any flush
        again = reopen(image, device, ca)
        with pytest.raises(TamperDetectedError):
            again.protected_read(1)

    def test_crash_after_nodes_blocks_reopen(self, make_image, device, ca):
        image = make_image()
        session = init_session(image, device, ca.public_key)
        session.protected_write(1, b"torn" + bytes(508))
        session.flush(stop_after="nodes")
        with pytest.raises(BlockedError) as exc:
            reopen(image, device, ca)
        assert exc.value.reason == BlockedError.ADS_INCONSISTENT

    def test_crash_after_signature_blocks_reopen_for_new_writer(
        self, make_image, device, second_device, ca
    ):
        image = make_image()
        first = init_session(image, device, ca.public_key)
        first.protected_write(0, b"A" * 512)
        first.close()
        second = init_session(image, second_device, ca.public_key)
        second.protected_write(1, b"B" * 512)
        second.flush(stop_after="signature")  # cert slot still names the first writer
        with pytest.raises(BlockedError) as exc:
            reopen(image, device, ca)
        assert exc.value.reason == BlockedError.BAD_SIGNATURE

    def test_last_writer_certificate_replaced_once(self, make_image, device, second_device, ca):
        image = make_image()
        first = init_session(image, device, ca.public_key)
        first.protected_write(0, b"1" * 512)
        first.close()
        assert authorize_rsd(image).read_certificate() == device.certificate
        second = init_session(image, second_device, ca.public_key)
        second.protected_write(0, b"2" * 512)
        second.flush()
        assert authorize_rsd(image).read_certificate() == second_device.certificate

    def test_cs_outage_leaves_session_dirty(self, make_image, device, ca):
        cs = CsStore()
        image = make_image(rsd_id="FLAKY")
        session = init_session(image, device, ca.public_key, cs_client=cs)
        session.protected_write(0, b"z" * 512)
        session.cs_client = UnreachableCs()
        with pytest.raises(CsUnreachableError):
            session.flush()
        assert session.dirty
        session.cs_client = cs
        session.flush()
        assert not session.dirty
        assert cs.get_root("FLAKY").root == session.trusted_root


class TestRollback:
    def test_full_rollback_accepted_without_cs(self, make_image, device, ca):
        image = make_image()
        session = init_session(image, device, ca.public_key)
        session.protected_write(2, b"old" + bytes(509))
        session.close()
        snapshot = image.snapshot()
        session = init_session(image, device, ca.public_key)
        session.protected_write(2, b"new" + bytes(509))
        session.close()
        image.restore(snapshot)
        accepted = reopen(image, device, ca)  # the documented gap
        assert accepted.protected_read(2) == b"old" + bytes(509)

    def test_full_rollback_blocked_with_cs(self, make_image, device, ca):
        cs = CsStore()
        image = make_image(rsd_id="GUARDED")
        session = init_session(image, device, ca.public_key, cs_client=cs)
        session.protected_write(2, b"old" + bytes(509))
        session.close()
        snapshot = image.snapshot()
        session = init_session(image, device, ca.public_key, cs_client=cs)
        session.protected_write(2, b"new" + bytes(509))
        session.close()
        image.restore(snapshot)
        with pytest.raises(BlockedError) as exc:
            init_session(image, device, ca.public_key, cs_client=cs)
        assert exc.value.reason == BlockedError.ROLLBACK_DETECTED

    def test_ads_only_rollback_caught_on_read(self, make_image, device, ca):
        from usbwarden.image import PT_ADS

        image = make_image()
        snapshot = image.snapshot()
        session = init_session(image, device, ca.public_key)
        session.protected_write(3, b"moved" + bytes(507))
        session.close()
        ads = image.read_table().find(PT_ADS)
        start = ads.start_block * image.block_size
        size = ads.block_count * image.block_size
        image.write_at(start, snapshot[start : start + size])
        session = reopen(image, device, ca)  # old tree is still signed and consistent
        with pytest.raises(TamperDetectedError):
            session.protected_read(3)
