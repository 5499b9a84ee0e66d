import hashlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from secmon import crypto


class TestSealedSchemes:
    # RFC 8032 section 7.1, TEST 1 (empty message)
    RFC8032_SECRET = bytes.fromhex(
        "9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60")
    RFC8032_PUBLIC = bytes.fromhex(
        "d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a")
    RFC8032_SIGNATURE = bytes.fromhex(
        "e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e065224901555f"
        "b8821590a33bacc61e39701cf9b46bd25bf5f0595bbe24655141438e7a100b")

    def test_signature_known_answer(self):
        assert crypto.public_key_of(self.RFC8032_SECRET) == self.RFC8032_PUBLIC
        assert crypto.sign(self.RFC8032_SECRET, b"") == self.RFC8032_SIGNATURE
        assert crypto.verify(self.RFC8032_PUBLIC, b"", self.RFC8032_SIGNATURE)

    def test_round_trip_and_bit_flip(self):
        seed = crypto.sha3(b"signer")
        sig = crypto.sign(seed, b"message")
        pub = crypto.public_key_of(seed)
        assert crypto.verify(pub, b"message", sig)
        assert not crypto.verify(pub, b"messagf", sig)
        flipped = bytes([sig[0] ^ 1]) + sig[1:]
        assert not crypto.verify(pub, b"message", flipped)

    def test_verify_never_raises_on_garbage(self):
        assert not crypto.verify(b"short", b"m", b"sig")
        assert not crypto.verify(bytes(32), b"m", bytes(64))
        assert not crypto.verify(None, b"m", b"")  # type: ignore[arg-type]

    # RFC 7748 section 6.1 Diffie-Hellman vector
    RFC7748_A = bytes.fromhex(
        "77076d0a7318a57d3c16c17251b26645df4c2f87ebc0992ab177fba51db92c2a")
    RFC7748_A_PUB = bytes.fromhex(
        "8520f0098930a754748b7ddcb43ef75a0dbf3a0d26381af4eba4a98eaa9b4e6a")
    RFC7748_B = bytes.fromhex(
        "5dab087e624a8a4b79e17f8b83800ee66f3bb1292618b6fd1c2f8b27ff88e0eb")
    RFC7748_B_PUB = bytes.fromhex(
        "de9edb7d7b7dc1b4d35b61c2ece435373f8343c85b78674dadfc7e146f882b4f")
    RFC7748_SHARED = bytes.fromhex(
        "4a5d9d5ba4ce2de1728e3bf480350f25e07e21c947d19e3376f09b3c1e161742")

    def test_key_agreement_known_answer(self):
        assert crypto.agreement_public_key(self.RFC7748_A) == self.RFC7748_A_PUB
        assert crypto.agreement_public_key(self.RFC7748_B) == self.RFC7748_B_PUB
        k_ab = crypto.key_agreement(self.RFC7748_A, self.RFC7748_B_PUB)
        k_ba = crypto.key_agreement(self.RFC7748_B, self.RFC7748_A_PUB)
        assert k_ab == k_ba == self.RFC7748_SHARED

    def test_distinct_remotes_distinct_secrets(self):
        rng = crypto.EntropySource(5)
        local = rng.read(32)
        remotes = [crypto.agreement_public_key(rng.read(32)) for _ in range(4)]
        secrets = {crypto.key_agreement(local, remote) for remote in remotes}
        assert len(secrets) == 4

    def test_degenerate_public_key_rejected(self):
        with pytest.raises(ValueError):
            crypto.key_agreement(self.RFC7748_A, bytes(32))

    def test_channel_round_trip(self):
        channel_a = crypto.SecureChannel(self.RFC7748_SHARED)
        channel_b = crypto.SecureChannel(self.RFC7748_SHARED)
        wire = channel_a.seal(b"payload")
        assert channel_b.open(wire) == b"payload"
        with pytest.raises(Exception):
            channel_b.open(wire[:-1] + bytes([wire[-1] ^ 1]))


class TestIdentities:
    def test_sm_identity_deterministic(self):
        device = crypto.DeviceIdentity.from_secrets(b"\x01" * 32, b"\x02" * 32)
        a = crypto.derive_sm_identity(device, b"image v1")
        b = crypto.derive_sm_identity(device, b"image v1")
        assert a.public_key == b.public_key
        assert a.secret_seed == b.secret_seed

    def test_image_bit_changes_identity(self):
        device = crypto.DeviceIdentity.from_secrets(b"\x01" * 32, b"\x02" * 32)
        a = crypto.derive_sm_identity(device, b"image v1")
        b = crypto.derive_sm_identity(device, b"image v2")
        assert a.public_key != b.public_key
        assert a.image_hash != b.image_hash

    def test_device_changes_identity(self):
        d1 = crypto.DeviceIdentity.from_secrets(b"\x01" * 32, b"\x02" * 32)
        d2 = crypto.DeviceIdentity.from_secrets(b"\x03" * 32, b"\x02" * 32)
        assert (crypto.derive_sm_identity(d1, b"i").public_key
                != crypto.derive_sm_identity(d2, b"i").public_key)

    def test_certificate_chain_verifies(self):
        device = crypto.DeviceIdentity.from_secrets(b"\x01" * 32, b"\x02" * 32)
        identity = crypto.derive_sm_identity(device, b"image")
        assert crypto.verify(device.root_public_key, device.certificate.body,
                             device.certificate.signature)
        assert crypto.verify(device.public_key, identity.certificate.body,
                             identity.certificate.signature)
        parsed = crypto.parse_sm_cert_body(identity.certificate.body)
        assert parsed == (identity.public_key, identity.image_hash)

    def test_derive_seed_length_prefixing(self):
        assert crypto.derive_seed(b"c", b"ab", b"c") != crypto.derive_seed(b"c", b"a", b"bc")


class TestEntropy:
    def test_seeded_determinism(self):
        a = crypto.EntropySource(42)
        b = crypto.EntropySource(42)
        assert a.read(16) == b.read(16)
        assert a.u64() == b.u64()

    def test_distinct_draws(self):
        rng = crypto.EntropySource(42)
        assert rng.read(32) != rng.read(32)

    def test_unseeded_mode(self):
        rng = crypto.EntropySource()
        assert not rng.deterministic
        assert len(rng.read(8)) == 8

    def test_randrange_bounds(self):
        rng = crypto.EntropySource(7)
        draws = {rng.randrange(5) for _ in range(200)}
        assert draws == {0, 1, 2, 3, 4}


class TestMeasurementPrimitive:
    def test_empty_stream_is_prefix_hash(self):
        state = crypto.MeasurementState()
        assert state.finalize() == hashlib.sha3_256(
            crypto.MEASUREMENT_DOMAIN_PREFIX).digest()

    def test_extend_deterministic(self):
        records = [crypto.page_table_record(0x1000),
                   crypto.load_page_record(0x2000, 5, b"abc"),
                   crypto.create_thread_record(0x2000, {1: 0x2004})]
        assert crypto.measure_records(records) == crypto.measure_records(records)

    def test_finalize_twice_rejected(self):
        state = crypto.MeasurementState()
        state.finalize()
        with pytest.raises(ValueError):
            state.finalize()
        with pytest.raises(ValueError):
            state.extend(crypto.page_table_record(0))

    def test_output_is_32_bytes(self):
        state = crypto.MeasurementState()
        crypto.measure_extend(state, crypto.page_table_record(7))
        assert len(crypto.finalize_measurement(state)) == 32

    def test_record_order_matters(self):
        a = crypto.load_page_record(0x1000, 3, b"one")
        b = crypto.load_page_record(0x2000, 3, b"two")
        assert crypto.measure_records([a, b]) != crypto.measure_records([b, a])

    def test_copy_isolated(self):
        state = crypto.MeasurementState()
        state.extend(crypto.page_table_record(1))
        dup = state.copy()
        state.extend(crypto.page_table_record(2))
        assert dup.current_digest() != state.current_digest()


_tuples = st.tuples(st.integers(min_value=0, max_value=2 ** 64 - 1),
                    st.integers(min_value=0, max_value=255),
                    st.binary(max_size=64))


@settings(max_examples=200, deadline=None)
@given(_tuples, _tuples)
def test_load_record_encoding_injective(a, b):
    enc_a = crypto.load_page_record(*a).encoded()
    enc_b = crypto.load_page_record(*b).encoded()
    assert (enc_a == enc_b) == (a == b)


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.integers(min_value=0, max_value=255),
                       st.integers(min_value=0, max_value=2 ** 64 - 1), max_size=4),
       st.dictionaries(st.integers(min_value=0, max_value=255),
                       st.integers(min_value=0, max_value=2 ** 64 - 1), max_size=4),
       st.integers(min_value=0, max_value=2 ** 64 - 1))
def test_thread_record_encoding_injective(handlers_a, handlers_b, entry):
    enc_a = crypto.create_thread_record(entry, handlers_a).encoded()
    enc_b = crypto.create_thread_record(entry, handlers_b).encoded()
    assert (enc_a == enc_b) == (handlers_a == handlers_b)
