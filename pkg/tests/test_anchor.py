from __future__ import annotations

import hashlib
import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from mementofix._ripemd160 import ripemd160
from mementofix.anchor import (
    EmptyBatch,
    Ledger,
    LedgerUnavailable,
    MalformedHash,
    NotFound,
    derive_address,
    merkle_batch,
    stamp,
    verify_merkle_proof,
    verify_timestamp,
)

# Published RIPEMD-160 test vectors (Dobbertin, Bosselaers, Preneel).
RIPEMD_VECTORS = {
    b"": "9c1185a5c5e9fc54612808977ee8f548b2258d31",
    b"a": "0bdc9d2d256b3ee9daae347be6f4dc835a467ffe",
    b"abc": "8eb208f7e05d987a9b044a8e98c6b087f15a0bfc",
    b"message digest": "5d0689ef49d2fae572b881b123a85ffa21595f36",
    b"abcdefghijklmnopqrstuvwxyz": "f71c27109c692c1b56bbdceb5b9d2865b3708dbc",
    b"The quick brown fox jumps over the lazy dog":
        "37f332f68db77bd9d7edd4969571ad671cf9dd3b",
    b"1234567890" * 8: "9b752e45573d4b39f4dbd3323cab82bf63326bfb",
}


def test_ripemd160_vectors():
    for message, digest in RIPEMD_VECTORS.items():
        assert ripemd160(message).hex() == digest


_B58_ALPHABET = "123456789ABCDEFGHJKLMNPQRSTUVWXYZabcdefghijkmnopqrstuvwxyz"


def _oracle_address(hash_hex: str) -> str:
    """Independent Base58Check (big-int arithmetic, distinct code path)."""
    payload = bytes([0x00]) + ripemd160(
        hashlib.sha256(bytes.fromhex(hash_hex)).digest()
    )
    data = payload + hashlib.sha256(hashlib.sha256(payload).digest()).digest()[:4]
    n = int.from_bytes(data, "big")
    text = ""
    while n:
        text = _B58_ALPHABET[n % 58] + text
        n //= 58
    pad = len(data) - len(data.lstrip(b"\x00"))
    return "1" * pad + text


class TestDeriveAddress:
    # frozen once from the independent oracle above
    GOLDEN_ZEROS = "1HqoNfpAJFMy9E36DBSk1ktPQ9o9fn2RxX"

    def test_all_zero_digest_golden(self):
        assert derive_address("0" * 64) == self.GOLDEN_ZEROS
        assert _oracle_address("0" * 64) == self.GOLDEN_ZEROS

    def test_starts_with_one(self):
        rng = random.Random(11)
        for _ in range(25):
            digest = bytes(rng.randrange(256) for _ in range(32)).hex()
            assert derive_address(digest).startswith("1")

    def test_deterministic(self):
        digest = hashlib.sha256(b"anything").hexdigest()
        assert derive_address(digest) == derive_address(digest)

    def test_md5_length_accepted(self):
        assert derive_address("d" * 32).startswith("1")

    @pytest.mark.parametrize("bad", ["", "zz" * 32, "ABC" + "0" * 61, "0" * 63])
    def test_malformed(self, bad):
        with pytest.raises(MalformedHash):
            derive_address(bad)

    @given(st.binary(min_size=32, max_size=32))
    def test_matches_independent_oracle(self, raw):
        digest = raw.hex()
        assert derive_address(digest) == _oracle_address(digest)


class TestLedger:
    def test_stamp_then_verify(self, tmp_path):
        ledger = Ledger(tmp_path / "ledger.ndjson")
        digest = hashlib.sha256(b"manifest").hexdigest()
        receipt = stamp(digest, ledger)
        found = verify_timestamp(digest, ledger)
        assert [r.address for r in found] == [receipt.address]
        assert found[0].recorded_at == receipt.recorded_at

    def test_restamping_appends(self, tmp_path):
        ledger = Ledger(tmp_path / "ledger.ndjson")
        digest = hashlib.sha256(b"again").hexdigest()
        first = stamp(digest, ledger)
        second = stamp(digest, ledger)
        assert second.sequence > first.sequence
        assert len(verify_timestamp(digest, ledger)) == 2

    def test_unknown_hash_not_found(self, tmp_path):
        ledger = Ledger(tmp_path / "ledger.ndjson")
        stamp(hashlib.sha256(b"x").hexdigest(), ledger)
        with pytest.raises(NotFound):
            verify_timestamp(hashlib.sha256(b"y").hexdigest(), ledger)

    def test_audit_passes_on_untouched_log(self, tmp_path):
        ledger = Ledger(tmp_path / "ledger.ndjson")
        for i in range(10):
            stamp(hashlib.sha256(f"doc{i}".encode()).hexdigest(), ledger)
        assert ledger.audit() == 10

    def test_audit_detects_rewritten_entry(self, tmp_path):
        path = tmp_path / "ledger.ndjson"
        ledger = Ledger(path)
        for i in range(5):
            stamp(hashlib.sha256(f"doc{i}".encode()).hexdigest(), ledger)
        lines = path.read_text().splitlines()
        entry = json.loads(lines[2])
        entry["hash"] = hashlib.sha256(b"forged").hexdigest()
        lines[2] = json.dumps(entry, separators=(",", ":"))
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(LedgerUnavailable):
            ledger.audit()

    def test_missing_ledger_file_reads_empty(self, tmp_path):
        ledger = Ledger(tmp_path / "absent.ndjson")
        assert ledger.entries() == []
        with pytest.raises(NotFound):
            verify_timestamp("0" * 64, ledger)


def _digests(n: int, seed: int = 0) -> list[str]:
    return [hashlib.sha256(f"{seed}:{i}".encode()).hexdigest() for i in range(n)]


class TestMerkleBatch:
    def test_single_hash_promotes_to_root(self):
        [digest] = _digests(1)
        root, receipts = merkle_batch([digest])
        assert root == digest
        assert receipts[0].merkle_proof == ()
        assert verify_merkle_proof(digest, (), root)

    def test_two_hashes(self):
        a, b = _digests(2)
        root, receipts = merkle_batch([a, b])
        expected = hashlib.sha256(bytes.fromhex(a) + bytes.fromhex(b)).hexdigest()
        assert root == expected
        assert receipts[0].merkle_proof == ((b, "R"),)
        assert receipts[1].merkle_proof == ((a, "L"),)

    def test_five_leaves_against_bruteforce(self):
        leaves = _digests(5)
        root, receipts = merkle_batch(leaves)

        # brute-force recompute: full level-by-level tree with promotion
        def parent(x, y):
            return hashlib.sha256(bytes.fromhex(x) + bytes.fromhex(y)).hexdigest()

        l1 = [parent(leaves[0], leaves[1]), parent(leaves[2], leaves[3]), leaves[4]]
        l2 = [parent(l1[0], l1[1]), l1[2]]
        expected_root = parent(l2[0], l2[1])
        assert root == expected_root
        for digest, receipt in zip(leaves, receipts):
            assert verify_merkle_proof(digest, receipt.merkle_proof, root)

    def test_flipped_side_fails(self):
        leaves = _digests(5)
        root, receipts = merkle_batch(leaves)
        proof = list(receipts[0].merkle_proof)
        sibling, side = proof[0]
        proof[0] = (sibling, "L" if side == "R" else "R")
        assert not verify_merkle_proof(leaves[0], proof, root)

    def test_empty_batch(self):
        with pytest.raises(EmptyBatch):
            merkle_batch([])

    def test_batch_writes_one_ledger_entry(self, tmp_path):
        ledger = Ledger(tmp_path / "ledger.ndjson")
        root, receipts = merkle_batch(_digests(7), ledger)
        entries = ledger.entries()
        assert len(entries) == 1
        assert entries[0].hash == root
        assert entries[0].batch_root == root
        assert all(r.sequence == entries[0].sequence for r in receipts)

    @settings(max_examples=25)
    @given(st.lists(st.binary(min_size=32, max_size=32), min_size=1, max_size=16,
                    unique=True))
    def test_membership_property(self, raws):
        leaves = [r.hex() for r in raws]
        root, receipts = merkle_batch(leaves)
        for digest, receipt in zip(leaves, receipts):
            assert verify_merkle_proof(digest, receipt.merkle_proof, root)
        outsider = hashlib.sha256(b"".join(raws) + b"outsider").hexdigest()
        for receipt in receipts:
            assert not verify_merkle_proof(outsider, receipt.merkle_proof, root)


class TestVerifyMerkleProof:
    def test_empty_proof_equal(self):
        digest = _digests(1)[0]
        assert verify_merkle_proof(digest, (), digest)

    def test_empty_proof_unequal(self):
        a, b = _digests(2)
        assert not verify_merkle_proof(a, (), b)

    def test_garbage_side_flag(self):
        a, b = _digests(2)
        assert not verify_merkle_proof(a, ((b, "X"),), a)
