"""Simulated trusted-timestamping backend.

Hashes are converted to pay-to-hash style Base58Check addresses and recorded
in a local append-only ledger file whose entries are hash-chained, so edits
to past entries are detectable by a full audit.  The ledger is a simulation
seam: it provides the addressing and verification algebra of a blockchain
anchor without any network, fees, or decentralization.

Ledger file format: one JSON object per line,
``{"sequence", "address", "hash", "recorded_at", "batch_root", "checksum"}``.
``checksum`` = SHA-256 over (previous entry's checksum hex ‖ this entry's
canonical JSON without the checksum field); the first entry chains from 64
zeros.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from ._ripemd160 import ripemd160

_B58_ALPHABET = "123456789ABCDEFGHJKLMNPQRSTUVWXYZabcdefghijkmnopqrstuvwxyz"
_GENESIS_CHECKSUM = "0" * 64
_HEX_RE = re.compile(r"^[0-9a-f]+$")

ADDRESS_VERSION_BYTE = 0x00


class AnchorError(Exception):
    pass


class MalformedHash(AnchorError):
    pass


class LedgerUnavailable(AnchorError):
    pass


class NotFound(AnchorError):
    """No ledger entry anchors this hash: no existence proof."""


class EmptyBatch(AnchorError):
    pass


def _b58check_encode(payload: bytes) -> str:
    checksum = hashlib.sha256(hashlib.sha256(payload).digest()).digest()[:4]
    data = payload + checksum
    n = int.from_bytes(data, "big")
    digits = []
    while n > 0:
        n, rem = divmod(n, 58)
        digits.append(_B58_ALPHABET[rem])
    leading = len(data) - len(data.lstrip(b"\x00"))
    return "1" * leading + "".join(reversed(digits))


def derive_address(hash_hex: str) -> str:
    """Convert a digest to its ledger address.

    The raw digest bytes (not the hex text) are hashed: address =
    Base58Check(0x00 ‖ RIPEMD160(SHA256(digest bytes))).
    """
    if not _HEX_RE.match(hash_hex) or len(hash_hex) not in (32, 64):
        raise MalformedHash(f"expected 32 or 64 lowercase hex chars, got {hash_hex!r}")
    digest = bytes.fromhex(hash_hex)
    h160 = ripemd160(hashlib.sha256(digest).digest())
    return _b58check_encode(bytes([ADDRESS_VERSION_BYTE]) + h160)


@dataclass(frozen=True)
class LedgerEntry:
    sequence: int
    address: str
    hash: str
    recorded_at: datetime
    batch_root: str | None
    checksum: str


@dataclass(frozen=True)
class AnchorReceipt:
    hash: str
    address: str
    sequence: int
    recorded_at: datetime
    merkle_proof: tuple[tuple[str, str], ...] | None = None  # (sibling hex, "L"|"R")


def _rfc3339(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _parse_rfc3339(text: str) -> datetime:
    return datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc)


def _entry_payload_bytes(sequence: int, address: str, hash_hex: str,
                         recorded_at: str, batch_root: str | None) -> bytes:
    payload = {
        "sequence": sequence,
        "address": address,
        "hash": hash_hex,
        "recorded_at": recorded_at,
        "batch_root": batch_root,
    }
    return json.dumps(payload, separators=(",", ":")).encode("utf-8")


def _chain_checksum(prev_checksum: str, payload: bytes) -> str:
    return hashlib.sha256(prev_checksum.encode("ascii") + payload).hexdigest()


class Ledger:
    """Append-only transparency log backed by a newline-delimited JSON file.

    Appends are serialized through an in-process lock; reads always observe
    a prefix of the log.  Parsed entries are cached against the file's stat
    signature so repeated verification scans stay cheap.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._cache_key: tuple[int, int] | None = None
        self._cache: list[LedgerEntry] = []

    # -- reading ------------------------------------------------------------

    def _stat_key(self) -> tuple[int, int] | None:
        try:
            stat = self.path.stat()
        except FileNotFoundError:
            return None
        return (stat.st_mtime_ns, stat.st_size)

    def entries(self) -> list[LedgerEntry]:
        key = self._stat_key()
        if key is None:
            return []
        if key == self._cache_key:
            return list(self._cache)
        out = []
        try:
            text = self.path.read_text(encoding="utf-8")
        except OSError as exc:
            raise LedgerUnavailable(f"cannot read ledger {self.path}: {exc}") from exc
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(LedgerEntry(
                    sequence=obj["sequence"],
                    address=obj["address"],
                    hash=obj["hash"],
                    recorded_at=_parse_rfc3339(obj["recorded_at"]),
                    batch_root=obj.get("batch_root"),
                    checksum=obj["checksum"],
                ))
            except (ValueError, KeyError, TypeError) as exc:
                raise LedgerUnavailable(
                    f"ledger {self.path} line {lineno} unreadable: {exc}"
                ) from exc
        self._cache_key = key
        self._cache = out
        return list(out)

    def audit(self) -> int:
        """Verify the full checksum chain; returns the entry count.

        Raises LedgerUnavailable naming the first entry whose bytes no longer
        match the chain (a rewritten or reordered record).
        """
        prev = _GENESIS_CHECKSUM
        count = 0
        for entry in self.entries():
            payload = _entry_payload_bytes(
                entry.sequence, entry.address, entry.hash,
                _rfc3339(entry.recorded_at), entry.batch_root,
            )
            expect = _chain_checksum(prev, payload)
            if entry.checksum != expect:
                raise LedgerUnavailable(
                    f"chain checksum mismatch at sequence {entry.sequence}"
                )
            if count and entry.sequence <= count - 1:
                raise LedgerUnavailable(
                    f"sequence not strictly increasing at {entry.sequence}"
                )
            prev = entry.checksum
            count += 1
        return count

    # -- writing ------------------------------------------------------------

    def append(self, hash_hex: str, batch_root: str | None = None) -> LedgerEntry:
        if not _HEX_RE.match(hash_hex):
            raise MalformedHash(f"not lowercase hex: {hash_hex!r}")
        with self._lock:
            existing = self.entries()
            sequence = existing[-1].sequence + 1 if existing else 0
            prev = existing[-1].checksum if existing else _GENESIS_CHECKSUM
            recorded_at = datetime.now(timezone.utc).replace(microsecond=0)
            payload = _entry_payload_bytes(
                sequence, derive_address(hash_hex), hash_hex,
                _rfc3339(recorded_at), batch_root,
            )
            checksum = _chain_checksum(prev, payload)
            entry = LedgerEntry(
                sequence=sequence,
                address=derive_address(hash_hex),
                hash=hash_hex,
                recorded_at=recorded_at,
                batch_root=batch_root,
                checksum=checksum,
            )
            line = json.dumps({
                "sequence": entry.sequence,
                "address": entry.address,
                "hash": entry.hash,
                "recorded_at": _rfc3339(entry.recorded_at),
                "batch_root": entry.batch_root,
                "checksum": entry.checksum,
            }, separators=(",", ":"))
            try:
                with self.path.open("a", encoding="utf-8") as f:
                    f.write(line + "\n")
            except OSError as exc:
                raise LedgerUnavailable(f"cannot append to {self.path}: {exc}") from exc
            self._cache = existing + [entry]
            self._cache_key = self._stat_key()
            return entry


def stamp(hash_hex: str, ledger: Ledger) -> AnchorReceipt:
    """Record a hash in the ledger now; re-stamping the same hash is allowed."""
    entry = ledger.append(hash_hex)
    return AnchorReceipt(
        hash=entry.hash,
        address=entry.address,
        sequence=entry.sequence,
        recorded_at=entry.recorded_at,
    )


def verify_timestamp(hash_hex: str, ledger: Ledger) -> list[AnchorReceipt]:
    """All receipts anchoring this hash, by recomputed address, oldest first."""
    address = derive_address(hash_hex)
    receipts = [
        AnchorReceipt(
            hash=e.hash, address=e.address,
            sequence=e.sequence, recorded_at=e.recorded_at,
        )
        for e in ledger.entries()
        if e.address == address
    ]
    if not receipts:
        raise NotFound(f"no ledger entry for {hash_hex}")
    return sorted(receipts, key=lambda r: r.sequence)


# --------------------------------------------------------------------------
# Merkle batching
# --------------------------------------------------------------------------

def _parent(left: bytes, right: bytes) -> bytes:
    return hashlib.sha256(left + right).digest()


def merkle_batch(
    hashes: list[str], ledger: Ledger | None = None,
) -> tuple[str, list[AnchorReceipt]]:
    """Aggregate many digests into one Merkle root and anchor the root.

    Leaves keep caller order (batches are chronological, not sorted); an odd
    node at any level is promoted unchanged to the next.  Returns the root
    and one receipt per input hash carrying its inclusion proof.
    """
    if not hashes:
        raise EmptyBatch("no hashes to batch")
    for h in hashes:
        if not _HEX_RE.match(h) or len(h) not in (32, 64):
            raise MalformedHash(f"bad digest in batch: {h!r}")

    level = [bytes.fromhex(h) for h in hashes]
    proofs: list[list[tuple[str, str]]] = [[] for _ in hashes]
    positions = list(range(len(hashes)))

    while len(level) > 1:
        next_level = []
        for i in range(0, len(level) - 1, 2):
            next_level.append(_parent(level[i], level[i + 1]))
        promoted = len(level) % 2 == 1
        if promoted:
            next_level.append(level[-1])
        for leaf, pos in enumerate(positions):
            if promoted and pos == len(level) - 1:
                positions[leaf] = len(level) // 2
                continue
            sibling = pos ^ 1
            side = "R" if pos % 2 == 0 else "L"
            proofs[leaf].append((level[sibling].hex(), side))
            positions[leaf] = pos // 2
        level = next_level

    root = level[0].hex()
    entry = None
    if ledger is not None:
        entry = ledger.append(root, batch_root=root)
    receipts = [
        AnchorReceipt(
            hash=h,
            address=entry.address if entry else derive_address(root),
            sequence=entry.sequence if entry else -1,
            recorded_at=entry.recorded_at if entry else datetime.now(timezone.utc),
            merkle_proof=tuple(proofs[i]),
        )
        for i, h in enumerate(hashes)
    ]
    return root, receipts


def verify_merkle_proof(
    hash_hex: str, proof: tuple[tuple[str, str], ...] | list[tuple[str, str]],
    root_hex: str,
) -> bool:
    """Fold a leaf through its sibling path; True iff the root is reproduced."""
    try:
        node = bytes.fromhex(hash_hex)
        root = bytes.fromhex(root_hex)
    except ValueError:
        return False
    for sibling_hex, side in proof:
        try:
            sibling = bytes.fromhex(sibling_hex)
        except ValueError:
            return False
        if side == "R":
            node = _parent(node, sibling)
        elif side == "L":
            node = _parent(sibling, node)
        else:
            return False
    return node == root
