"""Independent brute-force oracles for the sequence-mapping logic.

These materialize the two byte streams (the client's stream, and the stream
the server sees with inserted regions spliced in) as tagged byte lists and
answer mapping questions by counting, with no offset arithmetic shared with
the splice module.  Slow and only suitable for desk-scale cases, which is
the point: they are the ground truth the fast path is checked against.
"""

from __future__ import annotations

from typing import Sequence

AT_START = "at_start"
INSIDE = "inside"
FORWARD = "forward"


def spliced_tags(client_len: int, insertions: Sequence[tuple[int, int]]) -> list[tuple[str, int]]:
    """Tag every byte of the receiver-side stream.

    insertions: (client_offset, length) pairs, strictly increasing offsets,
    offsets <= client_len.  Returns [(kind, idx)] where kind is "C" (client
    byte, idx = its client offset) or "I" (inserted byte, idx = point index).
    """
    out: list[tuple[str, int]] = []
    prev = 0
    for idx, (off, length) in enumerate(insertions):
        if off < prev:
            raise ValueError("insertion offsets must be non-decreasing")
        out.extend(("C", i) for i in range(prev, off))
        out.extend(("I", idx) for _ in range(length))
        prev = off
    out.extend(("C", i) for i in range(prev, client_len))
    return out


def map_pos(client_len: int, insertions: Sequence[tuple[int, int]], p: int) -> int:
    """Receiver-side position of client byte p (or of the stream end)."""
    tags = spliced_tags(client_len, insertions)
    if p == client_len:
        return len(tags)
    for pos, (kind, idx) in enumerate(tags):
        if kind == "C" and idx == p:
            return pos
    raise ValueError(f"client position {p} out of range")


def classify_ack(client_len: int, insertions: Sequence[tuple[int, int]], a: int):
    """Classify a receiver-space cumulative ACK at offset a.

    Returns (kind, forwarded_offset, point_index):
      FORWARD   ack maps to a client-stream offset (point_index None)
      AT_START  ack sits exactly where inserted region point_index begins
      INSIDE    ack lands inside or exactly at the end of that region
    forwarded_offset is always the count of client bytes before a — the
    value a relayed (or clamped) ACK would carry.
    """
    tags = spliced_tags(client_len, insertions)
    if not 0 <= a <= len(tags):
        raise ValueError("ack outside stream")
    fwd = sum(1 for kind, _ in tags[:a] if kind == "C")
    prev_inserted = a > 0 and tags[a - 1][0] == "I"
    next_inserted = a < len(tags) and tags[a][0] == "I"
    if prev_inserted:
        return INSIDE, fwd, tags[a - 1][1]
    if next_inserted:
        return AT_START, fwd, tags[a][1]
    return FORWARD, fwd, None


def map_sack_block(client_len: int, insertions: Sequence[tuple[int, int]],
                   left: int, right: int) -> tuple[int, int] | None:
    """Map a receiver-space SACK block to client space; None if it only
    covers inserted bytes."""
    tags = spliced_tags(client_len, insertions)
    covered = [idx for kind, idx in tags[left:right] if kind == "C"]
    if not covered:
        return None
    return covered[0], covered[-1] + 1
