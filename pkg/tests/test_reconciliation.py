from directchain.core import LifecyclePhase, Mark, ObjectVersion, PodRecord, Tombstone
from directchain.materialization import decode_message, encode_message
from directchain.reconciliation import (
    DIGEST_CHUNK, HandshakeMode, HandshakeSession, apply_handshake, diff_digest, digest_messages,
    fetch_messages, parse_digest, parse_ids, parse_tombstones, pod_digest, run_handshake,
    tombstone_message,
)

P = LifecyclePhase


def pod(pid, node=None, phase=P.PENDING, v=1):
    return PodRecord(pid, 1, node, phase, ObjectVersion(1, v))


def test_recover_adopts_downstream_with_empty_cache():
    local = {}
    downstream = {1: pod(1, node=1), 2: pod(2, node=2)}
    changes, _ = run_handshake(local, downstream)
    assert local == downstream
    assert changes.mode == HandshakeMode.RECOVER
    assert not changes


def test_reset_invalidates_pods_missing_downstream():
    local = {1: pod(1), 2: pod(2)}
    downstream = {1: pod(1, node=1, v=2)}
    changes, _ = run_handshake(local, downstream)
    assert changes.mode == HandshakeMode.RESET
    assert changes.overwritten == {1} and changes.invalidated == {2}
    assert local[1].node == 1 and Mark.DIRTY in local[1].marks
    assert local[2].invalid


def test_identical_state_gives_empty_change_set():
    same = {1: pod(1, node=1), 2: pod(2, node=2)}
    local = dict(same)
    changes, frames = run_handshake(local, same)
    assert not changes
    assert frames == 2  # digest request and one digest chunk
    assert local == same


def test_reset_without_invalidation_keeps_local_pods():
    local = {1: pod(1), 2: pod(2)}
    changes, _ = run_handshake(local, {1: pod(1)}, invalidate=False)
    assert changes.invalidated == set()
    assert local[2].live


def test_frames_grow_with_stale_pods():
    downstream = {i: pod(i, node=1, v=2) for i in range(1, 101)}
    local = {i: pod(i) for i in range(1, 101)}
    local_all_fresh = dict(downstream)
    _, all_stale = run_handshake(local, downstream)
    _, none_stale = run_handshake(local_all_fresh, downstream)
    assert none_stale == 1 + 2  # 100 digests fit in two chunks
    assert all_stale == none_stale + 2 + 100


def test_digest_chunking_round_trip():
    digest = {i: ObjectVersion(1, i) for i in range(1, 2 * DIGEST_CHUNK + 2)}
    msgs = digest_messages(digest)
    assert len(msgs) == 3
    back = {}
    for m in msgs:
        back.update(parse_digest(decode_message(encode_message(m))))
    assert back == digest


def test_digest_skips_invalid_and_removed():
    pods = {1: pod(1), 2: pod(2).with_marks(Mark.INVALID), 3: pod(3, phase=P.REMOVED)}
    assert set(pod_digest(pods)) == {1}


def test_diff_digest():
    local = {1: pod(1), 2: pod(2), 4: pod(4)}
    digest = {1: ObjectVersion(1, 1), 2: ObjectVersion(1, 9), 3: ObjectVersion(1, 1)}
    assert diff_digest(local, digest) == ([2, 3], [4])


def test_removed_between_rounds_counts_as_absent():
    local = {1: pod(1)}
    changes = apply_handshake(local, [pod(1, phase=P.REMOVED)], [], HandshakeMode.RESET)
    assert changes.invalidated == {1}


def test_fetch_ids_round_trip():
    ids = list(range(1, 70))
    got = [pid for m in fetch_messages(ids) for pid in parse_ids(m)]
    assert got == ids


def test_tombstone_round_trip():
    t = Tombstone(7, "rs", 3)
    msg = decode_message(encode_message(tombstone_message(t)))
    assert parse_tombstones(msg) == [t]


def test_session_stages_and_frame_count():
    s = HandshakeSession("rs-sc")
    assert not s.add_digest(digest_messages({1: ObjectVersion(1, 1)})[0], more=True)
    assert s.add_digest(digest_messages({2: ObjectVersion(1, 1)})[0], more=False)
    assert s.digest == {1: ObjectVersion(1, 1), 2: ObjectVersion(1, 1)}
    s.start_fetch([1, 2])
    s.add_state([pod(1)], more=True)
    assert s.add_state([pod(2)], more=False)
    assert s.stage == "done" and s.frames == 5
