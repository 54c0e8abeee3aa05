import random
from types import SimpleNamespace

import pytest
from hypothesis import assume, given, settings, strategies as st

from directchain.core import LifecyclePhase, ObjectVersion, PodRecord
from directchain.materialization import (
    _ALLOWED, ENTRY_BUDGET, TEMPLATE_SIZE, Attr, AttrKey, DanglingRef, DeltaMessage, ExternalRef,
    FrameType, Literal, MalformedMessage, ObjectKind, OversizeEntry, TemplateStore, batch_message,
    decode_frame, decode_message, encode_frame, encode_frame_sized, encode_message,
    encode_message_sized, extract_delta, materialize, per_object_footprint, pod_key,
    record_message, template_ref,
)

# golden encodings; any change here breaks wire compatibility
GOLDEN = {
    "empty": "01000000",
    "node_name": "010000010111020002",
    "fresh_pod": "01000002011103020001110404020204",
    "batch_frame": "00010100030003010003020001000404020104010006030101",
}


def cache(fns=(1, 2)):
    return SimpleNamespace(templates=TemplateStore.for_functions(fns), pods=None)


def test_golden_empty_message_is_header_only():
    data = encode_message(DeltaMessage())
    assert data.hex() == GOLDEN["empty"]
    assert len(data) == 4


def test_golden_node_name_delta():
    msg = extract_delta(PodRecord(17, node=1), PodRecord(17))
    assert msg.entries == ((pod_key(17, Attr.NODE_NAME), Literal(1)),)
    data = encode_message(msg)
    assert data.hex() == GOLDEN["node_name"]
    assert len(data) <= ENTRY_BUDGET


def test_golden_fresh_pod():
    msg = record_message(PodRecord(17, function_id=2))
    assert msg.entries == (
        (pod_key(17, Attr.PHASE), Literal(LifecyclePhase.PENDING)),
        (pod_key(17, Attr.TEMPLATE_REF), template_ref(2)),
    )
    assert encode_message(msg).hex() == GOLDEN["fresh_pod"]


def test_golden_batch_frame():
    msg = batch_message(0, 3, 1, ObjectVersion(1, 1))
    assert encode_frame(FrameType.DELTA, msg).hex() == GOLDEN["batch_frame"]


def test_no_change_is_empty_delta():
    rec = PodRecord(5, function_id=1, node=2, phase=LifecyclePhase.RUNNING)
    assert extract_delta(rec, rec).entries == ()


def test_delta_for_other_pod_rejected():
    with pytest.raises(ValueError):
        extract_delta(PodRecord(1), PodRecord(2))


def test_batch_expands_to_pending_pods():
    recs = materialize(batch_message(0, 3, 1, ObjectVersion(1, 1)), cache())
    assert [r.pod_id for r in recs] == [1, 2, 3]
    assert all(r.phase == LifecyclePhase.PENDING and r.function_id == 1 for r in recs)


def test_absent_template_is_dangling():
    with pytest.raises(DanglingRef):
        materialize(record_message(PodRecord(1, function_id=9)), cache())


def test_empty_delta_materializes_nothing():
    assert materialize(DeltaMessage(), cache()) == []


def test_delta_merges_onto_cached_record():
    base = PodRecord(4, function_id=1, version=ObjectVersion(1, 1))
    c = SimpleNamespace(templates=TemplateStore.for_functions([1]), pods={4: base})
    (rec,) = materialize(extract_delta(PodRecord(4, function_id=1, node=3, version=ObjectVersion(1, 1)), base), c)
    assert rec.node == 3 and rec.function_id == 1


def test_truncated_header():
    with pytest.raises(MalformedMessage):
        decode_message(b"\x01\x00")


def test_long_string_is_oversize():
    with pytest.raises(OversizeEntry):
        encode_message(DeltaMessage(((AttrKey(ObjectKind.TOMBSTONE, 1, Attr.CREATOR), Literal("x" * 49)),)))


def test_object_over_budget_is_oversize():
    key = AttrKey(ObjectKind.TOMBSTONE, 1, Attr.CREATOR)
    with pytest.raises(OversizeEntry):
        encode_message(DeltaMessage(((key, Literal("x" * 40)), (key, Literal("y" * 40)))))


def test_attribute_must_belong_to_kind():
    with pytest.raises(ValueError):
        encode_message(DeltaMessage(((AttrKey(ObjectKind.POD, 1, Attr.REPLICAS), Literal(1)),)))


def test_frame_round_trip_and_more_flag():
    msg = record_message(PodRecord(3, function_id=1))
    data, footprint = encode_frame_sized(FrameType.STATE, msg, more=True)
    assert decode_frame(data) == (FrameType.STATE, True, msg)
    assert footprint == len(data)


def test_per_object_footprint_charges_header_to_each_object():
    msg = DeltaMessage(record_message(PodRecord(1, function_id=1)).entries
                       + record_message(PodRecord(2, function_id=1)).entries)
    data, biggest = encode_message_sized(msg)
    sizes = per_object_footprint(data)
    assert max(sizes.values()) == biggest
    assert sum(sizes.values()) == len(data) + 4


def test_template_payload_is_17kb():
    store = TemplateStore.for_functions([1, 2])
    assert len(store.get(1)) == TEMPLATE_SIZE == 17 * 1024
    assert store.get(1) != store.get(2)


# -- generated messages --

def _value_for(attr, rnd):
    if attr == Attr.TEMPLATE_REF:
        kind = rnd.choice([ObjectKind.REPLICASET, ObjectKind.DEPLOYMENT])
        return ExternalRef(AttrKey(kind, rnd.randrange(1 << 20), Attr.TEMPLATE_REF))
    if attr == Attr.PHASE:
        return Literal(rnd.choice(list(LifecyclePhase)))
    if attr == Attr.VERSION:
        return Literal(ObjectVersion(rnd.randrange(1 << 32), rnd.randrange(1 << 32)))
    if attr == Attr.CREATOR:
        return Literal("".join(rnd.choice("abcxyz-0189é") for _ in range(rnd.randrange(12))))
    return Literal(rnd.randrange(-(1 << 40), 1 << 40))


def random_message(rnd: random.Random) -> DeltaMessage:
    entries = []
    for _ in range(rnd.randrange(6)):
        kind = rnd.choice(list(ObjectKind))
        attr = rnd.choice(sorted(_ALLOWED[kind]))
        entries.append((AttrKey(kind, rnd.randrange(1 << 24), attr), _value_for(attr, rnd)))
    hint = (rnd.randrange(1 << 20), rnd.randrange(1, 1000)) if rnd.random() < 0.2 else None
    return DeltaMessage(tuple(entries), hint)


def test_round_trip_ten_thousand_generated_messages():
    rnd = random.Random(20240901)
    for _ in range(10_000):
        msg = random_message(rnd)
        assert decode_message(encode_message(msg)) == msg


@settings(max_examples=300, deadline=None)
@given(st.integers(min_value=0, max_value=2**32))
def test_round_trip_property(seed):
    msg = random_message(random.Random(seed))
    data = encode_message(msg)
    assert decode_message(data) == msg
    assert encode_message(decode_message(data)) == data


@settings(max_examples=500, deadline=None)
@given(st.binary(max_size=80))
def test_arbitrary_bytes_never_crash(data):
    try:
        msg = decode_message(data)
    except MalformedMessage:
        return
    assert isinstance(msg, DeltaMessage)


def test_mutated_encodings_decode_or_fail_cleanly():
    rnd = random.Random(7)
    for _ in range(3000):
        data = bytearray(encode_message(random_message(rnd)))
        for _ in range(rnd.randrange(1, 4)):
            op = rnd.randrange(3)
            if op == 0 and data:
                data[rnd.randrange(len(data))] = rnd.randrange(256)
            elif op == 1 and data:
                del data[rnd.randrange(len(data)):]
            else:
                data.insert(rnd.randrange(len(data) + 1), rnd.randrange(256))
        try:
            decode_message(bytes(data))
        except MalformedMessage:
            pass


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10**9), st.integers(1, 50), st.one_of(st.none(), st.integers(1, 500)),
       st.sampled_from(list(LifecyclePhase)), st.integers(0, 2**31), st.integers(0, 2**31))
def test_pod_deltas_fit_budget(pid, fn, node, phase, epoch, counter):
    rec = PodRecord(pid, fn, node, phase, ObjectVersion(epoch, counter))
    assume(phase != LifecyclePhase.REMOVED)
    data = encode_message(record_message(rec))
    assert len(data) <= ENTRY_BUDGET
    got = materialize(decode_message(data), cache(range(1, 51)))
    assert got == [rec]
