from directchain.transport import Direction, Link, SendStatus

F, B = Direction.FORWARD, Direction.BACKWARD


def test_send_on_disconnected_link():
    link = Link("a-b")
    link.set_connected(False)
    assert link.send(F, b"x") == SendStatus.NOT_CONNECTED
    assert link.pending() == 0


def test_disconnect_drops_everything_in_flight():
    link = Link("a-b")
    for i in range(1000):
        assert link.send(F, bytes([i % 256]), now=i) == SendStatus.ACCEPTED
    link.set_connected(False)
    assert link.dropped == 1000
    assert link.deliver_due(10**9) == []


def test_delivery_by_due_time():
    link = Link("a-b", latency=0)
    link.send(F, b"m1", now=5)
    link.send(F, b"m2", now=7)
    assert link.deliver_due(6) == [(F, b"m1")]
    assert link.deliver_due(7) == [(F, b"m2")]


def test_fifo_per_direction_even_with_shrinking_delay():
    link = Link("a-b")
    link.send(F, b"slow", now=0, delay=10)
    link.send(F, b"fast", now=1, delay=1)
    assert link.deliver_due(5) == []
    assert link.deliver_due(10) == [(F, b"slow"), (F, b"fast")]


def test_both_directions_interleave_by_time():
    link = Link("a-b", latency=1)
    link.send(F, b"down", now=0)
    link.send(B, b"up", now=0)
    link.send(F, b"later", now=3)
    assert link.deliver_due(1) == [(F, b"down"), (B, b"up")]
    assert link.queued(F) == [b"later"]
    assert link.queued(B) == []


def test_reconnect_arms_latch_until_handshake():
    link = Link("a-b")
    link.set_connected(False)
    link.set_connected(True)
    assert link.connected and not link.usable
    assert link.send(F, b"app") == SendStatus.NOT_CONNECTED
    assert link.send(F, b"hs", handshake=True) == SendStatus.ACCEPTED
    link.complete_handshake()
    assert link.usable
    assert link.send(F, b"app") == SendStatus.ACCEPTED


def test_latch_cannot_clear_while_down():
    link = Link("a-b")
    link.set_connected(False)
    link.complete_handshake()
    assert link.handshake_required
    assert link.send(F, b"hs", handshake=True) == SendStatus.NOT_CONNECTED


def test_latency_model_callable_and_counters():
    link = Link("a-b", latency=lambda now, payload: len(payload))
    link.send(F, b"abcd", now=2)
    assert link.next_due() == 6
    assert link.sent == [1, 0] and link.sent_bytes == [4, 0]


def test_enqueue_hook_sees_due_time():
    seen = []
    link = Link("a-b", latency=3)
    link.on_enqueue = seen.append
    link.send(B, b"x", now=4)
    assert seen == [7]
