"""Delivery harness for DEBUG channels.

Each endpoint keeps an in-flight queue standing in for bytes sitting in a
socket: frames the relay delivered but the endpoint has not processed yet.
Detaching drops the in-flight queue, so reconnection must replay it. The
oracle is brute force: after a final attach and drain, every endpoint must
have processed exactly the frames the other side sent, once, in order.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field
from typing import Iterator

from expd import errors
from expd.relay import CallbackSink, ChannelKind, ChannelRelay, Side


@dataclass
class Endpoint:
    side: Side
    inflight: list[tuple[int, bytes]] = field(default_factory=list)
    processed: list[bytes] = field(default_factory=list)
    last_seq: int = 0
    token: int | None = None
    generation: int = 0
    sent: list[bytes] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)

    def new_sink(self) -> CallbackSink:
        self.generation += 1
        gen = self.generation

        def on_frame(seq: int, payload: bytes) -> None:
            # frames for a superseded connection never reach this endpoint
            if gen == self.generation:
                self.inflight.append((seq, payload))

        return CallbackSink(on_frame)


class Harness:
    def __init__(self, capacity: int = 1024) -> None:
        self.relay = ChannelRelay(capacity_frames=capacity)
        self.cid = self.relay.open_channel("task", ChannelKind.DEBUG)
        self.ends = {Side.CLIENT: Endpoint(Side.CLIENT), Side.TASK: Endpoint(Side.TASK)}
        self.counter = itertools.count(1)

    def attach(self, side: Side) -> None:
        ep = self.ends[side]
        ep.inflight.clear()
        token, sent_high = self.relay.attach(self.cid, side, ep.last_seq, ep.new_sink())
        ep.token = token
        if sent_high != len(ep.sent):
            ep.violations.append(f"{side.value} sent_high {sent_high} but sent {len(ep.sent)}")

    def detach(self, side: Side) -> None:
        ep = self.ends[side]
        if ep.token is None:
            return
        self.relay.detach(self.cid, side, ep.token)
        ep.token = None
        ep.generation += 1
        ep.inflight.clear()

    def send(self, side: Side) -> None:
        ep = self.ends[side]
        payload = f"{side.value}-{next(self.counter)}".encode()
        if ep.token is None:
            self.attach(side)
        ep.sent.append(payload)
        seq = self.relay.send(self.cid, side, payload, ep.token)
        if seq != len(ep.sent):
            ep.violations.append(f"seq {seq} assigned to frame #{len(ep.sent)}")

    def process(self, side: Side) -> None:
        ep = self.ends[side]
        if not ep.inflight:
            return
        seq, payload = ep.inflight.pop(0)
        if seq != ep.last_seq + 1:
            ep.violations.append(f"{side.value} got seq {seq} after {ep.last_seq}")
        ep.last_seq = seq
        ep.processed.append(payload)

    def ack(self, side: Side) -> None:
        ep = self.ends[side]
        if ep.token is None:
            return
        self.relay.ack(self.cid, side, ep.last_seq, ep.token)

    def finish(self) -> list[str]:
        for side in Side:
            if self.ends[side].token is None:
                self.attach(side)
            while self.ends[side].inflight:
                self.process(side)
        problems = self.ends[Side.CLIENT].violations + self.ends[Side.TASK].violations
        for side in Side:
            got = self.ends[side].processed
            want = self.ends[side.other].sent
            if got != want:
                problems.append(f"{side.value} processed {got!r}, oracle expects {want!r}")
        return problems


def run_trace(ops: str) -> list[str]:
    """Ops on the client->task direction: S send, A attach task, D detach task, P process, K ack."""
    h = Harness()
    h.attach(Side.CLIENT)
    for op in ops:
        if op == "S":
            h.send(Side.CLIENT)
        elif op == "A":
            if h.ends[Side.TASK].token is None:
                h.attach(Side.TASK)
        elif op == "D":
            h.detach(Side.TASK)
        elif op == "P":
            h.process(Side.TASK)
        elif op == "K":
            h.ack(Side.TASK)
    return h.finish()


def enumerate_traces(max_frames: int = 6, max_other: int = 3) -> Iterator[str]:
    """Every interleaving of n sends (n <= max_frames) with up to max_other receiver ops."""
    for n in range(max_frames + 1):
        for k in range(max_other + 1):
            for positions in itertools.combinations(range(n + k), n):
                for others in itertools.product("ADPK", repeat=k):
                    it = iter(others)
                    yield "".join("S" if i in positions else next(it) for i in range(n + k))


def random_schedule(rng: random.Random, steps: int = 60) -> list[str]:
    """Both directions, both sides detaching, random acks; returns oracle violations."""
    h = Harness()
    for _ in range(steps):
        side = rng.choice(list(Side))
        op = rng.choices(["send", "attach", "detach", "process", "ack"], [4, 2, 2, 4, 2])[0]
        if op == "send":
            h.send(side)
        elif op == "attach":
            if h.ends[side].token is None or rng.random() < 0.3:
                # a second attach on an attached side is a newest-wins reconnect
                h.attach(side)
        elif op == "detach":
            h.detach(side)
        elif op == "process":
            h.process(side)
        else:
            h.ack(side)
    return h.finish()


def check_overflow_is_loud(capacity: int = 2) -> bool:
    h = Harness(capacity=capacity)
    for _ in range(capacity):
        h.send(Side.CLIENT)
    try:
        h.send(Side.CLIENT)
    except errors.BufferOverflow:
        return True
    return False
