"""Bounded, ticket-ordered trajectory queue.

A producer first reserves a ticket (blocking while ``capacity`` tickets are
outstanding), then reads a parameter snapshot, generates data and finally
puts it under the ticket. The consumer receives items strictly in ticket
order. Because the snapshot is read after the reservation, at most
``capacity - 1`` earlier items can be consumed between the read and the
consumption of this item, which bounds staleness by ``capacity`` learner
versions regardless of how many producers run.
"""

import threading


class QueueClosed(Exception):
    pass


class TrajectoryQueue:
    def __init__(self, capacity=4):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self._cond = threading.Condition()
        self._items = {}
        self._next_ticket = 0
        self._next_out = 0
        self._closed = False
        self.produced = 0
        self.consumed = 0
        self.discarded = 0
        self.max_outstanding = 0

    @property
    def outstanding(self):
        return self._next_ticket - self._next_out

    def __len__(self):
        with self._cond:
            return sum(1 for v in self._items.values() if v is not _SKIP)

    @property
    def closed(self):
        return self._closed

    def reserve(self, timeout=None):
        """Block until a slot is free; returns a ticket."""
        with self._cond:
            if not self._cond.wait_for(lambda: self._closed or self.outstanding < self.capacity, timeout):
                raise TimeoutError("queue reservation timed out")
            if self._closed:
                raise QueueClosed()
            ticket = self._next_ticket
            self._next_ticket += 1
            self.max_outstanding = max(self.max_outstanding, self.outstanding)
            return ticket

    def put(self, ticket, item):
        with self._cond:
            if ticket in self._items or not self._next_out <= ticket < self._next_ticket:
                raise ValueError(f"invalid ticket {ticket}")
            self._items[ticket] = item
            self.produced += 1
            self._cond.notify_all()

    def cancel(self, ticket):
        """Give up a reservation (the data was discarded)."""
        with self._cond:
            self._items[ticket] = _SKIP
            self.discarded += 1
            self._advance()
            self._cond.notify_all()

    def _advance(self):
        while self._items.get(self._next_out) is _SKIP:
            del self._items[self._next_out]
            self._next_out += 1

    def get(self, timeout=None):
        """Next item in ticket order; raises :class:`QueueClosed` once closed and drained."""
        with self._cond:
            def ready():
                self._advance()
                return self._next_out in self._items or (self._closed and self._drained())

            if not self._cond.wait_for(ready, timeout):
                raise TimeoutError("queue get timed out")
            if self._next_out not in self._items:
                raise QueueClosed()
            item = self._items.pop(self._next_out)
            self._next_out += 1
            self.consumed += 1
            self._cond.notify_all()
            return item

    def _drained(self):
        # after close, reservations that were never filled will not arrive
        return all(t not in self._items for t in range(self._next_out, self._next_ticket))

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def pending(self):
        with self._cond:
            return sum(1 for v in self._items.values() if v is not _SKIP)


class _Skip:
    def __repr__(self):
        return "<skipped>"


_SKIP = _Skip()
