"""Length-prefixed trajectory log for replay debugging.

Each record is an 8-byte little-endian length followed by that many bytes
of an ``.npz`` archive holding the trajectory arrays.
"""

import io
import struct

import numpy as np

from staclab.vtrace import Trajectory

_HEADER = struct.Struct("<Q")
_FIELDS = ("observations", "actions", "rewards", "behavior_logp", "dones", "versions")


def encode(traj):
    buf = io.BytesIO()
    np.savez(buf, **{f: getattr(traj, f) for f in _FIELDS})
    payload = buf.getvalue()
    return _HEADER.pack(len(payload)) + payload


def decode(payload):
    data = np.load(io.BytesIO(payload))
    return Trajectory(**{f: data[f] for f in _FIELDS})


class TrajectoryLog:
    def __init__(self, path, mode="wb"):
        self._fh = open(path, mode)

    def write(self, traj):
        self._fh.write(encode(traj))
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_log(path):
    """Yield trajectories; a truncated final record is ignored."""
    with open(path, "rb") as fh:
        while True:
            head = fh.read(_HEADER.size)
            if len(head) < _HEADER.size:
                return
            (size,) = _HEADER.unpack(head)
            payload = fh.read(size)
            if len(payload) < size:
                return
            yield decode(payload)
