"""Model checkpoint file: a text header followed by raw little-endian float64s.

Layout::

    feddrl-network 1
    input_shape <json list>
    layers <json list of layer descriptors>
    params <count>
    end
    <count * 8 bytes, '<f8'>
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import BinaryIO

import numpy as np

from feddrl.nn.network import Network

MAGIC = "feddrl-network 1"


def write_network(fh: BinaryIO, net: Network) -> None:
    header = [
        MAGIC,
        "input_shape " + json.dumps(list(net.input_shape)),
        "layers " + json.dumps(net.descriptors(), sort_keys=True),
        f"params {net.n_params}",
        "end",
    ]
    fh.write(("\n".join(header) + "\n").encode("ascii"))
    fh.write(net.params.astype("<f8").tobytes())


def read_network(fh: BinaryIO) -> Network:
    fields = {}
    first = fh.readline().decode("ascii").rstrip("\n")
    if first != MAGIC:
        raise ValueError(f"not a network checkpoint (header {first!r})")
    while True:
        line = fh.readline()
        if not line:
            raise ValueError("truncated checkpoint header")
        line = line.decode("ascii").rstrip("\n")
        if line == "end":
            break
        key, _, value = line.partition(" ")
        fields[key] = value
    count = int(fields["params"])
    raw = fh.read(count * 8)
    if len(raw) != count * 8:
        raise ValueError("truncated parameter block")
    net = Network.from_descriptors(json.loads(fields["layers"]), json.loads(fields["input_shape"]))
    if net.n_params != count:
        raise ValueError("parameter count does not match layer descriptors")
    net.set_params(np.frombuffer(raw, dtype="<f8"))
    return net


def save_network(path: str | Path, net: Network) -> None:
    with open(path, "wb") as fh:
        write_network(fh, net)


def load_network(path: str | Path) -> Network:
    with open(path, "rb") as fh:
        return read_network(fh)
