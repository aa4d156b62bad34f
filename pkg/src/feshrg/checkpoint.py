"""Binary checkpoint container for the RG iteration state.

Layout: an 8-byte magic tag carrying the format version, a little-endian
uint32 header length, a UTF-8 JSON header (grids, family structure,
energy-map history, array directory, metadata), then the concatenated raw
arrays as little-endian 64-bit floats (complex values as re/im pairs).
The header records a SHA-256 of the payload; loading verifies it, so a
successful round trip is bit-exact by construction.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from . import fock, kernels
from .errors import ConfigError
from .rg import EnergyFamily

__all__ = ["save_state", "load_state"]

MAGIC = b"FRGCKP01"


class _ArrayDir:
    """Accumulates named arrays and their byte offsets for the header."""

    def __init__(self):
        self.entries = []
        self.chunks = []

    def add(self, arr, kind):
        dtype = "<c16" if kind == "c" else "<f8"
        blob = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        self.entries.append({"shape": list(np.shape(arr)), "dtype": kind})
        self.chunks.append(blob)
        return len(self.entries) - 1

    def payload(self):
        return b"".join(self.chunks)


def _grid_header(grid):
    n_dirs = grid.directions.shape[0] if grid.directions.size else 6
    return {
        "J": int(grid.n_shells - 1),
        "rho_grid": float(grid.rho_grid),
        "k_max": float(grid.k_max),
        "angular_mode": grid.angular_mode,
        "n_dirs": int(n_dirs),
    }


def _seq_header(seq, adir):
    entries = []
    for (m, n), k in sorted(seq.kernels.items()):
        entries.append({
            "m": int(m), "n": int(n), "extend": k.extend,
            "atom_dim": int(k.atom_dim),
            "values": adir.add(k.values, "c"),
            "d_r": adir.add(k.d_r_values, "c"),
        })
    return {
        "xi": float(seq.xi), "M_max": int(seq.M_max),
        "atom_dim": int(seq.atom_dim),
        "tail_bound": float(seq.tail_bound),
        "entries": entries,
    }


def save_state(path, family, e_fams, z_iter, level, metadata=None):
    """Write one iteration checkpoint: the current kernel family, the
    energy-map history of the completed levels and the z iterates."""
    grid = family.center.grid
    adir = _ArrayDir()
    header = {
        "version": 1,
        "level": int(level),
        "metadata": metadata or {},
        "grid": _grid_header(grid),
        "r_grid": adir.add(family.center.r_grid, "f"),
        "r_z": float(family.r_z),
        "family": [_seq_header(s, adir)
                   for s in [family.center] + list(family.samples)],
        "e_fams": [{
            "r_z": float(e.r_z), "rho": float(e.rho),
            "center": [e.center_value.real, e.center_value.imag],
            "coeffs": adir.add(e.coeffs, "c"),
        } for e in e_fams],
        "z_iter": adir.add(np.asarray(z_iter, dtype=complex), "c"),
        "arrays": None,
    }
    payload = adir.payload()
    header["arrays"] = adir.entries
    header["sha256"] = hashlib.sha256(payload).hexdigest()
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def _read_arrays(raw, entries):
    out = []
    off = 0
    for ent in entries:
        dtype = np.dtype("<c16" if ent["dtype"] == "c" else "<f8")
        count = int(np.prod(ent["shape"])) if ent["shape"] else 1
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(raw[off:off + nbytes], dtype=dtype)
        out.append(arr.reshape(ent["shape"]).copy())
        off += nbytes
    if off != len(raw):
        raise ConfigError("checkpoint payload length mismatch")
    return out


def _seq_from_header(h, grid, r_grid, arrays):
    ks = {}
    for ent in h["entries"]:
        m, n = ent["m"], ent["n"]
        ks[(m, n)] = kernels.Kernel(
            m, n, grid, r_grid, arrays[ent["values"]], arrays[ent["d_r"]],
            atom_dim=ent["atom_dim"], extend=ent["extend"])
    return kernels.KernelSeq(grid, r_grid, h["xi"], h["M_max"], kernels=ks,
                             tail_bound=h["tail_bound"],
                             atom_dim=h["atom_dim"])


def load_state(path):
    """Read a checkpoint; returns the resume mapping for iterate_to_ground
    (keys level, family, e_fams, z_iter) plus grid, r_grid and metadata."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise ConfigError(f"not a checkpoint file: bad magic {raw[:8]!r}")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    if header.get("version") != 1:
        raise ConfigError(
            f"unsupported checkpoint version {header.get('version')}")
    payload = raw[12 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ConfigError("checkpoint payload hash mismatch")
    arrays = _read_arrays(payload, header["arrays"])

    g = header["grid"]
    grid = fock.build_grid(g["J"], g["rho_grid"], g["k_max"],
                           g["angular_mode"], g["n_dirs"])
    r_grid = arrays[header["r_grid"]]
    seqs = [_seq_from_header(h, grid, r_grid, arrays)
            for h in header["family"]]
    family = kernels.ZFamily(seqs[0], seqs[1:], header["r_z"])
    e_fams = [EnergyFamily(arrays[e["coeffs"]], e["r_z"], e["rho"],
                           complex(e["center"][0], e["center"][1]))
              for e in header["e_fams"]]
    return {
        "level": header["level"],
        "family": family,
        "e_fams": e_fams,
        "z_iter": list(arrays[header["z_iter"]]),
        "grid": grid,
        "r_grid": r_grid,
        "metadata": header["metadata"],
    }
