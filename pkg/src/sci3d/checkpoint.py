"""Binary checkpoint format.

Layout (all integers little-endian):

    magic  b"SCK1"
    u8     format version (1)
    then four length-prefixed sections, each a 4-byte tag + u64 length:
        CONF  json: stage, epoch, config dict, sha256 of the config
        PARA  named parameter arrays
        OPTI  named optimizer-state arrays
        RNGS  opaque rng bytes

Named arrays are packed as u32 count, then per entry: u16 name length,
name utf8, u8 dtype code, u8 ndim, u64 dims, raw bytes. Loads validate
magic, version, section bounds, and the embedded config hash; any
truncation or mismatch raises ValueError without returning partial state.
"""

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np
import torch

MAGIC = b"SCK1"
VERSION = 1

STAGE_PRETRAIN = "2d-pretrain"
STAGE_FINETUNE = "3d-finetune"
STAGES = (STAGE_PRETRAIN, STAGE_FINETUNE)

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("<u1"): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    stage: str
    epoch: int  # completed epochs
    config: dict
    params: dict  # name -> np.ndarray
    optim: dict  # name -> np.ndarray
    rng_state: bytes = b""


def config_hash(config):
    """sha256 hex digest of the canonical json form of a config dict."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _pack_arrays(arrays):
    out = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        # asarray with order keeps 0-d scalars 0-d; ascontiguousarray would
        # promote them to shape (1,)
        arr = np.asarray(arr, order="C")
        code = _DTYPE_CODES.get(arr.dtype.newbyteorder("<"))
        if code is None:
            raise ValueError(f"unsupported dtype {arr.dtype} for array {name!r}")
        nm = name.encode("utf-8")
        out.append(struct.pack("<H", len(nm)))
        out.append(nm)
        out.append(struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n):
        if self.off + n > len(self.blob):
            raise ValueError(f"{self.path}: truncated checkpoint file")
        chunk = self.blob[self.off : self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _unpack_arrays(blob, path):
    r = _Reader(blob, path)
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise ValueError(f"{path}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}Q")
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize
        arrays[name] = (
            np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape).copy()
        )
    if r.off != len(blob):
        raise ValueError(f"{path}: trailing bytes in array section")
    return arrays


def save_checkpoint(ckpt, path):
    if ckpt.stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {ckpt.stage!r}")
    conf = json.dumps(
        {
            "stage": ckpt.stage,
            "epoch": int(ckpt.epoch),
            "config": ckpt.config,
            "config_hash": config_hash(ckpt.config),
        }
    ).encode("utf-8")
    sections = [
        (b"CONF", conf),
        (b"PARA", _pack_arrays(ckpt.params)),
        (b"OPTI", _pack_arrays(ckpt.optim)),
        (b"RNGS", bytes(ckpt.rng_state)),
    ]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", VERSION))
        for tag, payload in sections:
            f.write(tag)
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)


def load_checkpoint(path):
    blob = open(path, "rb").read()
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = r.unpack("<B")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    sections = {}
    for expected in (b"CONF", b"PARA", b"OPTI", b"RNGS"):
        tag = r.take(4)
        if tag != expected:
            raise ValueError(f"{path}: expected section {expected!r}, found {tag!r}")
        (length,) = r.unpack("<Q")
        sections[tag] = r.take(length)
    if r.off != len(blob):
        raise ValueError(f"{path}: trailing bytes after final section")

    try:
        conf = json.loads(sections[b"CONF"].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt config section ({exc})")
    for key in ("stage", "epoch", "config", "config_hash"):
        if key not in conf:
            raise ValueError(f"{path}: config section missing {key!r}")
    if conf["stage"] not in STAGES:
        raise ValueError(f"{path}: unknown stage {conf['stage']!r}")
    if config_hash(conf["config"]) != conf["config_hash"]:
        raise ValueError(f"{path}: config hash mismatch, file is corrupt")

    return Checkpoint(
        stage=conf["stage"],
        epoch=int(conf["epoch"]),
        config=conf["config"],
        params=_unpack_arrays(sections[b"PARA"], path),
        optim=_unpack_arrays(sections[b"OPTI"], path),
        rng_state=sections[b"RNGS"],
    )


def params_from_module(module):
    """Snapshot a module's state dict as named numpy arrays, dtypes kept."""
    out = {}
    for name, tensor in module.state_dict().items():
        out[name] = tensor.detach().cpu().numpy().copy()
    return out


def load_params_into_module(module, params):
    """Load named arrays into a module, strictly.

    Name sets must match exactly and every shape must agree; violations
    raise ValueError listing the offending names.
    """
    state = module.state_dict()
    missing = sorted(set(state) - set(params))
    unexpected = sorted(set(params) - set(state))
    if missing or unexpected:
        raise ValueError(
            f"parameter name mismatch: missing {missing}, unexpected {unexpected}"
        )
    bad_shapes = [
        name
        for name in state
        if tuple(state[name].shape) != tuple(np.asarray(params[name]).shape)
    ]
    if bad_shapes:
        raise ValueError(f"parameter shape mismatch at {bad_shapes}")
    converted = {
        name: torch.from_numpy(np.asarray(arr, order="C").copy()).to(state[name].dtype)
        for name, arr in params.items()
    }
    module.load_state_dict(converted)
