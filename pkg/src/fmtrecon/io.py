"""On-disk formats: volumes, stacks, measurements, weight matrices, checkpoints.

Array payloads are raw little-endian 32-bit floats next to a JSON sidecar.
JSON is always written with sorted keys so identical content gives identical
bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import torch

from .ddpm import NoiseSchedule, ShapeConfig, make_schedule
from .forward import Measurement, WeightMatrix
from .geometry import GridSpec, Volume
from .netmodel import NetConfig, OptState, UNet

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"FMTRCKPT"
TRIPLET_DTYPE = np.dtype([("row", "<i4"), ("col", "<i4"), ("val", "<f8")])


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".json", ".f32"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".json"), path.with_name(path.name + ".f32")


def _write_payload(path: Path, array: np.ndarray) -> None:
    np.ascontiguousarray(array, dtype="<f4").tofile(path)


def _read_payload(path: Path, count: int) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    if data.size != count:
        raise ValueError(f"{path}: expected {count} values, found {data.size}")
    return data


def write_volume(path, vol: Volume, extra: dict | None = None) -> Path:
    meta_path, raw_path = _paths(path)
    meta = {"format": "volume", "version": FORMAT_VERSION, "grid": vol.grid.to_dict(),
            "dtype": "<f4", "order": "x-fastest", "payload": raw_path.name}
    if extra:
        meta["extra"] = extra
    _write_payload(raw_path, vol.data)
    dump_json(meta, meta_path)
    return meta_path


def read_volume_meta(path) -> dict:
    return load_json(_paths(path)[0])


def read_volume(path) -> Volume:
    meta_path, _ = _paths(path)
    meta = load_json(meta_path)
    if meta.get("format") != "volume":
        raise ValueError(f"{meta_path} is not a volume file")
    grid = GridSpec.from_dict(meta["grid"])
    data = _read_payload(meta_path.parent / meta["payload"], grid.size)
    return Volume(grid, data.astype(np.float64))


def write_stack(path, stack: np.ndarray, role: str) -> Path:
    meta_path, raw_path = _paths(path)
    _write_payload(raw_path, stack)
    dump_json({"format": "stack", "version": FORMAT_VERSION, "role": role,
               "shape": list(stack.shape), "dtype": "<f4", "payload": raw_path.name}, meta_path)
    return meta_path


def read_stack(path) -> np.ndarray:
    meta_path, _ = _paths(path)
    meta = load_json(meta_path)
    shape = tuple(meta["shape"])
    return _read_payload(meta_path.parent / meta["payload"], int(np.prod(shape))).reshape(shape)


def write_measurement(path, meas: Measurement) -> Path:
    meta_path, raw_path = _paths(path)
    _write_payload(raw_path, meas.values)
    dump_json({"format": "measurement", "version": FORMAT_VERSION, "count": len(meas.values),
               "pairs": meas.pairs.tolist(), "noise": meas.noise, "dtype": "<f4",
               "payload": raw_path.name}, meta_path)
    return meta_path


def read_measurement(path) -> Measurement:
    meta_path, _ = _paths(path)
    meta = load_json(meta_path)
    values = _read_payload(meta_path.parent / meta["payload"], meta["count"]).astype(np.float64)
    return Measurement(values, np.array(meta["pairs"], dtype=np.int64).reshape(-1, 2), meta["noise"])


def write_weight_matrix(path, W: WeightMatrix) -> None:
    """Single-line JSON header, newline, then (row, col, value) binary triplets."""
    coo = W.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    trip = np.empty(coo.nnz, dtype=TRIPLET_DTYPE)
    trip["row"], trip["col"], trip["val"] = coo.row[order], coo.col[order], coo.data[order]
    header = {"format": "weight-triplets", "version": FORMAT_VERSION, "shape": list(W.shape),
              "nnz": int(coo.nnz), "grid": W.grid.to_dict(), "normalized": W.normalized,
              "pairs": W.pairs.tolist(), "triplet_dtype": "<i4,<i4,<f8"}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(trip.tobytes())


def read_weight_matrix(path) -> WeightMatrix:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        trip = np.frombuffer(fh.read(), dtype=TRIPLET_DTYPE)
    if header.get("format") != "weight-triplets" or len(trip) != header["nnz"]:
        raise ValueError(f"{path} is not a valid weight-matrix file")
    matrix = sp.csr_matrix((trip["val"].astype(np.float64), (trip["row"], trip["col"])),
                           shape=tuple(header["shape"]))
    return WeightMatrix(matrix, np.array(header["pairs"], dtype=np.int64).reshape(-1, 2),
                        GridSpec.from_dict(header["grid"]), header["normalized"])


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_json(state: dict) -> np.random.Generator:
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


def save_checkpoint(path, net: UNet, opt: OptState, schedule: NoiseSchedule, shape: ShapeConfig,
                    rng: np.random.Generator, meta: dict | None = None) -> None:
    """Binary checkpoint: magic, version, header length, JSON header, float32 tensors."""
    tensors, table, offset = [], [], 0
    for kind, source in (("param", dict(net.named_parameters())), ("m", opt.m), ("v", opt.v)):
        for name, tensor in source.items():
            arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
            table.append({"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset})
            tensors.append(arr.tobytes())
            offset += arr.nbytes
    header = {"version": FORMAT_VERSION, "schedule": schedule.to_dict(),
              "shape": {"num": shape.num, "b": shape.b, "n": shape.n}, "net": net.cfg.to_dict(),
              "optimizer": opt.hyper(), "rng": _rng_state_to_json(rng), "tensors": table,
              "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for chunk in tensors:
            fh.write(chunk)


def load_checkpoint(path):
    """Returns ``(net, opt, schedule, shape, rng, meta)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version, length = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + length])
    body = raw[20 + length:]
    net = UNet(NetConfig.from_dict(header["net"]))
    opt = OptState(**header["optimizer"])
    params = dict(net.named_parameters())
    with torch.no_grad():
        for entry in header["tensors"]:
            count = int(np.prod(entry["shape"]))
            arr = np.frombuffer(body, dtype="<f4", count=count, offset=entry["offset"]).reshape(entry["shape"])
            tensor = torch.from_numpy(arr.copy())
            if entry["kind"] == "param":
                params[entry["name"]].copy_(tensor)
            else:
                getattr(opt, entry["kind"])[entry["name"]] = tensor
    sched = header["schedule"]
    schedule = make_schedule(sched["T"], sched["beta_start"], sched["beta_end"])
    return net, opt, schedule, ShapeConfig(**header["shape"]), _rng_from_json(header["rng"]), header["meta"]


def write_slice_pngs(directory, vol: Volume, prefix: str = "slice") -> list[Path]:
    """One 8-bit grayscale PNG per z-slice, scaled by the volume maximum."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    peak = vol.data.max()
    scaled = np.clip(vol.data / peak, 0, 1) if peak > 0 else np.zeros_like(vol.data)
    pixels = np.rint(scaled * 255).astype(np.uint8)
    paths = []
    for k, img in enumerate(pixels):
        p = directory / f"{prefix}_{k:03d}.png"
        Image.fromarray(img).save(p)
        paths.append(p)
    return paths
