"""Training loop, densification orchestration, and checkpointing.

Training has three phases: plain optimization until warmup_end, a
densification phase in [densify_start, densify_end] where statistics are
collected (already from stats_start) and anchors are grown/pruned every
densify_interval iterations, and pure optimization afterwards with the
anchor structure frozen. Each iteration renders one training camera at its
own integer period, applies the hybrid loss, backpropagates, and steps Adam
on every parameter group.

Checkpoints are a single binary file: magic "CGS1", length-prefixed named
sections, trailing CRC-32, all tensors little-endian with floats widened to
64 bit. Saving is atomic (write-temp-then-rename) and save -> load -> save
reproduces the file byte for byte.

Reproducibility: the only randomness is a PCG64 generator seeded from the
config; with --deterministic (and a fixed BLAS thread count) two runs
produce bitwise-identical checkpoints.
"""

from __future__ import annotations

import json
import os
import struct
import sys
import zlib
from dataclasses import dataclass, fields, replace

import numpy as np

from . import optim, raster, scaffold as scaffold_mod
from .dataio import MultiPeriodDataset
from .decoder import DecoderWeights, MlpWeights, init_decoder_weights
from .errors import (ConfigInvalid, CorruptChecksum, EmptyDataset, IoError,
                     VersionMismatch)
from .optim import LrSchedule, ParamGroup, adam_step, hybrid_loss, psnr, ssim
from .scaffold import (AnchorScaffold, accumulate_stats, apply_keep_mask,
                       grow_anchors, init_scaffold, prune_keep_mask,
                       voxel_size_for_points)

CHECKPOINT_MAGIC = b"CGS1"


@dataclass
class TrainConfig:
    """All trainer knobs; addressable one-per-line in key=value config files."""

    d_b: int = 16
    d_v: int = 16
    d_g: int = 32
    K: int = 10
    d_f: int = 64
    total_iters: int = 40000
    warmup_end: int = 500
    densify_start: int = 1500
    densify_end: int = 20000
    densify_interval: int = 100
    stats_start: int = 500
    stats_end: int = 1500
    tau_g: float = 0.0002
    loss_lambda: float = 0.8
    voxel_fraction: float = 0.001
    voxel_size: float = 0.0  # absolute override; 0 derives from voxel_fraction
    min_opacity: float = 0.005
    min_visibility: int = 0  # 0 = half the densify interval
    prune_min_samples: int = 0  # 0 = half the densify interval
    seed: int = 0
    deterministic: bool = False
    disable_base: bool = False
    disable_var: bool = False
    disable_global: bool = False
    background: tuple = (0.0, 0.0, 0.0)
    randomize_background: bool = False
    balance_periods: bool = False
    dtype: str = "f64"  # parameter storage: "f64" | "f32"
    opacity_bias: float = 0.1
    log_interval: int = 10
    checkpoint_interval: int = 0  # 0 = final checkpoint only
    eval_interval: int = 0  # 0 = no mid-training eval

    def validate(self):
        if min(self.d_b, self.d_v, self.d_g, self.d_f, self.K) < 1:
            raise ConfigInvalid("feature dimensions and K must be positive")
        if not (0 <= self.warmup_end <= self.densify_start <= self.densify_end <= self.total_iters):
            raise ConfigInvalid("need warmup_end <= densify_start <= densify_end <= total_iters")
        if not (0 <= self.stats_start <= self.stats_end):
            raise ConfigInvalid("stats window is inverted")
        if self.densify_interval < 1:
            raise ConfigInvalid("densify_interval must be positive")
        if not (0.0 <= self.loss_lambda <= 1.0):
            raise ConfigInvalid("loss_lambda must lie in [0, 1]")
        if self.voxel_size < 0 or self.voxel_fraction <= 0:
            raise ConfigInvalid("voxel sizing must be positive")
        if self.dtype not in ("f64", "f32"):
            raise ConfigInvalid(f"unknown dtype {self.dtype!r}")
        if len(self.background) != 3 or any(not (0 <= b <= 1) for b in self.background):
            raise ConfigInvalid("background must be three values in [0, 1]")
        return self

    @staticmethod
    def desk_preset(**overrides):
        """Schedule scaled down from the full 40k run to workstation scale."""
        cfg = TrainConfig(
            total_iters=5000, warmup_end=100,
            stats_start=100, stats_end=300,
            densify_start=300, densify_end=2500, densify_interval=100,
            voxel_fraction=0.04,
        )
        return replace(cfg, **overrides).validate()

    @property
    def ablate(self):
        return (self.disable_base, self.disable_var, self.disable_global)

    def grow_visibility(self):
        return self.min_visibility or max(1, self.densify_interval // 2)

    def prune_samples(self):
        return self.prune_min_samples or max(1, self.densify_interval // 2)


_CONFIG_FIELDS = {f.name: f for f in fields(TrainConfig)}


def config_to_text(cfg):
    lines = []
    for name in _CONFIG_FIELDS:
        value = getattr(cfg, name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, tuple):
            text = ",".join(repr(float(v)) for v in value)
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{name}={text}")
    return "\n".join(lines) + "\n"


def config_from_text(text, base=None):
    """Parse flat key=value lines; unknown keys are hard errors."""
    cfg = base or TrainConfig()
    values = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigInvalid(f"line {ln}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _CONFIG_FIELDS:
            raise ConfigInvalid(f"unknown config key {key!r}")
        ftype = _CONFIG_FIELDS[key].type
        try:
            if ftype == "bool":
                if val.lower() not in ("true", "false", "0", "1"):
                    raise ValueError(f"bad boolean {val!r}")
                values[key] = val.lower() in ("true", "1")
            elif ftype == "int":
                values[key] = int(val)
            elif ftype == "float":
                values[key] = float(val)
            elif ftype == "tuple":
                values[key] = tuple(float(v) for v in val.split(","))
            else:
                values[key] = val
        except ValueError as exc:
            raise ConfigInvalid(f"config key {key}: {exc}") from exc
    return replace(cfg, **values)


class TrainState:
    """Everything that evolves during training."""

    def __init__(self, config, T, scaffold, global_g, weights, groups, rng,
                 spatial_lr_scale, iteration=0):
        self.config = config
        self.T = T
        self.scaffold = scaffold
        self.global_g = global_g
        self.weights = weights
        self.groups = groups
        self.rng = rng
        self.spatial_lr_scale = spatial_lr_scale
        self.iteration = iteration
        self._epoch_queue = []

    def param_dtype(self):
        return np.float32 if self.config.dtype == "f32" else np.float64


def _build_groups(config, scaffold, global_g, weights, spatial_lr_scale):
    total = config.total_iters
    sls = spatial_lr_scale

    def sched(initial, final=None, kind="exp"):
        return LrSchedule(initial, initial if final is None else final, total,
                          kind if final is not None else "const")

    groups = {
        "offsets": ParamGroup("offsets", [scaffold.offsets],
                              sched(0.01 * sls, 0.0001 * sls), row_state=True),
        "offset_scale": ParamGroup("offset_scale", [scaffold.offset_scale],
                                   sched(0.007), row_state=True),
        "shape_scale": ParamGroup("shape_scale", [scaffold.shape_scale],
                                  sched(0.007), row_state=True),
        "f_base": ParamGroup("f_base", [scaffold.f_base], sched(0.0075), row_state=True),
        "f_var": ParamGroup("f_var", [scaffold.f_var], sched(0.002), row_state=True),
        "global_g": ParamGroup("global_g", [global_g], sched(0.0075)),
        "mlp_opacity": ParamGroup("mlp_opacity", weights.opacity.arrays(),
                                  sched(0.002, 0.00002)),
        "mlp_covariance": ParamGroup("mlp_covariance", weights.covariance.arrays(),
                                     sched(0.004)),
        "mlp_color": ParamGroup("mlp_color", weights.color.arrays(),
                                sched(0.008, 0.00005)),
    }
    return groups


_ROW_GROUP_ARRAYS = {
    "offsets": "offsets",
    "offset_scale": "offset_scale",
    "shape_scale": "shape_scale",
    "f_base": "f_base",
    "f_var": "f_var",
}


def init_state(config, dataset):
    config.validate()
    if not dataset.cameras:
        raise EmptyDataset("dataset has no cameras")
    per_period_images = [0] * dataset.T
    for cam in dataset.cameras:
        per_period_images[cam.period] += 1
    if min(per_period_images) == 0:
        raise EmptyDataset("every period needs at least one image")

    union = dataset.union_points()
    voxel = config.voxel_size or voxel_size_for_points(union, config.voxel_fraction)
    scaffold = init_scaffold(dataset.per_period_points, voxel,
                             d_b=config.d_b, d_v=config.d_v, K=config.K)

    centers = np.stack([cam.center() for cam in dataset.cameras])
    radius = float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max())
    spatial_lr_scale = 1.1 * (radius if radius > 0 else 1.0)

    rng = np.random.Generator(np.random.PCG64(config.seed))
    dtype = np.float32 if config.dtype == "f32" else np.float64
    weights = init_decoder_weights(rng, config.d_b + config.d_v + config.d_g + 3,
                                   config.d_f, config.K, config.opacity_bias, dtype)
    global_g = np.zeros((dataset.T, config.d_g), dtype=dtype)
    if dtype is np.float32:
        for name in _ROW_GROUP_ARRAYS.values():
            setattr(scaffold, name, getattr(scaffold, name).astype(np.float32))

    groups = _build_groups(config, scaffold, global_g, weights, spatial_lr_scale)
    return TrainState(config, dataset.T, scaffold, global_g, weights, groups,
                      rng, spatial_lr_scale)


def _stats_enabled(config, iteration):
    in_window = config.stats_start <= iteration < config.stats_end
    in_densify = config.densify_start <= iteration <= config.densify_end
    return in_window or in_densify


def _densify_due(config, iteration):
    return (config.densify_start <= iteration <= config.densify_end
            and (iteration - config.densify_start) % config.densify_interval == 0)


def render_from_state(state, camera, t, options=None):
    return raster.render(
        state.scaffold, camera, t, state.weights, state.global_g,
        background=np.asarray(state.config.background, dtype=np.float64),
        options=options or raster.DEFAULT_OPTIONS,
        ablate=state.config.ablate)


def training_step(state, camera, image):
    """One forward/backward/update cycle at the camera's own period."""
    cfg = state.config
    background = np.asarray(cfg.background, dtype=np.float64)
    if cfg.randomize_background:
        background = state.rng.uniform(0.0, 1.0, size=3)
    graph = raster.render(state.scaffold, camera, camera.period, state.weights,
                          state.global_g, background=background, ablate=cfg.ablate)
    report, grad_image = hybrid_loss(graph.image, image, cfg.loss_lambda)
    grads = raster.render_backward(graph, grad_image)

    if _stats_enabled(cfg, state.iteration):
        accumulate_stats(state.scaffold, graph, grads)

    grad_map = {
        "offsets": [grads.offsets],
        "offset_scale": [grads.offset_scale],
        "shape_scale": [grads.shape_scale],
        "f_base": [grads.f_base],
        "f_var": [grads.f_var],
        "global_g": [grads.g],
        "mlp_opacity": grads.opacity_mlp.arrays(),
        "mlp_covariance": grads.covariance_mlp.arrays(),
        "mlp_color": grads.color_mlp.arrays(),
    }
    frozen = set()
    if cfg.disable_base:
        frozen.add("f_base")
    if cfg.disable_var:
        frozen.add("f_var")
    if cfg.disable_global:
        frozen.add("global_g")
    for name, group in state.groups.items():
        if name in frozen:
            continue
        adam_step(group, grad_map[name], state.iteration)

    state.iteration += 1
    return report


def _resize_row_groups_after_grow(state, added):
    if added == 0:
        return
    for name, attr in _ROW_GROUP_ARRAYS.items():
        group = state.groups[name]
        param = getattr(state.scaffold, attr)
        pad = np.zeros((added,) + param.shape[1:], dtype=np.float64)
        group.params = [param]
        group.m = [np.concatenate([group.m[0], pad], axis=0)]
        group.v = [np.concatenate([group.v[0], pad.copy()], axis=0)]
        group.step = [np.concatenate([group.step[0], np.zeros(added, dtype=np.int64)])]


def _slice_row_groups(state, keep):
    for name, attr in _ROW_GROUP_ARRAYS.items():
        group = state.groups[name]
        group.params = [getattr(state.scaffold, attr)]
        group.m = [group.m[0][keep]]
        group.v = [group.v[0][keep]]
        group.step = [group.step[0][keep]]


def densify(state):
    """One grow + prune event; keeps optimizer state aligned with the scaffold."""
    cfg = state.config
    added = grow_anchors(state.scaffold, cfg.tau_g, cfg.grow_visibility())
    _resize_row_groups_after_grow(state, added)
    keep = prune_keep_mask(state.scaffold, cfg.min_opacity, cfg.prune_samples())
    removed = apply_keep_mask(state.scaffold, keep)
    _slice_row_groups(state, keep if removed else np.ones(len(state.scaffold), dtype=bool))
    return added, removed


def _next_camera(state, dataset):
    if not state._epoch_queue:
        cams = dataset.train_cameras()
        if state.config.balance_periods:
            by_period = {}
            for i, cam in enumerate(cams):
                by_period.setdefault(cam.period, []).append(i)
            queues = [list(state.rng.permutation(ids)) for _, ids in sorted(by_period.items())]
            order = []
            while any(queues):
                for q in queues:
                    if q:
                        order.append(q.pop())
            state._epoch_queue = order[::-1]
        else:
            state._epoch_queue = list(state.rng.permutation(len(cams)))
    cams = dataset.train_cameras()
    return cams[state._epoch_queue.pop()]


def evaluate(state, dataset):
    """Held-out metrics per period and averaged across periods."""
    per_period = {}
    for cam in dataset.test_cameras():
        graph = render_from_state(state, cam, cam.period)
        gt = dataset.images[cam.id]
        entry = per_period.setdefault(cam.period, {"psnr": [], "ssim": []})
        entry["psnr"].append(psnr(graph.image, gt))
        entry["ssim"].append(ssim(graph.image, gt)[0])
    summary = {"per_period": {}, "psnr_mean": 0.0, "ssim_mean": 0.0}
    for t in sorted(per_period):
        summary["per_period"][str(t)] = {
            "psnr": float(np.mean(per_period[t]["psnr"])),
            "ssim": float(np.mean(per_period[t]["ssim"])),
            "count": len(per_period[t]["psnr"]),
        }
    if summary["per_period"]:
        summary["psnr_mean"] = float(np.mean([v["psnr"] for v in summary["per_period"].values()]))
        summary["ssim_mean"] = float(np.mean([v["ssim"] for v in summary["per_period"].values()]))
    return summary


def train(config, dataset, out_path=None, log_path=None, log_stream=None):
    """Run the full training schedule; returns the final TrainState.

    Writes a checkpoint to out_path (and every checkpoint_interval
    iterations) and appends line-delimited JSON metric records to log_path.
    """
    state = init_state(config, dataset)
    log_file = open(log_path, "w") if log_path else None

    def log(record):
        line = json.dumps(record, sort_keys=True)
        if log_file:
            log_file.write(line + "\n")
        if log_stream:
            print(line, file=log_stream)

    try:
        for it in range(config.total_iters):
            cam = _next_camera(state, dataset)
            report = training_step(state, cam, dataset.images[cam.id])
            densified = None
            if _densify_due(config, it):
                densified = densify(state)
            if config.log_interval and (it % config.log_interval == 0 or densified):
                record = {"iter": it, "total": report.total, "l1": report.l1,
                          "ssim": report.ssim, "anchors": len(state.scaffold)}
                if densified:
                    record["grown"], record["pruned"] = densified
                log(record)
            if config.eval_interval and it and it % config.eval_interval == 0:
                log({"iter": it, "eval": evaluate(state, dataset)})
            if out_path and config.checkpoint_interval and it and it % config.checkpoint_interval == 0:
                save_checkpoint(state, out_path)
        if log_file or log_stream:
            log({"iter": config.total_iters, "eval": evaluate(state, dataset)})
        if out_path:
            save_checkpoint(state, out_path)
    finally:
        if log_file:
            log_file.close()
    return state


# ---------------------------------------------------------------------------
# Checkpoint format

_DTYPE_CODES = {0: np.float64, 1: np.int64}


def _encode_tensor(arr):
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        arr = arr.astype(np.float64)
        code = 0
    elif arr.dtype.kind in "iub":
        arr = arr.astype(np.int64)
        code = 1
    else:
        raise ValueError(f"cannot encode dtype {arr.dtype}")
    header = struct.pack("<BB", code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    if sys.byteorder == "big":  # stored little-endian
        arr = arr.byteswap()
    return header + dims + arr.tobytes(order="C")


def _decode_tensor(payload):
    code, ndim = struct.unpack_from("<BB", payload, 0)
    shape = struct.unpack_from(f"<{ndim}Q", payload, 2) if ndim else ()
    offset = 2 + 8 * ndim
    arr = np.frombuffer(payload, dtype=_DTYPE_CODES[code], offset=offset).reshape(shape)
    if sys.byteorder == "big":
        arr = arr.byteswap()
    return arr.copy()


def _checkpoint_sections(state):
    cfg = state.config
    meta = {
        "T": state.T,
        "iteration": state.iteration,
        "anchors": len(state.scaffold),
        "spatial_lr_scale": state.spatial_lr_scale,
        "voxel_size": state.scaffold.voxel_size,
    }
    rng_state = state.rng.bit_generator.state
    rng_blob = json.dumps({
        "state": str(rng_state["state"]["state"]),
        "inc": str(rng_state["state"]["inc"]),
        "has_uint32": rng_state["has_uint32"],
        "uinteger": rng_state["uinteger"],
    }, sort_keys=True)

    sections = [
        ("config", config_to_text(cfg).encode()),
        ("meta", json.dumps(meta, sort_keys=True).encode()),
        ("rng", rng_blob.encode()),
        ("scaffold.positions", _encode_tensor(state.scaffold.positions)),
        ("scaffold.box_min", _encode_tensor(state.scaffold.box_min)),
        ("scaffold.f_base", _encode_tensor(state.scaffold.f_base)),
        ("scaffold.f_var", _encode_tensor(state.scaffold.f_var)),
        ("scaffold.offsets", _encode_tensor(state.scaffold.offsets)),
        ("scaffold.offset_scale", _encode_tensor(state.scaffold.offset_scale)),
        ("scaffold.shape_scale", _encode_tensor(state.scaffold.shape_scale)),
        ("global.g", _encode_tensor(state.global_g)),
    ]
    for head_name in ("opacity", "color", "covariance"):
        head = getattr(state.weights, head_name)
        for arr_name, arr in zip(("W1", "b1", "W2", "b2"), head.arrays()):
            sections.append((f"decoder.{head_name}.{arr_name}", _encode_tensor(arr)))
    for name in sorted(state.groups):
        group = state.groups[name]
        for i in range(len(group.params)):
            sections.append((f"adam.{name}.{i}.m", _encode_tensor(group.m[i])))
            sections.append((f"adam.{name}.{i}.v", _encode_tensor(group.v[i])))
            step = group.step[i]
            sections.append((f"adam.{name}.{i}.step",
                             _encode_tensor(step if group.row_state else np.int64(step))))
    return sections


def save_checkpoint(state, path):
    blob = bytearray(CHECKPOINT_MAGIC)
    for name, payload in _checkpoint_sections(state):
        encoded = name.encode()
        blob += struct.pack("<I", len(encoded)) + encoded
        blob += struct.pack("<Q", len(payload)) + payload
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(str(exc)) from exc


def _read_sections(path):
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if len(blob) < len(CHECKPOINT_MAGIC) + 4:
        raise CorruptChecksum("file too short to be a checkpoint")
    if blob[:3] != CHECKPOINT_MAGIC[:3]:
        raise CorruptChecksum("not a checkpoint file (bad magic)")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise VersionMismatch(f"unsupported checkpoint version {blob[3:4]!r}")
    body, tail = blob[:-4], blob[-4:]
    if zlib.crc32(body) != struct.unpack("<I", tail)[0]:
        raise CorruptChecksum("CRC-32 mismatch")
    sections = {}
    pos = 4
    while pos < len(body):
        try:
            (name_len,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + name_len].decode()
            pos += name_len
            (payload_len,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            sections[name] = body[pos:pos + payload_len]
            pos += payload_len
        except struct.error as exc:
            raise CorruptChecksum(f"malformed section table: {exc}") from exc
    return sections


def load_checkpoint(path):
    """Rebuild a TrainState from a checkpoint file."""
    sections = _read_sections(path)
    config = config_from_text(sections["config"].decode()).validate()
    meta = json.loads(sections["meta"].decode())
    dtype = np.float32 if config.dtype == "f32" else np.float64

    def tensor(name, cast=True):
        arr = _decode_tensor(sections[name])
        return arr.astype(dtype) if cast and arr.dtype.kind == "f" else arr

    positions = _decode_tensor(sections["scaffold.positions"])
    box_min = _decode_tensor(sections["scaffold.box_min"])
    voxel = meta["voxel_size"]
    occupied = {}
    for i, p in enumerate(positions):
        occupied[tuple(np.floor((p - box_min) / voxel).astype(np.int64))] = i
    scaffold = AnchorScaffold(
        positions=positions,
        f_base=tensor("scaffold.f_base"),
        f_var=tensor("scaffold.f_var"),
        offsets=tensor("scaffold.offsets"),
        offset_scale=tensor("scaffold.offset_scale"),
        shape_scale=tensor("scaffold.shape_scale"),
        voxel_size=voxel, box_min=box_min, occupied=occupied,
    )
    global_g = tensor("global.g")
    heads = {}
    for head_name in ("opacity", "color", "covariance"):
        heads[head_name] = MlpWeights(*[
            tensor(f"decoder.{head_name}.{arr_name}") for arr_name in ("W1", "b1", "W2", "b2")])
    weights = DecoderWeights(**heads)

    groups = _build_groups(config, scaffold, global_g, weights, meta["spatial_lr_scale"])
    for name in sorted(groups):
        group = groups[name]
        for i in range(len(group.params)):
            group.m[i] = _decode_tensor(sections[f"adam.{name}.{i}.m"])
            group.v[i] = _decode_tensor(sections[f"adam.{name}.{i}.v"])
            step = _decode_tensor(sections[f"adam.{name}.{i}.step"])
            group.step[i] = step if group.row_state else int(step)

    rng_meta = json.loads(sections["rng"].decode())
    rng = np.random.Generator(np.random.PCG64(0))
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(rng_meta["state"]), "inc": int(rng_meta["inc"])},
        "has_uint32": rng_meta["has_uint32"],
        "uinteger": rng_meta["uinteger"],
    }
    return TrainState(config, meta["T"], scaffold, global_g, weights, groups, rng,
                      meta["spatial_lr_scale"], iteration=meta["iteration"])
