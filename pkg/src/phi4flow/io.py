"""Config files, binary checkpoint and sample formats, provenance-stamped CSV."""

from __future__ import annotations

import dataclasses
import hashlib
import io as _io
import json
import struct
from pathlib import Path

import jax.numpy as jnp
import numpy as np
import yaml

from phi4flow.integrator import IntegratorConfig
from phi4flow.lattice import ActionParams, ContractError, LatticeSpec, SampleBatch
from phi4flow.operator_flow import NET_NAMES, ArchConfig, ModelParams
from phi4flow.training import LatticeSchedule, TrainConfig

CKPT_MAGIC = b"LFCKPT01"
SAMPLE_MAGIC = b"LFSAMP01"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config documents
# ---------------------------------------------------------------------------

_SCHEMA = {
    "lattice": {"D": int, "L": float},
    "action": {"m2": float, "g": float},
    "base_m0_squared": float,
    "schedule": {"kind": str, "sizes": list, "stages": list},
    "training": {
        "total_steps": int, "batch_size": int, "learning_rate": float, "b1": float, "b2": float, "eps": float,
        "seed": int, "eval_every": int, "eval_samples": int, "eval_sizes": list, "checkpoint_every": int,
    },
    "integrator": {"num_steps": int, "scheme": str},
    "arch": {
        "channels": int, "time_dim": int, "embed_hidden": list, "kernel_hidden": list, "transformer_hidden": list,
        "time_hidden": list, "activation": str, "measure_factor": bool, "conv": str,
    },
    "mcmc": {"proposal_width": float, "burn_in": int, "thin": int, "seed": int},
}

_REQUIRED = [("lattice", "D"), ("lattice", "L"), ("action", "m2"), ("action", "g")]


def _key_lines(text: str) -> dict[tuple, int]:
    """Map of key path -> 1-based source line, for diagnostics."""
    lines = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = path + (k.value,)
                lines[p] = k.start_mark.line + 1
                walk(v, p)

    try:
        walk(yaml.compose(text), ())
    except yaml.YAMLError:
        pass
    return lines


def _validate(doc, schema, path, lines):
    if not isinstance(doc, dict):
        raise ConfigError(f"{'.'.join(path) or '<root>'}: expected a mapping")
    for key, value in doc.items():
        p = path + (key,)
        where = f"line {lines.get(p, '?')}: {'.'.join(p)}"
        if key not in schema:
            raise ConfigError(f"{where}: unknown key")
        kind = schema[key]
        if isinstance(kind, dict):
            _validate(value, kind, p, lines)
        elif kind is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}: expected a number, got {value!r}")
        elif kind is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}: expected an integer, got {value!r}")
        elif not isinstance(value, kind):
            raise ConfigError(f"{where}: expected {kind.__name__}, got {value!r}")


def load_config_text(text: str) -> dict:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"unparseable config: {exc}") from exc
    doc = doc or {}
    lines = _key_lines(text)
    _validate(doc, _SCHEMA, (), lines)
    for section, key in _REQUIRED:
        if key not in doc.get(section, {}):
            raise ConfigError(f"missing required field {section}.{key}")
    return doc


def load_config(path) -> dict:
    return load_config_text(Path(path).read_text())


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def train_config_from_doc(doc: dict, seed: int | None = None) -> TrainConfig:
    try:
        sched = doc.get("schedule", {"kind": "uniform", "sizes": [8]})
        kind = sched.get("kind", "uniform")
        if kind == "curriculum":
            schedule = LatticeSchedule.curriculum([tuple(s) for s in sched["stages"]])
        else:
            schedule = LatticeSchedule(kind, tuple(sched["sizes"]))
        tr = dict(doc.get("training", {}))
        if seed is not None:
            tr["seed"] = seed
        if "eval_sizes" in tr:
            tr["eval_sizes"] = tuple(tr["eval_sizes"])
        total = tr.pop("total_steps", sum(schedule.steps) if schedule.steps else None)
        if total is None:
            raise ConfigError("training.total_steps is required for uniform schedules")
        return TrainConfig(
            action=ActionParams(float(doc["action"]["m2"]), float(doc["action"]["g"])),
            D=int(doc["lattice"]["D"]),
            L=float(doc["lattice"]["L"]),
            schedule=schedule,
            total_steps=int(total),
            base_m0_squared=doc.get("base_m0_squared"),
            integrator=IntegratorConfig(**doc.get("integrator", {})),
            arch=ArchConfig(**doc.get("arch", {})),
            **tr,
        )
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed config: {exc}") from exc


def train_config_to_doc(cfg: TrainConfig) -> dict:
    sched = {"kind": cfg.schedule.kind}
    if cfg.schedule.kind == "curriculum":
        sched["stages"] = [[n, s] for n, s in zip(cfg.schedule.sizes, cfg.schedule.steps)]
    else:
        sched["sizes"] = list(cfg.schedule.sizes)
    arch = dataclasses.asdict(cfg.arch)
    for k, v in arch.items():
        if isinstance(v, tuple):
            arch[k] = list(v)
    doc = {
        "lattice": {"D": cfg.D, "L": cfg.L},
        "action": {"m2": cfg.action.m2, "g": cfg.action.g},
        "schedule": sched,
        "training": {
            "total_steps": cfg.total_steps, "batch_size": cfg.batch_size, "learning_rate": cfg.learning_rate,
            "b1": cfg.b1, "b2": cfg.b2, "eps": cfg.eps, "seed": cfg.seed, "eval_every": cfg.eval_every,
            "eval_samples": cfg.eval_samples, "eval_sizes": list(cfg.eval_sizes),
            "checkpoint_every": cfg.checkpoint_every,
        },
        "integrator": {"num_steps": cfg.integrator.num_steps, "scheme": cfg.integrator.scheme},
        "arch": arch,
    }
    if cfg.base_m0_squared is not None:
        doc["base_m0_squared"] = cfg.base_m0_squared
    return doc


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def flatten_params(params: ModelParams) -> tuple[np.ndarray, list[dict]]:
    manifest, chunks, offset = [], [], 0
    for net in NET_NAMES:
        for i, (W, b) in enumerate(params.weights[net]):
            for name, arr in (("W", W), ("b", b)):
                arr = np.asarray(arr, dtype=np.float64)
                manifest.append({"net": net, "layer": i, "param": name, "shape": list(arr.shape), "offset": offset})
                chunks.append(arr.reshape(-1))
                offset += arr.size
    return np.concatenate(chunks), manifest


def unflatten_params(flat: np.ndarray, manifest: list[dict], arch: ArchConfig) -> ModelParams:
    weights = {net: [] for net in NET_NAMES}
    end = 0
    entries = sorted(manifest, key=lambda m: m["offset"])
    for m in entries:
        if m["offset"] != end:
            raise FormatError("manifest offsets do not partition the parameter array")
        size = int(np.prod(m["shape"], dtype=np.int64))
        end = m["offset"] + size
    if end != flat.size:
        raise FormatError(f"manifest covers {end} values, array holds {flat.size}")
    tmp = {}
    for m in manifest:
        size = int(np.prod(m["shape"], dtype=np.int64))
        arr = flat[m["offset"] : m["offset"] + size].reshape(m["shape"])
        tmp[(m["net"], m["layer"], m["param"])] = jnp.asarray(arr)
    for net in NET_NAMES:
        n_layers = len(arch.layer_sizes()[net]) - 1
        weights[net] = [(tmp[(net, i, "W")], tmp[(net, i, "b")]) for i in range(n_layers)]
    return ModelParams(arch, weights)


@dataclasses.dataclass
class Checkpoint:
    params: ModelParams
    config: dict  # TrainConfig snapshot in config-document form
    step: int
    rng: dict


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    flat, manifest = flatten_params(ckpt.params)
    arch = dataclasses.asdict(ckpt.params.arch)
    header = {
        "arch": {k: list(v) if isinstance(v, tuple) else v for k, v in arch.items()},
        "train_config": ckpt.config,
        "manifest": manifest,
        "n_params": int(flat.size),
        "step": int(ckpt.step),
        "rng": ckpt.rng,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    return CKPT_MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(blob)) + blob + flat.astype("<f8").tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    data = checkpoint_bytes(ckpt)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<IQ", data, 8)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(data[start : start + n])
    payload = data[start + n :]
    if len(payload) != 8 * header["n_params"]:
        raise FormatError(f"{path}: truncated parameter payload")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    arch = ArchConfig(**header["arch"])
    params = unflatten_params(flat, header["manifest"], arch)
    return Checkpoint(params, header["train_config"], header["step"], header["rng"])


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# sample files
# ---------------------------------------------------------------------------

_SAMPLE_HEADER = "<IIIdQB"


def save_samples(path, batch: SampleBatch) -> None:
    lat = batch.lattice
    has_logq = batch.logq is not None
    buf = _io.BytesIO()
    buf.write(SAMPLE_MAGIC)
    buf.write(struct.pack(_SAMPLE_HEADER, FORMAT_VERSION, lat.D, lat.N, lat.L, len(batch), int(has_logq)))
    buf.write(np.ascontiguousarray(batch.phi, dtype="<f8").tobytes())
    if has_logq:
        buf.write(np.ascontiguousarray(batch.logq, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_samples(path) -> SampleBatch:
    data = Path(path).read_bytes()
    if data[:8] != SAMPLE_MAGIC:
        raise FormatError(f"{path}: not a sample file (bad magic)")
    version, D, N, L, n, has_logq = struct.unpack_from(_SAMPLE_HEADER, data, 8)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported sample-file version {version}")
    lat = LatticeSpec(D, N, L)
    start = 8 + struct.calcsize(_SAMPLE_HEADER)
    n_fields = n * lat.volume
    expected = 8 * (n_fields + (n if has_logq else 0))
    if len(data) - start != expected:
        raise FormatError(f"{path}: payload is {len(data) - start} bytes, expected {expected}")
    values = np.frombuffer(data, dtype="<f8", offset=start).astype(np.float64)
    phi = values[:n_fields].reshape((n,) + lat.shape)
    logq = values[n_fields:] if has_logq else None
    return SampleBatch(lat, phi, logq)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, header: list[str], rows, provenance: dict) -> None:
    """CSV with a leading ``#`` provenance line, a header row, and round-trip decimal floats."""
    from phi4flow import __version__

    prov = {"tool_version": __version__, **provenance}
    with open(path, "w") as fh:
        fh.write("# " + " ".join(f"{k}={_fmt(v) if v is not None else 'none'}" for k, v in prov.items()) + "\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_csv(path) -> tuple[dict, list[str], list[list[str]]]:
    lines = Path(path).read_text().splitlines()
    prov = dict(tok.split("=", 1) for tok in lines[0][2:].split())
    header = lines[1].split(",")
    return prov, header, [ln.split(",") for ln in lines[2:]]
