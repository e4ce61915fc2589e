"""Single-file checkpoint archive.

A zip (stored, fixed timestamps) holding ``manifest.json`` plus one blob per
tensor: little-endian float32 for parameters and optimizer moments, raw
bytes for the torch RNG state, and the curve log as ``curves.ndjson``.
Writing the same checkpoint twice produces identical bytes.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict  # CodecConfig.to_dict()
    stage: str
    step: int
    params: dict[str, np.ndarray]
    optimizers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    rng_state: bytes = b""
    seed: int = 0
    plan: dict = field(default_factory=dict)
    curves: list[dict] = field(default_factory=list)

    @property
    def config_hash(self) -> int:
        from .codec import CodecConfig

        return CodecConfig.from_dict(self.config).codec_id()

    def submodule_params(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.params.items() if k.startswith(p)}


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    params = {k: np.asarray(v) for k, v in sorted(ckpt.params.items())}
    manifest = {
        "format_version": FORMAT_VERSION,
        "stage": ckpt.stage,
        "step": int(ckpt.step),
        "seed": int(ckpt.seed),
        "config_hash": f"{ckpt.config_hash:016x}",
        "config": ckpt.config,
        "plan": ckpt.plan,
        "params": {k: list(v.shape) for k, v in params.items()},
        "optimizers": {
            opt: {k: list(np.asarray(v).shape) for k, v in sorted(states.items())}
            for opt, states in sorted(ckpt.optimizers.items())
        },
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr(_entry("manifest.json"), json.dumps(manifest, sort_keys=True, indent=1))
        for k, v in params.items():
            zf.writestr(_entry(f"params/{k}"), _f32(v))
        for opt, states in sorted(ckpt.optimizers.items()):
            for k, v in sorted(states.items()):
                zf.writestr(_entry(f"optim/{opt}/{k}"), _f32(v))
        zf.writestr(_entry("rng/torch"), bytes(ckpt.rng_state))
        zf.writestr(_entry("curves.ndjson"), "".join(json.dumps(r, sort_keys=True) + "\n" for r in ckpt.curves))
    return buf.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ckpt))
    return path


def _blob(zf: zipfile.ZipFile, name: str, shape) -> np.ndarray:
    raw = zf.read(name)
    n = int(np.prod(shape, dtype=np.int64))
    if len(raw) != 4 * n:
        raise CheckpointError(f"{name}: {len(raw)} bytes, expected {4 * n}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"not a checkpoint archive: {exc}") from exc
    with zf:
        try:
            return _read_archive(zf)
        except KeyError as exc:
            raise CheckpointError(f"checkpoint archive is missing an entry: {exc}") from exc


def _read_archive(zf: zipfile.ZipFile) -> Checkpoint:
    manifest = json.loads(zf.read("manifest.json"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")
    params = {k: _blob(zf, f"params/{k}", shape) for k, shape in manifest["params"].items()}
    optimizers = {
        opt: {k: _blob(zf, f"optim/{opt}/{k}", shape) for k, shape in states.items()}
        for opt, states in manifest["optimizers"].items()
    }
    curves = [json.loads(line) for line in zf.read("curves.ndjson").decode().splitlines() if line]
    ckpt = Checkpoint(
        config=manifest["config"], stage=manifest["stage"], step=manifest["step"], params=params,
        optimizers=optimizers, rng_state=zf.read("rng/torch"), seed=manifest["seed"],
        plan=manifest["plan"], curves=curves,
    )
    if f"{ckpt.config_hash:016x}" != manifest["config_hash"]:
        raise CheckpointError("config hash does not match the stored configuration")
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
