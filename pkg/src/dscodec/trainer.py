"""Dual-stage training: mirror stage 1, then non-mirror decoder training.

Stage 1 trains encoder, quantizer and mirrored decoder jointly.  Stage 2
freezes encoder and quantizer, inserts the transformer block, keeps the
stage-1 decoder weights, starts fresh discriminators and lowers the
learning rate.  ``STAGE2_T`` is stage 2 without the transformer and
``JOINT_NONMIRROR`` trains the whole non-mirror codec from scratch.
"""
from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .audio import CropDataset, SpectrogramConfig, mel_spectrogram
from .checkpoint import Checkpoint, save_checkpoint
from .codec import Codec, CodecConfig, seeded
from .discriminators import (
    DiscriminatorOutput, Discriminators, MPDConfig, MSSTFTConfig,
    discriminator_loss, feature_matching_loss, generator_adversarial_loss,
)
from .quantize import QuantizerOutput

log = logging.getLogger(__name__)


class StageName(str, enum.Enum):
    STAGE1_MIRROR = "stage1"
    STAGE2_NONMIRROR = "stage2"
    STAGE2_T = "stage2t"
    JOINT_NONMIRROR = "joint"


class Init(str, enum.Enum):
    FRESH = "fresh"
    CARRY = "carry"  # copied from the previous stage, trainable
    FROZEN = "frozen"  # copied from the previous stage, not trainable
    ABSENT = "absent"


PARTS = ("encoder", "quantizer", "transformer", "decoder", "discriminators")


class TrainingDiverged(RuntimeError):
    pass


class MissingCheckpoint(ValueError):
    pass


@dataclass
class StagePlan:
    name: StageName
    init: dict[str, Init]
    batch_size: int
    lr_start: float
    lr_end: float
    total_steps: int
    decay_steps: int | None = None  # None: decay over the whole stage

    def __post_init__(self):
        self.name = StageName(self.name)
        self.init = {k: Init(v) for k, v in self.init.items()}
        if set(self.init) != set(PARTS):
            raise ValueError(f"init policy needed for exactly {PARTS}")
        if self.name is StageName.STAGE1_MIRROR and self.has_transformer:
            raise ValueError("the mirror stage has no transformer")
        if self.name is StageName.STAGE2_NONMIRROR:
            expect = {"encoder": Init.FROZEN, "quantizer": Init.FROZEN, "decoder": Init.CARRY,
                      "transformer": Init.FRESH, "discriminators": Init.FRESH}
            if self.init != expect:
                raise ValueError(f"stage-2 plan must use init policy {expect}")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("batch_size must be >= 1 and total_steps >= 0")

    @property
    def has_transformer(self) -> bool:
        return self.init["transformer"] is not Init.ABSENT

    @property
    def needs_checkpoint(self) -> bool:
        return any(v in (Init.CARRY, Init.FROZEN) for v in self.init.values())

    def trainable(self, part: str) -> bool:
        return self.init[part] in (Init.FRESH, Init.CARRY)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["name"] = self.name.value
        d["init"] = {k: v.value for k, v in self.init.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        return cls(**d)

    # defaults: batch 10, 1e-4 -> 1e-5 over 1000 steps (stage 1); batch 24, 2e-5 -> 1e-5 (stage 2)

    @classmethod
    def stage1_mirror(cls, total_steps: int = 2000, batch_size: int = 10) -> "StagePlan":
        init = dict.fromkeys(PARTS, Init.FRESH) | {"transformer": Init.ABSENT}
        return cls(StageName.STAGE1_MIRROR, init, batch_size, 1e-4, 1e-5, total_steps, decay_steps=1000)

    @classmethod
    def joint_nonmirror(cls, total_steps: int = 2000, batch_size: int = 10) -> "StagePlan":
        init = dict.fromkeys(PARTS, Init.FRESH)
        return cls(StageName.JOINT_NONMIRROR, init, batch_size, 1e-4, 1e-5, total_steps, decay_steps=1000)

    @classmethod
    def stage2_nonmirror(cls, total_steps: int = 1000, batch_size: int = 24) -> "StagePlan":
        init = {"encoder": Init.FROZEN, "quantizer": Init.FROZEN, "transformer": Init.FRESH,
                "decoder": Init.CARRY, "discriminators": Init.FRESH}
        return cls(StageName.STAGE2_NONMIRROR, init, batch_size, 2e-5, 1e-5, total_steps)

    @classmethod
    def stage2_t(cls, total_steps: int = 1000, batch_size: int = 24) -> "StagePlan":
        init = {"encoder": Init.FROZEN, "quantizer": Init.FROZEN, "transformer": Init.ABSENT,
                "decoder": Init.CARRY, "discriminators": Init.FRESH}
        return cls(StageName.STAGE2_T, init, batch_size, 2e-5, 1e-5, total_steps)

    @classmethod
    def for_name(cls, name, **kwargs) -> "StagePlan":
        factory = {
            StageName.STAGE1_MIRROR: cls.stage1_mirror,
            StageName.STAGE2_NONMIRROR: cls.stage2_nonmirror,
            StageName.STAGE2_T: cls.stage2_t,
            StageName.JOINT_NONMIRROR: cls.joint_nonmirror,
        }[StageName(name)]
        return factory(**kwargs)


def lr_schedule(step: int, plan: StagePlan) -> float:
    """Linear from lr_start to lr_end over ``decay_steps`` (default: the whole stage), then flat."""
    if step < 0:
        raise ValueError("step must be >= 0")
    span = plan.decay_steps if plan.decay_steps is not None else plan.total_steps
    frac = 1.0 if span <= 0 else min(step, span) / span
    return plan.lr_start * (1.0 - frac) + plan.lr_end * frac


@dataclass(frozen=True)
class LossWeights:
    mel: float = 15.0
    adv: float = 1.0
    fm: float = 2.0
    vq: float = 1.0

    def __post_init__(self):
        if min(self.mel, self.adv, self.fm, self.vq) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class OptimSettings:
    beta1: float = 0.8
    beta2: float = 0.9
    weight_decay: float = 0.01
    grad_clip: float = 1.0


@dataclass(frozen=True)
class TrainSettings:
    """Everything besides the stage plan that shapes a training run."""

    weights: LossWeights = LossWeights()
    optim: OptimSettings = OptimSettings()
    mpd: MPDConfig = MPDConfig()
    msstft: MSSTFTConfig = MSSTFTConfig()
    codebook_warmup_batches: int = 8  # k-means init from this many batches; 0 = random codes
    freeze_check_every: int = 100

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSettings":
        d = dict(d)
        kinds = {"weights": LossWeights, "optim": OptimSettings, "mpd": MPDConfig, "msstft": MSSTFTConfig}
        for key, kind in kinds.items():
            if key in d and isinstance(d[key], dict):
                d[key] = kind(**d[key])
        return cls(**d)


def mel_scales(msstft: MSSTFTConfig) -> list[SpectrogramConfig]:
    return [SpectrogramConfig(fft_size=n, hop=n // 4, n_mels=max(8, min(80, n // 8))) for n in msstft.fft_sizes]


def mel_loss(reconstruction: torch.Tensor, reference: torch.Tensor, scales) -> torch.Tensor:
    """Mean over scales of the L1 distance between log-mel spectrograms."""
    terms = [(mel_spectrogram(reconstruction, s) - mel_spectrogram(reference, s)).abs().mean() for s in scales]
    return torch.stack(terms).mean()


@dataclass
class GeneratorLoss:
    total: torch.Tensor
    components: dict[str, torch.Tensor]


def generator_loss(reconstruction, reference, quantizer_out: QuantizerOutput | None,
                   disc_fake: DiscriminatorOutput | None, disc_real: DiscriminatorOutput | None,
                   weights: LossWeights = LossWeights(), scales=None) -> GeneratorLoss:
    scales = scales if scales is not None else mel_scales(MSSTFTConfig())
    zero = reconstruction.new_zeros(())
    parts = {
        "mel": mel_loss(reconstruction, reference, scales),
        "adv": generator_adversarial_loss(disc_fake) if disc_fake is not None else zero,
        "fm": feature_matching_loss(disc_real, disc_fake) if disc_fake is not None else zero,
        "vq": quantizer_out.vq_loss if quantizer_out is not None else zero,
    }
    total = (weights.mel * parts["mel"] + weights.adv * parts["adv"]
             + weights.fm * parts["fm"] + weights.vq * parts["vq"])
    return GeneratorLoss(total, parts)


# -- state plumbing --------------------------------------------------------------


def param_hash(module: nn.Module | None) -> str:
    h = hashlib.sha256()
    if module is not None:
        for name, t in sorted(module.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _load_part(module: nn.Module, params: dict[str, np.ndarray], part: str):
    state = {k: torch.from_numpy(np.array(v)) for k, v in params.items()}
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise ValueError(f"checkpoint lacks {part} parameters: {sorted(missing)[:3]}...")
    module.load_state_dict(state, strict=True)


def codec_from_checkpoint(ckpt: Checkpoint) -> Codec:
    codec = Codec(CodecConfig.from_dict(ckpt.config), seed=ckpt.seed)
    for part in Codec.SUBMODULES:
        module = codec.submodule(part)
        if module is not None:
            _load_part(module, ckpt.submodule_params(part), part)
    codec.eval()
    return codec


def _optimizer_state(opt: torch.optim.Optimizer, names: dict[int, str]) -> dict[str, np.ndarray]:
    out = {}
    for p, st in opt.state.items():
        name = names[id(p)]
        for key, val in st.items():
            out[f"{name}:{key}"] = np.asarray(torch.as_tensor(val, dtype=torch.float32).numpy())
    return out


@dataclass
class StageResult:
    checkpoint: Checkpoint
    codec: Codec
    discriminators: Discriminators


class CurveLog:
    """Append-only per-step records {step, loss_name, value}, optionally mirrored to a file."""

    def __init__(self, path: Path | None = None, stage: str | None = None):
        self.records: list[dict] = []
        self.stage = stage
        self._fh = open(path, "w") if path is not None else None

    def add(self, step: int, values: dict[str, float]):
        for name, value in values.items():
            rec = {"step": step, "loss_name": name, "value": float(value)}
            if self.stage is not None:
                rec["stage"] = self.stage
            self.records.append(rec)
            if self._fh is not None:
                self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def series(self, name: str) -> np.ndarray:
        return np.array([r["value"] for r in self.records if r["loss_name"] == name])


def curve_series(records: list[dict], name: str) -> np.ndarray:
    return np.array([r["value"] for r in records if r["loss_name"] == name])


def run_stage(plan: StagePlan, data: CropDataset, config: CodecConfig | None = None,
              init: Checkpoint | None = None, seed: int = 0,
              settings: TrainSettings = TrainSettings(), out_dir: Path | None = None,
              on_step: Callable[[int, dict], None] | None = None,
              on_start: Callable[[Codec, nn.Module], None] | None = None) -> StageResult:
    """Train one stage and return its final checkpoint (plus the live modules).

    Each step updates the generator, then the discriminators, on the same batch.
    ``on_start(codec, discriminators)`` sees the modules after initialization,
    before the first update.
    """
    if plan.needs_checkpoint and init is None:
        raise MissingCheckpoint(f"{plan.name.value} needs a stage-1 checkpoint to initialize from")
    if init is not None:
        base_cfg = CodecConfig.from_dict(init.config)
    elif config is not None:
        base_cfg = config
    else:
        raise ValueError("either a codec config or an init checkpoint is required")
    cfg = base_cfg.with_transformer(plan.has_transformer)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(seed)
    codec = Codec(cfg, seed=seed)
    # stage-2 plans draw a different discriminator init than from-scratch plans
    disc_tag = "discriminators:reinit" if plan.needs_checkpoint else "discriminators"
    with seeded(seed, disc_tag):
        discs = Discriminators(settings.mpd, settings.msstft)

    # carry-over from the previous stage
    for part in Codec.SUBMODULES:
        if plan.init[part] in (Init.CARRY, Init.FROZEN):
            _load_part(codec.submodule(part), init.submodule_params(part), part)
    if plan.init["discriminators"] in (Init.CARRY, Init.FROZEN):
        _load_part(discs, init.submodule_params("discriminators"), "discriminators")

    frozen = [p for p in Codec.SUBMODULES if plan.init[p] is Init.FROZEN]
    for part in frozen:
        codec.submodule(part).requires_grad_(False)
    frozen_hashes = {p: param_hash(codec.submodule(p)) for p in frozen}
    quantizer_frozen = plan.init["encoder"] is Init.FROZEN and plan.init["quantizer"] is Init.FROZEN

    if plan.init["quantizer"] is Init.FRESH and settings.codebook_warmup_batches > 0 and plan.total_steps > 0:
        _kmeans_codebook(codec, data, plan.batch_size, settings.codebook_warmup_batches, seed)

    names = {id(p): f"{n}" for n, p in codec.named_parameters()}
    names.update({id(p): f"discriminators.{n}" for n, p in discs.named_parameters()})
    g_params = [p for n, p in codec.named_parameters()
                if plan.trainable(n.split(".", 1)[0]) and p.requires_grad]
    d_params = list(discs.parameters()) if plan.trainable("discriminators") else []
    o = settings.optim
    g_opt = torch.optim.AdamW(g_params, lr=plan.lr_start, betas=(o.beta1, o.beta2), weight_decay=o.weight_decay)
    d_opt = (torch.optim.AdamW(d_params, lr=plan.lr_start, betas=(o.beta1, o.beta2), weight_decay=o.weight_decay)
             if d_params else None)
    if init is not None and init.stage == plan.name.value:
        log.warning("resuming %s from a checkpoint of the same stage; optimizer state is reset", plan.name.value)

    scales = mel_scales(settings.msstft)
    curves = CurveLog(out_dir / f"curves_{plan.name.value}.ndjson" if out_dir else None, plan.name.value)
    if on_start is not None:
        on_start(codec, discs)
    codec.train()
    t0 = time.time()
    try:
        for step in range(plan.total_steps):
            lr = lr_schedule(step, plan)
            for opt in (g_opt, d_opt):
                if opt is not None:
                    for group in opt.param_groups:
                        group["lr"] = lr
            x = torch.from_numpy(data.batch(step, plan.batch_size))

            # generator update
            discs.requires_grad_(False)
            if quantizer_frozen:
                with torch.no_grad():
                    q = codec.quantize(x)
                recon = codec.synthesize(q.quantized)
            else:
                recon, q = codec.forward_train(x)
            with torch.no_grad():
                real_out = discs(x)
            fake_out = discs(recon)
            gl = generator_loss(recon, x, q, fake_out, real_out, settings.weights, scales)
            if not torch.isfinite(gl.total):
                _dump_divergence(out_dir, plan, step, gl, x)
            g_opt.zero_grad(set_to_none=True)
            gl.total.backward()
            if o.grad_clip:
                torch.nn.utils.clip_grad_norm_(g_params, o.grad_clip)
            g_opt.step()

            # discriminator update
            d_val = float("nan")
            if d_opt is not None:
                discs.requires_grad_(True)
                d_loss = discriminator_loss(discs(x), discs(recon.detach()))
                if not torch.isfinite(d_loss):
                    _dump_divergence(out_dir, plan, step, gl, x, d_loss=d_loss)
                d_opt.zero_grad(set_to_none=True)
                d_loss.backward()
                if o.grad_clip:
                    torch.nn.utils.clip_grad_norm_(d_params, o.grad_clip)
                d_opt.step()
                d_val = d_loss.item()

            record = {
                "mel": gl.components["mel"].item(), "g_adv": gl.components["adv"].item(),
                "fm": gl.components["fm"].item(), "vq_loss": gl.components["vq"].item(),
                "io_mse": q.io_mse.item(), "g_total": gl.total.item(), "d_loss": d_val,
                "lr": lr, "utilization": q.utilization,
            }
            curves.add(step, record)
            if on_step is not None:
                on_step(step, record)
            if step % 50 == 0:
                log.info("%s step %d mel %.4f vq %.4f io_mse %.5f util %.3f (%.1fs)", plan.name.value, step,
                         record["mel"], record["vq_loss"], record["io_mse"], record["utilization"], time.time() - t0)
            if frozen and settings.freeze_check_every and (step + 1) % settings.freeze_check_every == 0:
                _check_frozen(codec, frozen_hashes)
    finally:
        curves.close()
    _check_frozen(codec, frozen_hashes)

    params = {f"{k}": v.detach().cpu().float().numpy().copy() for k, v in codec.state_dict().items()}
    params.update({f"discriminators.{k}": v.detach().cpu().float().numpy().copy()
                   for k, v in discs.state_dict().items()})
    optimizers = {"generator": _optimizer_state(g_opt, names)}
    if d_opt is not None:
        optimizers["discriminator"] = _optimizer_state(d_opt, names)
    ckpt = Checkpoint(
        config=cfg.to_dict(), stage=plan.name.value, step=plan.total_steps, params=params,
        optimizers=optimizers, rng_state=bytes(torch.get_rng_state().numpy().tobytes()), seed=seed,
        plan=plan.to_dict(), curves=curves.records,
    )
    if out_dir is not None:
        save_checkpoint(out_dir / f"{plan.name.value}.ckpt", ckpt)
    return StageResult(ckpt, codec, discs)


@torch.no_grad()
def _kmeans_codebook(codec: Codec, data: CropDataset, batch_size: int, n_batches: int, seed: int):
    latents = torch.cat([codec.encoder(torch.from_numpy(data.batch(i, batch_size))) for i in range(n_batches)])
    codec.quantizer.init_codebook(latents, np.random.default_rng([seed, 17]))


def _check_frozen(codec: Codec, hashes: dict[str, str]):
    for part, h in hashes.items():
        if param_hash(codec.submodule(part)) != h:
            raise RuntimeError(f"frozen submodule {part} changed during training")


def _dump_divergence(out_dir, plan, step, gl: GeneratorLoss, x, d_loss=None):
    info = {
        "stage": plan.name.value, "step": step,
        "components": {k: float(v.detach()) for k, v in gl.components.items()},
        "d_loss": None if d_loss is None else float(d_loss.detach()),
        "batch_absmax": float(x.abs().max()), "batch_finite": bool(torch.isfinite(x).all()),
    }
    if out_dir is not None:
        (Path(out_dir) / f"diverged_{plan.name.value}_step{step}.json").write_text(json.dumps(info, indent=1))
    raise TrainingDiverged(f"non-finite loss at {plan.name.value} step {step}: {info}")


@dataclass
class DualStageResult:
    stage1: Checkpoint
    stage2: Checkpoint
    curves: list[dict]


def dual_stage_train(config: CodecConfig, data: CropDataset, stage1: StagePlan | None = None,
                     stage2: StagePlan | None = None, seed: int = 0,
                     settings: TrainSettings = TrainSettings(), out_dir=None) -> DualStageResult:
    """Mirror stage 1 followed by non-mirror stage 2 (or stage 2-t) carrying the stage-1 weights."""
    stage1 = stage1 or StagePlan.stage1_mirror()
    stage2 = stage2 or StagePlan.stage2_nonmirror()
    if stage1.name is not StageName.STAGE1_MIRROR:
        raise ValueError("first stage must be STAGE1_MIRROR")
    if stage2.name not in (StageName.STAGE2_NONMIRROR, StageName.STAGE2_T):
        raise ValueError("second stage must be STAGE2_NONMIRROR or STAGE2_T")
    r1 = run_stage(stage1, data, config=config, seed=seed, settings=settings, out_dir=out_dir)
    r2 = run_stage(stage2, data, init=r1.checkpoint, seed=seed, settings=settings, out_dir=out_dir)
    merged = r1.checkpoint.curves + r2.checkpoint.curves
    if out_dir is not None:
        with open(Path(out_dir) / "curves.ndjson", "w") as fh:
            for rec in merged:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return DualStageResult(r1.checkpoint, r2.checkpoint, merged)


def smoothed(values: np.ndarray, window: int) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    values = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def mirror_vs_nonmirror_experiment(config: CodecConfig, data: CropDataset, seeds, steps: int = 2000,
                                   batch_size: int = 10, settings: TrainSettings = TrainSettings(),
                                   out_dir=None, window: int = 50) -> dict:
    """Train STAGE1_MIRROR and JOINT_NONMIRROR on identical data and seeds; compare VQ loss and io_mse.

    The end-of-run comparison uses the mean of the last ``window`` steps.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    report = {"steps": steps, "batch_size": batch_size, "window": window, "seeds": {}}
    for seed in seeds:
        runs = {}
        for plan in (StagePlan.stage1_mirror(steps, batch_size), StagePlan.joint_nonmirror(steps, batch_size)):
            res = run_stage(plan, data, config=config, seed=seed, settings=settings)
            recs = res.checkpoint.curves
            runs[plan.name.value] = {
                "vq_loss": curve_series(recs, "vq_loss").tolist(),
                "io_mse": curve_series(recs, "io_mse").tolist(),
            }
            if out_dir is not None:
                with open(out_dir / f"curves_{plan.name.value}_seed{seed}.ndjson", "w") as fh:
                    for rec in recs:
                        if rec["loss_name"] in ("vq_loss", "io_mse", "mel"):
                            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        final = {
            mode: {k: float(np.mean(v[-window:])) if v else float("nan") for k, v in curves.items()}
            for mode, curves in runs.items()
        }
        m, j = StageName.STAGE1_MIRROR.value, StageName.JOINT_NONMIRROR.value
        report["seeds"][str(seed)] = {
            "curves": runs,
            "final": final,
            "lower_io_mse": m if final[m]["io_mse"] < final[j]["io_mse"] else j,
            "lower_vq_loss": m if final[m]["vq_loss"] < final[j]["vq_loss"] else j,
        }
    wins = sum(r["lower_io_mse"] == StageName.STAGE1_MIRROR.value for r in report["seeds"].values())
    report["mirror_lower_io_mse_count"] = wins
    report["trend_holds"] = wins >= math.ceil(2 * len(report["seeds"]) / 3) if report["seeds"] else False
    if out_dir is not None:
        (out_dir / "report.json").write_text(json.dumps(report, indent=1))
        plot_comparison(report, out_dir / "comparison.png")
    return report


def plot_comparison(report: dict, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for seed, res in report["seeds"].items():
        for mode, style in (("stage1", "-"), ("joint", "--")):
            for ax, key in zip(axes, ("vq_loss", "io_mse")):
                ax.plot(smoothed(res["curves"][mode][key], 20), style, label=f"{mode} seed {seed}")
    for ax, title in zip(axes, ("VQ loss", "quantizer input/output MSE")):
        ax.set_title(title)
        ax.set_xlabel("step")
        ax.set_yscale("log")
    axes[1].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
