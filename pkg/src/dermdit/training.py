"""Training loop, iterative reverse sampler, and balanced-generation planner.

Every stochastic operation consumes an explicit seed. Per-step randomness
derives from ``SeedSequence((seed, step))`` and per-sample generation
streams from ``SeedSequence((seed, sample_index))``, so runs replay
bit-exactly and training can resume from a checkpoint without serialized
generator state.
"""

from __future__ import annotations

import csv
import itertools
import json
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .checkpoint import file_digest, load_checkpoint, save_checkpoint
from .codec import Codec, decode_batch, encode_batch
from .conditioning import AttributeSet, TextEmbedding, declarative_prompt
from .data import DatasetManifest, ManifestRecord, save_image
from .model import DermDiTModel, forward_batch
from .schedule import NoiseSchedule, SamplingScheduleView, posterior_mean, predict_x0_from_eps, respace

__all__ = [
    "TrainConfig",
    "GenerationPlan",
    "PromptSource",
    "training_step",
    "train",
    "p_sample_step",
    "generate",
    "plan_balanced_generation",
]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-4
    total_steps: int = 20000
    seed: int = 0
    checkpoint_every: int = 2000
    log_every: int = 100
    ema: bool = False
    ema_decay: float = 0.999
    blas_threads: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.total_steps < 1:
            raise ValueError("batch_size and total_steps must be >= 1")


@dataclass(frozen=True)
class GenerationPlan:
    """Allocation of synthetic samples over attribute combinations."""

    entries: list[tuple[AttributeSet, int, int]]  # (attributes, count, seed_base)

    @property
    def total(self) -> int:
        return sum(count for _, count, _ in self.entries)


class PromptSource:
    """Resolves manifest records to prompts and text embeddings.

    Uses the record's stored prompt when present, otherwise the
    declarative template for the record's attributes.
    """

    def __init__(self, encoder, regime: str = "two_attr"):
        self.encoder = encoder
        self.regime = regime

    def attributes_for(self, record: ManifestRecord) -> AttributeSet:
        return AttributeSet(
            diagnosis=record.diagnosis,
            skin_tone=record.skin_tone,
            sex=record.sex,
            age=record.age,
            site=record.site,
        )

    def prompt_for(self, record: ManifestRecord) -> str:
        if record.prompt:
            return record.prompt
        return declarative_prompt(self.attributes_for(record), self.regime)

    def embedding_for(self, record: ManifestRecord) -> TextEmbedding:
        return self.encoder.encode(self.prompt_for(record))


def _blas_limit(n_threads: int):
    if n_threads <= 0:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - threadpoolctl is a declared dep
        return nullcontext()
    return threadpool_limits(limits=n_threads, user_api="blas")


def training_step(
    model: DermDiTModel,
    codec: Codec,
    images: np.ndarray,
    texts: list[TextEmbedding] | None,
    schedule: NoiseSchedule,
    rng_seed,
    lr: float = 1e-4,
    step: int | None = None,
    forward_fn=forward_batch,
) -> float:
    """One optimization step on a batch; returns the batch loss.

    Per item: encode, draw a uniform timestep in 1..T and unit Gaussian
    noise from the seeded stream, form the noisy latent, predict the
    noise, and take the elementwise mean squared error. Gradients are
    applied through the Adam update before the loss value is returned.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError(f"batch must be nonempty [B,C,H,W], got {images.shape}")
    B = images.shape[0]
    z0 = encode_batch(codec, images)
    rng = np.random.default_rng(rng_seed)
    ts = rng.integers(1, schedule.T + 1, size=B)
    eps = rng.standard_normal(size=z0.shape).astype(z0.dtype)
    abar = schedule.alpha_bar[ts - 1].astype(z0.dtype)
    c_sig = np.sqrt(abar)[:, None, None, None]
    c_noise = np.sqrt(1.0 - abar)[:, None, None, None]
    zt = c_sig * z0 + c_noise * eps

    with nn.GradTape() as tape:
        eps_hat, _ = forward_fn(model, zt, ts, texts)
        loss = nn.mse_loss(eps_hat, eps)
        loss_value = float(loss.data)
        if not np.isfinite(loss_value):
            raise RuntimeError(
                f"non-finite loss {loss_value} at step {step}, timesteps {ts.tolist()}"
            )
        grads = nn.grad(loss, tape)
    if grads:  # a stubbed forward touches no parameters: nothing to update
        nn.adam_step(model.params, grads, lr)
    return loss_value


def _update_ema(ema: dict[str, np.ndarray], params, decay: float) -> None:
    for name, p in params.items():
        ema[name] = decay * ema[name] + (1.0 - decay) * p.data


def train(
    model: DermDiTModel,
    codec: Codec,
    manifest: DatasetManifest,
    source: PromptSource | None,
    config: TrainConfig,
    schedule: NoiseSchedule,
    out_dir: str | Path,
    config_doc: dict | None = None,
    resolution: int = 32,
    resume_from: str | Path | None = None,
) -> Path:
    """Run the full training loop; returns the final checkpoint path.

    Training images come from the manifest's train split. When ``source``
    is None the model trains unconditionally. Every record must resolve
    to a text embedding before step 1. The loss log is written as CSV
    (step, loss); checkpoints carry parameters, optimizer state, the step
    counter, and EMA weights when enabled.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = manifest.split("train")
    if not records:
        raise ValueError("manifest has no train records")
    config_doc = config_doc or {}

    embeddings: list[TextEmbedding] | None = None
    if source is not None:
        embeddings = [source.embedding_for(r) for r in records]

    images = np.stack([manifest.load_image(r, resolution) for r in records])

    start_step = 0
    ema: dict[str, np.ndarray] | None = None
    if config.ema:
        ema = {name: p.data.copy() for name, p in model.params.items()}
    if resume_from is not None:
        arrays = load_checkpoint(resume_from, expected_config=config_doc)
        model.params.load_state_arrays(arrays)
        start_step = int(arrays["step"])
        model.params.step_count = start_step
        if config.ema:
            ema = {
                name: arrays[f"ema.{name}"].astype(p.data.dtype)
                for name, p in model.params.items()
            }

    def checkpoint_arrays() -> dict[str, np.ndarray]:
        arrays = model.params.state_arrays()
        arrays["step"] = np.asarray(model.params.step_count, dtype=np.int64)
        if ema is not None:
            for name, value in ema.items():
                arrays[f"ema.{name}"] = value
        return arrays

    loss_rows: list[tuple[int, float]] = []
    final_path = out_dir / "model.ckpt"
    n = len(records)
    with _blas_limit(config.blas_threads):
        for step in range(start_step + 1, config.total_steps + 1):
            rng = np.random.default_rng(np.random.SeedSequence((config.seed, step)))
            idx = rng.integers(0, n, size=config.batch_size)
            batch_texts = [embeddings[i] for i in idx] if embeddings is not None else None
            loss_value = training_step(
                model,
                codec,
                images[idx],
                batch_texts,
                schedule,
                np.random.SeedSequence((config.seed, step, 1)),
                lr=config.lr,
                step=step,
            )
            loss_rows.append((step, loss_value))
            if ema is not None:
                _update_ema(ema, model.params, config.ema_decay)
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(out_dir / f"model_step{step:07d}.ckpt",
                                checkpoint_arrays(), config_doc)

    save_checkpoint(final_path, checkpoint_arrays(), config_doc)
    log_path = out_dir / "loss_log.csv"
    mode = "a" if (resume_from is not None and log_path.exists()) else "w"
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "loss"])
        writer.writerows(loss_rows)
    return final_path


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def p_sample_step(
    model: DermDiTModel,
    x_t: np.ndarray,
    view: SamplingScheduleView,
    position: int,
    text: TextEmbedding | None,
    noise: np.ndarray,
    forward_fn=forward_batch,
) -> np.ndarray:
    """One reverse step at a view position (1-based; position 1 is last).

    Predict the noise, reconstruct the clean sample (clamped to [-1,1]),
    move to the posterior mean, and add the fixed posterior standard
    deviation times the supplied noise. The variance at position 1 is
    exactly zero, so the final step ignores ``noise``.
    """
    batched = _p_sample_batch(
        model, np.asarray(x_t)[None], view, position, [text] if text is not None else None,
        np.asarray(noise)[None], forward_fn,
    )
    return batched[0]


def _p_sample_batch(model, x_t, view, position, texts, noise, forward_fn=forward_batch):
    if not 1 <= position <= view.n_steps:
        raise ValueError(f"position {position} outside 1..{view.n_steps}")
    t_parent = int(view.steps[position - 1])
    B = x_t.shape[0]
    eps_hat, _ = forward_fn(model, x_t, [t_parent] * B, texts)
    eps_data = eps_hat.data if isinstance(eps_hat, nn.Tensor) else np.asarray(eps_hat)
    x0_hat = predict_x0_from_eps(x_t, eps_data, position, view)
    x0_hat = np.clip(x0_hat, -1.0, 1.0)
    mean = posterior_mean(x0_hat, x_t, position, view)
    sigma = np.sqrt(view.posterior_variance[position - 1]).astype(x_t.dtype)
    return mean + sigma * noise


def generate(
    model: DermDiTModel,
    codec: Codec,
    conditioning,
    n: int,
    seed: int,
    schedule: NoiseSchedule,
    steps: int = 250,
    text_encoder=None,
    regime: str = "two_attr",
    out_dir: str | Path | None = None,
    checkpoint_digest: str | None = None,
    batch_size: int = 64,
    forward_fn=forward_batch,
) -> tuple[np.ndarray, list[dict]]:
    """Sample ``n`` images for one prompt / attribute combination.

    ``conditioning`` is a prompt string, an AttributeSet (rendered
    through the declarative template), or None for unconditional
    sampling. Each sample owns an independent generator stream seeded by
    (seed, sample index), so outputs are reproducible regardless of
    batching. Returns the decoded images and provenance records; when
    ``out_dir`` is set, PNGs plus a JSONL manifest are written.
    """
    if isinstance(conditioning, AttributeSet):
        prompt = declarative_prompt(conditioning, regime)
        attrs = conditioning
    elif conditioning is None:
        prompt, attrs = None, None
    else:
        prompt, attrs = str(conditioning), None
    if prompt is not None:
        if text_encoder is None:
            raise ValueError("text_encoder required for conditional sampling")
        text = text_encoder.encode(prompt)
    else:
        text = None

    view = respace(schedule, steps)
    latent_shape = model.config.latent_shape
    images_out: list[np.ndarray] = []
    provenance: list[dict] = []

    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        rngs = [
            np.random.default_rng(np.random.SeedSequence((seed, i)))
            for i in range(lo, hi)
        ]
        x = np.stack([r.standard_normal(latent_shape).astype(np.float32) for r in rngs])
        texts = [text] * (hi - lo) if text is not None else None
        for position in range(view.n_steps, 0, -1):
            noise = np.stack(
                [r.standard_normal(latent_shape).astype(np.float32) for r in rngs]
            )
            x = _p_sample_batch(model, x, view, position, texts, noise, forward_fn)
        images_out.append(decode_batch(codec, x))

    images = (
        np.concatenate(images_out)
        if images_out
        else np.zeros((0,) + latent_shape, dtype=np.float32)
    )

    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for i in range(n):
        entry = {
            "image": f"images/sample_{seed}_{i:05d}.png",
            "prompt": prompt,
            "attributes": attrs.as_dict() if attrs is not None else None,
            "seed": int(seed),
            "sample_index": i,
            "steps": int(steps),
            "checkpoint_digest": checkpoint_digest,
        }
        provenance.append(entry)
        if out_dir is not None:
            save_image(out_dir / entry["image"], images[i])
    if out_dir is not None:
        manifest_path = out_dir / "generated.jsonl"
        with open(manifest_path, "a") as fh:
            for entry in provenance:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return images, provenance


def plan_balanced_generation(
    domains: dict[str, list], total: int, base_seed: int = 0
) -> GenerationPlan:
    """Even allocation of ``total`` samples over attribute combinations.

    The cartesian product is taken in lexicographic order (attributes
    sorted by name, values by string order); each combination receives
    total // K, and the remainder goes round-robin from the first
    combination on. ``diagnosis`` must be one of the domains.
    """
    if total < 0:
        raise ValueError("total must be >= 0")
    if not domains:
        raise ValueError("attribute domains must be nonempty")
    for name, values in domains.items():
        if not values:
            raise ValueError(f"empty domain for attribute {name!r}")
    if "diagnosis" not in domains:
        raise ValueError("domains must include 'diagnosis'")

    names = sorted(domains)
    value_lists = [sorted(domains[name], key=str) for name in names]
    combos = list(itertools.product(*value_lists))
    K = len(combos)
    base, remainder = divmod(total, K)
    entries: list[tuple[AttributeSet, int, int]] = []
    for i, combo in enumerate(combos):
        attrs = AttributeSet(**dict(zip(names, combo)))
        count = base + (1 if i < remainder else 0)
        entries.append((attrs, count, base_seed + i))
    return GenerationPlan(entries=entries)
