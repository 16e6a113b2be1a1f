"""Online training loop: one pass over the stream, periodic frozen-model evaluation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import encoder as enc
from . import memory as mem
from .config import ConfigError, ExperimentConfig, config_hash, config_to_dict, serialize_config
from .evaluation import EvalSet, evaluate
from .losses import LossConfig, LossResult, total_loss
from .metrics import MetricsRow, MetricsWriter
from .streams import (
    Augmenter,
    LabeledDataset,
    StreamBatch,
    StreamSpec,
    augment_two_views,
    build_stream,
    gen_gaussian_mixture,
    load_cifar10_bin,
    load_dataset,
    load_idx,
    make_eval_set,
)

log = logging.getLogger(__name__)

# child stream ids under the run seed
RNG_DATA, RNG_EVAL_DATA, RNG_STREAM, RNG_INIT, RNG_TRAIN, RNG_MEMORY, RNG_EVAL = range(7)


class TrainingDivergedError(FloatingPointError):
    pass


def derived_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(key))))


@dataclass(frozen=True)
class TrainSettings:
    loss: LossConfig
    augmenter: Augmenter
    lr: float
    memory_sample: int
    policy: str
    kmeans_k: int = 10


@dataclass
class TrainState:
    params: enc.EncoderParams
    frozen: enc.EncoderParams
    buffer: mem.MemoryBuffer
    rng: np.random.Generator  # sampling + augmentation
    memory_rng: np.random.Generator  # randomized memory policies
    step: int = 0

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.params.flat().tobytes())
        h.update(self.frozen.flat().tobytes())
        h.update(np.ascontiguousarray(self.buffer.items).tobytes())
        h.update(str(self.step).encode())
        return h.hexdigest()


def init_state(params: enc.EncoderParams, capacity: int, seed: int) -> TrainState:
    return TrainState(
        params=params,
        frozen=enc.snapshot(params),
        buffer=mem.MemoryBuffer.empty(capacity, params.layer_dims[0]),
        rng=derived_rng(seed, RNG_TRAIN),
        memory_rng=derived_rng(seed, RNG_MEMORY),
    )


def train_step(state: TrainState, batch: StreamBatch, settings: TrainSettings,
               dump_dir=None) -> tuple[TrainState, LossResult]:
    """Process one streaming batch.

    Order: draw memory samples, stack with the batch, augment two views,
    embed with the live and the frozen encoder, loss and gradient, SGD step,
    the pre-update parameters become the next frozen model, then the buffer
    is refreshed from the raw batch using the updated encoder.
    """
    params, frozen = state.params, state.frozen
    if frozen.version != max(params.version - 1, 0):
        raise RuntimeError(f"frozen model at version {frozen.version}, live model at {params.version}")

    mem_x, _ = state.buffer.sample_batch(settings.memory_sample, state.rng)
    stacked = np.vstack([batch.samples, mem_x])
    views = augment_two_views(stacked, settings.augmenter, state.rng)
    feats, trace = enc.forward(params, views)
    past = enc.encode(frozen, views)
    result = total_loss(feats, past, settings.loss, len(batch), mem_x.shape[0])
    if not (np.isfinite(result.value) and np.all(np.isfinite(result.grad_features))):
        where = _dump(dump_dir, state, views, result)
        raise TrainingDivergedError(f"non-finite loss at step {state.step + 1}; state dumped to {where}")

    grads = enc.backward(params, trace, result.grad_features)
    new_params = enc.sgd_step(params, grads, settings.lr)
    buffer = mem.update(state.buffer, batch.samples, new_params, settings.policy, state.memory_rng,
                        batch.labels, settings.kmeans_k)
    new_state = dataclasses.replace(state, params=new_params, frozen=enc.snapshot(params), buffer=buffer,
                                    step=state.step + 1)
    return new_state, result


def _dump(dump_dir, state: TrainState, views, result) -> str:
    if dump_dir is None:
        return "<not saved>"
    path = Path(dump_dir) / f"diverged_step{state.step + 1}.npz"
    np.savez(path, views=views, grad=result.grad_features, value=result.value, params=state.params.flat())
    return str(path)


# --- state persistence -----------------------------------------------------


def training_identity(cfg: ExperimentConfig) -> str:
    """Hash of the settings that determine the training trajectory.

    Output location, checkpoint cadence and wall-clock logging are left out so
    a run can be resumed into a different directory.
    """
    raw = config_to_dict(cfg)
    for key in ("out_dir", "checkpoint_every", "metrics"):
        raw.pop(key)
    return hashlib.sha256(json.dumps(raw, sort_keys=True).encode()).hexdigest()


def save_state(state: TrainState, path, identity: str = "") -> None:
    arrays = {"step": np.array(state.step), "buffer_items": state.buffer.items, "identity": np.array(identity),
              "buffer_capacity": np.array(state.buffer.capacity),
              "rng_state": np.array(json.dumps(state.rng.bit_generator.state)),
              "memory_rng_state": np.array(json.dumps(state.memory_rng.bit_generator.state))}
    if state.buffer.labels is not None:
        arrays["buffer_labels"] = state.buffer.labels
    for tag, p in (("params", state.params), ("frozen", state.frozen)):
        arrays[f"{tag}_version"] = np.array(p.version)
        for l, (w, b) in enumerate(zip(p.weights, p.biases)):
            arrays[f"{tag}_w{l}"] = w
            arrays[f"{tag}_b{l}"] = b
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_state(path, identity: str = "") -> TrainState:
    """Restore a saved state; with ``identity`` the state must come from a matching config."""
    with np.load(path) as z:
        saved = str(z["identity"]) if "identity" in z.files else ""
        if identity and saved and saved != identity:
            raise ConfigError(f"{path}: training state was saved under a different config or seed")
        def params(tag):
            n = sum(1 for k in z.files if k.startswith(f"{tag}_w"))
            return enc.make_params([z[f"{tag}_w{l}"] for l in range(n)], [z[f"{tag}_b{l}"] for l in range(n)],
                                   int(z[f"{tag}_version"]))

        def rng(key):
            g = np.random.Generator(np.random.PCG64())
            g.bit_generator.state = json.loads(str(z[key]))
            return g

        labels = z["buffer_labels"] if "buffer_labels" in z.files else None
        buffer = mem.MemoryBuffer(int(z["buffer_capacity"]), z["buffer_items"].copy(), labels)
        return TrainState(params("params"), params("frozen"), buffer, rng("rng_state"), rng("memory_rng_state"),
                          int(z["step"]))


# --- experiment ------------------------------------------------------------


def load_data(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Return (training pool, evaluation pool)."""
    d, s = cfg.data, cfg.stream
    if d.source == "gaussian":
        train = gen_gaussian_mixture(s.T, s.U, d.dim, d.separation, derived_rng(cfg.seed, RNG_DATA), d.offset,
                                     d.layout)
        held = gen_gaussian_mixture(s.T, cfg.eval.per_class, d.dim, d.separation,
                                    derived_rng(cfg.seed, RNG_EVAL_DATA), d.offset, d.layout)
        return train, held
    if d.source == "idx":
        train = load_idx(d.train_images, d.train_labels)
        held = load_idx(d.eval_images, d.eval_labels) if d.eval_images else train
        return train, held
    if d.source == "cifar10":
        train = load_cifar10_bin(d.train_files)
        held = load_cifar10_bin(d.eval_files) if d.eval_files else train
        return train, held
    train = load_dataset(d.path)
    held = load_dataset(d.eval_path) if d.eval_path else train
    return train, held


def make_augmenter(cfg: ExperimentConfig, data: LabeledDataset) -> Augmenter:
    a = cfg.augment
    return Augmenter(a.mode, a.noise_sigma, tuple(a.scale_range), data.image_shape, a.crop_padding, a.flip_prob,
                     tuple(a.brightness), tuple(a.contrast), a.gray_prob)


def settings_from_config(cfg: ExperimentConfig, data: LabeledDataset) -> TrainSettings:
    return TrainSettings(cfg.loss.to_loss_config(), make_augmenter(cfg, data), cfg.optim.lr,
                         cfg.memory.sample_size, cfg.memory.policy, cfg.memory.kmeans_k)


@dataclass
class Experiment:
    """Everything derived deterministically from a config before training starts."""

    cfg: ExperimentConfig
    train_data: LabeledDataset
    eval_set: EvalSet
    stream: list
    settings: TrainSettings
    initial_params: enc.EncoderParams

    @classmethod
    def prepare(cls, cfg: ExperimentConfig) -> "Experiment":
        train, held = load_data(cfg)
        eval_set = make_eval_set(held, cfg.stream.T, cfg.eval.per_class, derived_rng(cfg.seed, RNG_EVAL_DATA, 1))
        spec = StreamSpec(cfg.stream.kind, cfg.stream.T, cfg.stream.U, cfg.stream.n, cfg.seed)
        stream = build_stream(train, spec, derived_rng(cfg.seed, RNG_STREAM))
        dims = [train.samples.shape[1], *cfg.encoder.hidden, cfg.encoder.output_dim]
        params = enc.init(dims, derived_rng(cfg.seed, RNG_INIT), cfg.encoder.init_scale)
        return cls(cfg, train, eval_set, stream, settings_from_config(cfg, train), params)

    def evaluate(self, params, step: int) -> tuple[float, float]:
        ev = self.cfg.eval
        return evaluate(params, self.eval_set, self.cfg.stream.T, ev.k, derived_rng(self.cfg.seed, RNG_EVAL, step),
                        ev.clustering, ev.sigma)


def eval_steps(num_batches: int, period: int) -> list[int]:
    """Steps at which the frozen model is evaluated: 0, every ``period``, and the last."""
    steps = list(range(0, num_batches + 1, period))
    if steps[-1] != num_batches:
        steps.append(num_batches)
    return steps


def run_experiment(cfg: ExperimentConfig, resume_from=None, out_dir=None) -> list[MetricsRow]:
    """Train over the whole stream, writing metrics, state and the final checkpoint.

    With ``resume_from`` (a saved training state) the batches already consumed
    are skipped and metrics are written only for the remaining steps.
    """
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    exp = Experiment.prepare(cfg)
    identity = training_identity(cfg)
    if resume_from is not None:
        state = load_state(resume_from, identity)
    else:
        state = init_state(exp.initial_params, cfg.memory.capacity, cfg.seed)
    num_batches = len(exp.stream)
    when = set(eval_steps(num_batches, cfg.eval.period))
    consumed = sum(len(b) for b in exp.stream[: state.step])

    (out / "manifest.txt").write_text(
        f"scale_ull {__version__}\nconfig_sha256 {config_hash(cfg)}\nseed {cfg.seed}\n"
        f"batches {num_batches}\nresumed_from_step {state.step}\n", encoding="utf-8")
    (out / "config.json").write_text(serialize_config(cfg) + "\n", encoding="utf-8")

    rows = []
    last = (0.0, 0.0, 0.0)
    clock = time.perf_counter()

    def emit(writer):
        acc, knn = exp.evaluate(state.params, state.step)
        wall = (time.perf_counter() - clock) * 1000.0 if cfg.metrics.wall_clock else 0.0
        row = MetricsRow(state.step, last[0], last[1], last[2], acc, knn, len(state.buffer), wall)
        writer.write(row)
        rows.append(row)
        log.info("step %d acc %.4f knn %.4f loss %.4f", state.step, acc, knn, last[2])

    with MetricsWriter(out / "metrics.csv") as writer:
        if state.step == 0:
            emit(writer)
        for batch in exp.stream[state.step:]:
            state, res = train_step(state, batch, exp.settings, dump_dir=out)
            consumed += len(batch)
            last = (res.components[0], res.components[1], res.value)
            if state.step in when:
                emit(writer)
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_state(state, out / f"state_{state.step:06d}.npz", identity)

    total = sum(len(b) for b in exp.stream)
    if consumed != total:
        raise RuntimeError(f"consumed {consumed} samples but the stream holds {total}")
    enc.save_checkpoint(state.params, out / "encoder.ckpt")
    save_state(state, out / "state_final.npz", identity)
    return rows
