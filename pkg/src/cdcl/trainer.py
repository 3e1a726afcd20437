"""Mixed-domain training loop, the four training configurations and the
(beta, gamma) sweep."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from typing import Optional

import numpy as np
import torch

from . import synthgen
from .data import REAL, SYNTHETIC, AnnotatedSample
from .decode import DecodeOptions
from .network import CDCLNet, ModelConfig, build_model, image_tensor, save_checkpoint
from .objective import TERMS, LossWeights, extra_pose_loss, loss_total
from .skeleton import get_projection, get_skeleton
from .targets import DEFAULT_LIMB_WIDTH, DEFAULT_SIGMA, build_targets

log = logging.getLogger(__name__)

SYN, NO_SP, CDCL, CDCL_REAL = "SYN", "NO_SP", "CDCL", "CDCL_REAL"
CONFIGURATIONS = (SYN, NO_SP, CDCL, CDCL_REAL)
_ALIASES = {"NO-SP": NO_SP, "CDCL+REAL": CDCL_REAL, "CDCL+Real": CDCL_REAL}

LOG_COLUMNS = ("step",) + TERMS + ("total",)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class DataSource:
    """Either a manifest on disk or an in-memory generator recipe."""

    manifest: Optional[str] = None
    scene: Optional[dict] = None
    count: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Datasets:
    real: DataSource = field(default_factory=lambda: DataSource(
        scene=synthgen.SceneConfig(seed=1).to_dict(), count=64))
    synthetic: DataSource = field(default_factory=lambda: DataSource(
        scene=synthgen.SceneConfig(seed=2).to_dict(), count=64))
    eval: DataSource = field(default_factory=lambda: DataSource(
        scene=synthgen.SceneConfig(seed=3).to_dict(), count=32))


@dataclass
class SweepConfig:
    beta: list = field(default_factory=lambda: [0.5, 1.0, 2.0])
    gamma: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 1.0])
    steps: Optional[int] = None


@dataclass
class AblationConfig:
    axes: list = field(default_factory=lambda: ["configuration", "appearance", "models", "backgrounds"])
    repeats: int = 3
    models: list = field(default_factory=lambda: [1, 5, 10, 20])
    backgrounds: list = field(default_factory=lambda: [1, 100, 1000])


@dataclass
class TrainConfig:
    configuration: str = CDCL
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 10
    lr: float = 1e-3
    steps: int = 500
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    datasets: Datasets = field(default_factory=Datasets)
    sigma: float = DEFAULT_SIGMA
    limb_width: float = DEFAULT_LIMB_WIDTH
    novel_weight: float = 1.0
    checkpoint_every: int = 0
    projection: str = "parts14->parts6"
    decode: DecodeOptions = field(default_factory=DecodeOptions)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        self.configuration = _ALIASES.get(self.configuration, self.configuration)
        if self.configuration not in CONFIGURATIONS:
            raise ValueError(f"unknown configuration {self.configuration!r}; expected one of {CONFIGURATIONS}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.configuration != SYN and self.batch_size % 2:
            raise ValueError(f"mixed configuration {self.configuration} needs an even batch_size")

    def to_dict(self) -> dict:
        return to_plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return from_plain(cls, d)


def to_plain(obj):
    if is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_plain(v) for k, v in obj.items()}
    return obj


def from_plain(cls, d):
    if not isinstance(d, dict):
        raise TypeError(f"expected an object for {cls.__name__}, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise KeyError(f"unknown {cls.__name__} field(s): {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        ftype = _field_class(cls, name)
        kwargs[name] = from_plain(ftype, value) if ftype is not None and isinstance(value, dict) else value
    return cls(**kwargs)


_NESTED = {
    "TrainConfig": {"weights": LossWeights, "model": ModelConfig, "datasets": Datasets,
                    "decode": DecodeOptions, "sweep": SweepConfig, "ablation": AblationConfig},
    "Datasets": {"real": DataSource, "synthetic": DataSource, "eval": DataSource},
}


def _field_class(cls, name):
    return _NESTED.get(cls.__name__, {}).get(name)


# -- datasets --------------------------------------------------------------

_SAMPLE_CACHE: dict = {}


def load_source(src: DataSource, domain: str) -> list[AnnotatedSample]:
    if src.manifest:
        return synthgen.load_dataset(src.manifest)
    if src.scene is None or src.count < 1:
        raise ValueError(f"{domain} data source needs a manifest or a scene recipe with count >= 1")
    scene = synthgen.SceneConfig.from_dict(src.scene)
    key = (repr(sorted(scene.to_dict().items())), src.count, domain)
    if key not in _SAMPLE_CACHE:
        _SAMPLE_CACHE[key] = synthgen.generate_samples(scene, src.count, domain)
    return _SAMPLE_CACHE[key]


@dataclass
class TargetBatch:
    K: torch.Tensor
    P: torch.Tensor
    B: Optional[torch.Tensor]
    M: torch.Tensor
    K2: Optional[torch.Tensor] = None
    P2: Optional[torch.Tensor] = None


class TrainSet:
    """Images and precomputed targets of one domain as stacked tensors."""

    def __init__(self, samples, domain: str, model_cfg: ModelConfig, sigma: float, limb_width: float,
                 with_parts: bool):
        if not samples:
            raise ValueError(f"{domain} dataset is empty")
        self.samples = samples
        self.domain = domain
        spec, tax = model_cfg.skeleton, model_cfg.part_taxonomy
        extra = get_skeleton(model_cfg.extra_spec) if model_cfg.extra_spec else None
        bundles = []
        for s in samples:
            parts = s.parts
            if domain == REAL:
                parts = s.eval_parts if with_parts else None
            bundles.append(build_targets(s, spec, tax, model_cfg.output_stride, sigma, limb_width,
                                         parts=parts, extra_spec=extra))
        self.images = image_tensor(np.stack([s.image for s in samples]))
        self.K = torch.from_numpy(np.stack([b.K for b in bundles]))
        self.P = torch.from_numpy(np.stack([b.P for b in bundles]))
        self.M = torch.from_numpy(np.stack([b.M for b in bundles]))
        has_parts = all(b.B is not None for b in bundles)
        self.B = torch.from_numpy(np.stack([b.B for b in bundles])) if has_parts else None
        has_extra = extra is not None and all(b.K2 is not None for b in bundles)
        self.K2 = torch.from_numpy(np.stack([b.K2 for b in bundles])) if has_extra else None
        self.P2 = torch.from_numpy(np.stack([b.P2 for b in bundles])) if has_extra else None

    def __len__(self):
        return len(self.samples)

    def targets(self, idx) -> TargetBatch:
        pick = lambda t: None if t is None else t[idx]
        return TargetBatch(self.K[idx], self.P[idx], pick(self.B), self.M[idx], pick(self.K2), pick(self.P2))


class EpochSampler:
    """Draws without replacement from a shuffled order; reshuffles when exhausted."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while len(out) < k:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            m = min(k - len(out), self.n - self.pos)
            out.extend(self.order[self.pos:self.pos + m])
            self.pos += m
        return np.asarray(out, dtype=np.int64)


@dataclass
class Batch:
    real_idx: np.ndarray
    syn_idx: np.ndarray

    @property
    def domains(self) -> list:
        return [REAL] * len(self.real_idx) + [SYNTHETIC] * len(self.syn_idx)


def mixed_batch(real_sampler: EpochSampler, syn_sampler: EpochSampler, batch_size: int) -> Batch:
    """Exactly ``batch_size / 2`` samples from each domain."""
    if batch_size % 2:
        raise ValueError(f"mixed batches need an even batch_size, got {batch_size}")
    if real_sampler.n == 0 or syn_sampler.n == 0:
        raise ValueError("both domains must be non-empty")
    half = batch_size // 2
    return Batch(real_sampler.take(half), syn_sampler.take(half))


def synthetic_batch(syn_sampler: EpochSampler, batch_size: int) -> Batch:
    return Batch(np.zeros(0, dtype=np.int64), syn_sampler.take(batch_size))


# -- training --------------------------------------------------------------

def configuration_weights(name: str, shared: LossWeights) -> LossWeights:
    if name == SYN:
        return replace(shared, alpha=0.0)
    if name == NO_SP:
        return replace(shared, beta=0.0)
    return replace(shared)


@dataclass
class TrainResult:
    model: CDCLNet
    checkpoint: Optional[str]
    log_path: Optional[str]
    rows: list
    real_part_terms: int = 0  # times a real-domain part loss was evaluated


def _write_log_header(path):
    with open(path, "w", newline="") as f:
        csv.writer(f).writerow(LOG_COLUMNS)


def _append_log(path, row):
    with open(path, "a", newline="") as f:
        csv.writer(f).writerow([row["step"]] + [f"{row[k]:.8g}" for k in LOG_COLUMNS[1:]])


def prepare_sets(config: TrainConfig):
    name = config.configuration
    syn = TrainSet(load_source(config.datasets.synthetic, SYNTHETIC), SYNTHETIC, config.model,
                   config.sigma, config.limb_width, with_parts=True)
    real = None
    if name != SYN:
        real = TrainSet(load_source(config.datasets.real, REAL), REAL, config.model,
                        config.sigma, config.limb_width, with_parts=(name == CDCL_REAL))
        if name == CDCL_REAL and real.B is None:
            raise ValueError("CDCL_REAL needs real-domain part labels")
    return real, syn


def train(config: TrainConfig, out_dir: Optional[str] = None, sets=None,
          model: Optional[CDCLNet] = None) -> TrainResult:
    """Run ``config.steps`` Adam steps on the weighted objective.

    Writes ``train_log.csv``, periodic ``step_XXXXXX.ckpt`` files and
    ``final.ckpt`` into ``out_dir`` when given. Deterministic for a fixed
    config on a single thread.
    """
    name = config.configuration
    weights = config.weights
    real, syn = sets if sets is not None else prepare_sets(config)
    allow_real_parts = name == CDCL_REAL

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = build_model(replace(config.model, seed=config.seed))
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    syn_sampler = EpochSampler(len(syn), rng)
    real_sampler = EpochSampler(len(real), rng) if real is not None else None

    log_path = ckpt = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.csv")
        _write_log_header(log_path)
    rows, real_part_terms = [], 0
    last_good = None

    for step in range(1, config.steps + 1):
        if real is None:
            batch = synthetic_batch(syn_sampler, config.batch_size)
        else:
            batch = mixed_batch(real_sampler, syn_sampler, config.batch_size)
        nr = len(batch.real_idx)
        imgs = [syn.images[batch.syn_idx]]
        if nr:
            imgs.insert(0, real.images[batch.real_idx])
        out = model(torch.cat(imgs))
        real_out = out.select(slice(0, nr)) if nr else None
        syn_out = out.select(slice(nr, None))
        real_t = real.targets(batch.real_idx) if nr else None
        syn_t = syn.targets(batch.syn_idx)

        total, terms = loss_total(real_out, real_t, syn_out, syn_t, weights, allow_real_parts=allow_real_parts)
        extra = extra_pose_loss(syn_out, syn_t, config.novel_weight, weights.reduction)
        if extra is not None:
            total = total + extra
        if "part_r" in terms:
            real_part_terms += 1

        value = float(total.detach())
        if not math.isfinite(value):
            msg = f"non-finite loss at step {step}"
            if out_dir and last_good:
                msg += f"; last good checkpoint {last_good}"
            raise TrainingDiverged(msg)

        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()

        row = {"step": step, "total": value}
        for k in TERMS:
            row[k] = float(terms[k].detach()) if k in terms else 0.0
        rows.append(row)
        if log_path:
            _append_log(log_path, row)
        if out_dir and config.checkpoint_every and step % config.checkpoint_every == 0:
            last_good = os.path.join(out_dir, f"step_{step:06d}.ckpt")
            save_checkpoint(model, last_good, {"step": step})

    if out_dir:
        ckpt = os.path.join(out_dir, "final.ckpt")
        save_checkpoint(model, ckpt, {"step": config.steps, "configuration": name})
    model.eval()
    return TrainResult(model, ckpt, log_path, rows, real_part_terms)


def evaluation_set(config: TrainConfig) -> list[AnnotatedSample]:
    return load_source(config.datasets.eval, REAL)


def run_configuration(name: str, shared: TrainConfig, out_dir: Optional[str] = None) -> tuple[TrainResult, dict]:
    """Train one of SYN / NO_SP / CDCL / CDCL_REAL and evaluate it."""
    from .evalkit import evaluate

    name = _ALIASES.get(name, name)
    cfg = replace(shared, configuration=name, weights=configuration_weights(name, shared.weights))
    result = train(cfg, out_dir)
    row = evaluate(result.model, evaluation_set(cfg), get_projection(cfg.projection), cfg.decode,
                   config_id=name, seed=cfg.seed)
    return result, row


def sweep(beta_values, gamma_values, shared: TrainConfig, out_dir: Optional[str] = None) -> list[dict]:
    """One CDCL model per (beta, gamma) cell with alpha fixed at 1."""
    from .evalkit import evaluate, write_rows

    if not beta_values or not gamma_values:
        raise ValueError("sweep needs at least one beta and one gamma value")
    steps = shared.sweep.steps or shared.steps
    rows = []
    for beta in beta_values:
        for gamma in gamma_values:
            w = replace(shared.weights, alpha=1.0, beta=float(beta), gamma=float(gamma))
            cfg = replace(shared, configuration=CDCL, weights=w, steps=steps)
            cell_dir = os.path.join(out_dir, f"beta{beta:g}_gamma{gamma:g}") if out_dir else None
            result = train(cfg, cell_dir)
            row = evaluate(result.model, evaluation_set(cfg), get_projection(cfg.projection), cfg.decode,
                           config_id=f"beta={beta:g},gamma={gamma:g}", seed=cfg.seed)
            row = {"beta": float(beta), "gamma": float(gamma), **row}
            rows.append(row)
            if out_dir:
                write_rows(os.path.join(out_dir, "sweep.csv"), rows)
    return rows
