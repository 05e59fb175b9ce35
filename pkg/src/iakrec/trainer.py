"""Two-phase training pipeline: pretrain a backbone on all domains, then
fine-tune one adapter per target domain with batch-aware dynamic learning
rates and optional weighted cross-domain mixing."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import AdagradDecayState
from .datagen import InteractionRecord, window_by_days
from .iak import IAKAdapter, IAKConfig, adapter_step_cached, backbone_cache
from .models import EncodedBatch, FeatureSpace, MultiTaskModel, encode_records, task_bce

GRAD_NORM_FLOOR = 1e-8
SATURATION_LEVEL = 0.99  # max softmax share above this with >1 active domain


class TrainerError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 1024
    epochs: int = 1
    base_lr: float = 0.005
    adagrad_decay: float = 0.9999
    adagrad_epsilon: float = 1e-8
    seed: int = 0
    finetune_window_days: int = 0  # 0 = use the whole span
    mixing: dict[str, float] = field(default_factory=dict)
    joint: bool = True  # False trains domains one-by-one
    # "uniform" keeps adapters bit-independent of each other's labels;
    # "previous" feeds last-step gradient magnitudes into the rate softmax,
    # which couples domains through their shares
    lr_norms: str = "uniform"

    def validate(self) -> None:
        if self.batch_size < 1:
            raise TrainerError("batch_size must be >= 1")
        if self.base_lr <= 0:
            raise TrainerError("base_lr must be positive")
        if self.epochs < 1:
            raise TrainerError("epochs must be >= 1")
        if self.lr_norms not in ("uniform", "previous"):
            raise TrainerError(f"lr_norms must be uniform or previous, got {self.lr_norms!r}")
        if self.mixing:
            total = sum(self.mixing.values())
            if abs(total - 1.0) > 1e-9:
                raise TrainerError(f"mixing weights must sum to 1, got {total}")


def domain_key(selector: dict[str, int]) -> str:
    return ",".join(f"{t}={i}" for t, i in sorted(selector.items()))


def parse_domain_key(key: str) -> dict[str, int]:
    out: dict[str, int] = {}
    for part in key.split(","):
        topic, _, value = part.partition("=")
        if not value:
            raise TrainerError(f"bad domain key part {part!r}")
        out[topic.strip()] = int(value)
    return out


def model_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()


def _batch_indices(n: int, batch_size: int, epochs: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]


def pretrain(
    model: MultiTaskModel,
    records: list[InteractionRecord],
    config: TrainConfig,
) -> list[tuple[int, float, float, float]]:
    """Train the model on the full multi-domain stream. Returns the training
    curve as (step, loss, loss_ctr, loss_ctcvr) rows; ceil(N/B) steps per
    epoch."""
    config.validate()
    if not records:
        raise TrainerError("cannot pretrain on an empty dataset")
    encoded = encode_records(records, model.space)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7E7]))
    opt = AdagradDecayState(decay=config.adagrad_decay, epsilon=config.adagrad_epsilon)
    params = model.parameters()
    weights = model.config.loss_weights
    curve = []
    step = 0
    for idx in _batch_indices(len(encoded), config.batch_size, config.epochs, rng):
        batch = encoded.take(idx)
        ad.zero_grads(params)
        pred = model.forward_full(batch).prediction
        l_ctr = task_bce(pred.p_ctr, batch.click)
        l_ctcvr = task_bce(pred.p_ctcvr, batch.purchase)
        loss = ad.add(ad.mul(l_ctr, weights[0]), ad.mul(l_ctcvr, weights[1]))
        ad.backward(loss)
        ad.adagrad_decay_step(params, opt, config.base_lr)
        step += 1
        curve.append((step, float(loss.data), float(l_ctr.data), float(l_ctcvr.data)))
    return curve


def dynamic_lr(n_b: np.ndarray, grad_norms: np.ndarray, lam: float) -> np.ndarray:
    """Per-domain effective learning rates: softmax over active domains of
    sample count times reciprocal gradient magnitude, scaled by the base
    rate. Domains with no samples in the batch are masked to zero."""
    n_b = np.asarray(n_b, dtype=np.float64)
    grad_norms = np.asarray(grad_norms, dtype=np.float64)
    if np.any(grad_norms < 0):
        raise TrainerError("gradient norms must be non-negative")
    if lam <= 0:
        raise TrainerError("base learning rate must be positive")
    active = n_b > 0
    if not np.any(active):
        raise TrainerError("all domains empty in batch")
    w = 1.0 / np.maximum(grad_norms, GRAD_NORM_FLOOR)
    logits = n_b[active] * w[active]
    logits = logits - logits.max()
    soft = np.exp(logits)
    soft /= soft.sum()
    out = np.zeros_like(n_b)
    out[active] = soft * lam
    return out


@dataclass
class FinetuneRow:
    step: int
    domain: str
    n_batch: int
    loss: float
    grad_norm: float
    lr_effective: float
    lr_saturated: int


@dataclass
class FinetuneResult:
    adapters: dict[str, IAKAdapter]
    curve: list[FinetuneRow]


def mix_domains(
    primary_dataset: list[InteractionRecord],
    aux_datasets: dict[str, list[InteractionRecord]],
    weights: dict[str, float],
    rng: np.random.Generator,
    primary_key: str,
) -> Iterator[InteractionRecord]:
    """Infinite record stream: each slot is filled from domain d with
    probability weights[d], drawing without replacement until a domain's
    records run out, then reshuffling that domain for its next epoch."""
    total = sum(weights.values())
    if abs(total - 1.0) > 1e-9:
        raise TrainerError(f"mixing weights must sum to 1, got {total}")
    pools = {primary_key: primary_dataset}
    pools.update(aux_datasets)
    for key in weights:
        if key not in pools:
            raise TrainerError(f"mixing weight for unknown domain {key!r}")
    keys = sorted(weights)
    probs = np.array([weights[k] for k in keys])
    queues: dict[str, list[int]] = {k: [] for k in keys}
    while True:
        k = keys[rng.choice(len(keys), p=probs)]
        if not queues[k]:
            queues[k] = list(rng.permutation(len(pools[k])))
        yield pools[k][queues[k].pop()]


def _finetune_sequential(
    backbone: MultiTaskModel,
    adapter: IAKAdapter,
    stream: list[InteractionRecord],
    space: FeatureSpace,
    config: TrainConfig,
    iak_config: IAKConfig,
    rng: np.random.Generator,
    allow_mixed: bool,
    start_step: int,
) -> list[FinetuneRow]:
    encoded = encode_records(stream, space)
    if not allow_mixed:
        for topic, want in adapter.domain_key.items():
            if np.any(getattr(encoded, topic) != want):
                raise TrainerError(f"stream contains records outside {adapter.key_str()}")
    rep, base = backbone_cache(backbone, encoded)
    opt = AdagradDecayState(decay=config.adagrad_decay, epsilon=config.adagrad_epsilon)
    rows = []
    step = start_step
    for idx in _batch_indices(len(encoded), config.batch_size, config.epochs, rng):
        loss, gnorm = adapter_step_cached(
            backbone, adapter, rep[idx], base[idx], encoded.click[idx], encoded.purchase[idx],
            opt, config.base_lr, iak_config.beta, weights=backbone.config.loss_weights,
        )
        step += 1
        rows.append(FinetuneRow(step, adapter.key_str(), len(idx), loss, gnorm, config.base_lr, 0))
    return rows


def finetune_all(
    backbone: MultiTaskModel,
    domain_datasets: dict[str, list[InteractionRecord]],
    space: FeatureSpace,
    config: TrainConfig,
    iak_config: IAKConfig,
) -> FinetuneResult:
    """Fine-tune one adapter per domain on a frozen backbone.

    Joint mode shuffles all domains into shared batches and scales each
    adapter's optimizer step by its dynamic learning rate. With
    lr_norms="uniform" (default) the rate softmax sees only batch sample
    counts, so each adapter stays bit-independent of other domains' labels;
    "previous" feeds last-step gradient magnitudes in, which couples the
    shares (the softmax can then saturate; saturation is flagged in the
    curve rows). Sequential mode trains adapters one-by-one at the base
    rate. A mixing map reroutes the highest-weighted (primary) domain's
    stream through weighted cross-domain sampling."""
    config.validate()
    iak_config.validate()
    if not domain_datasets:
        raise TrainerError("no domain datasets given")
    for key, recs in domain_datasets.items():
        if not recs:
            raise TrainerError(f"domain dataset {key!r} is empty")
    backbone.set_trainable(False)

    windowed = {
        key: window_by_days(recs, config.finetune_window_days)
        for key, recs in sorted(domain_datasets.items())
    }
    for key, recs in windowed.items():
        if not recs:
            raise TrainerError(f"window of {config.finetune_window_days} days leaves {key!r} empty")

    seeds = np.random.SeedSequence([config.seed, 0xF17E]).spawn(len(windowed) + 1)
    adapters = {
        key: IAKAdapter(backbone.rep_dim, backbone.n_heads, iak_config, parse_domain_key(key),
                        seed=int(s.generate_state(1)[0]))
        for (key, s) in zip(windowed, seeds[:-1])
    }
    shared_rng = np.random.default_rng(seeds[-1])
    curve: list[FinetuneRow] = []

    mixing_primary = max(config.mixing, key=lambda k: config.mixing[k]) if config.mixing else None
    if mixing_primary is not None and mixing_primary not in adapters:
        raise TrainerError(f"mixing primary {mixing_primary!r} has no dataset")

    plain_keys = [k for k in windowed if k != mixing_primary]

    if config.joint and len(plain_keys) > 1:
        curve.extend(
            _finetune_joint(backbone, {k: windowed[k] for k in plain_keys}, adapters, space, config, iak_config, shared_rng)
        )
    else:
        for key in plain_keys:
            curve.extend(
                _finetune_sequential(
                    backbone, adapters[key], windowed[key], space, config, iak_config,
                    shared_rng, allow_mixed=False, start_step=len(curve),
                )
            )

    if mixing_primary is not None:
        aux = {k: v for k, v in windowed.items() if k != mixing_primary and k in config.mixing}
        missing = [k for k in config.mixing if k != mixing_primary and k not in windowed]
        if missing:
            raise TrainerError(f"mixing references domains without datasets: {missing}")
        stream_gen = mix_domains(windowed[mixing_primary], aux, config.mixing, shared_rng, mixing_primary)
        n_slots = config.epochs * len(windowed[mixing_primary])
        stream = [next(stream_gen) for _ in range(n_slots)]
        one_pass = TrainConfig(
            batch_size=config.batch_size, epochs=1, base_lr=config.base_lr,
            adagrad_decay=config.adagrad_decay, adagrad_epsilon=config.adagrad_epsilon,
            seed=config.seed,
        )
        curve.extend(
            _finetune_sequential(
                backbone, adapters[mixing_primary], stream, space, one_pass, iak_config,
                shared_rng, allow_mixed=True, start_step=len(curve),
            )
        )

    return FinetuneResult(adapters, curve)


def _finetune_joint(
    backbone: MultiTaskModel,
    datasets: dict[str, list[InteractionRecord]],
    adapters: dict[str, IAKAdapter],
    space: FeatureSpace,
    config: TrainConfig,
    iak_config: IAKConfig,
    rng: np.random.Generator,
) -> list[FinetuneRow]:
    keys = sorted(datasets)
    encoded = {k: encode_records(datasets[k], space) for k in keys}
    cached = {k: backbone_cache(backbone, encoded[k]) for k in keys}
    opts = {k: AdagradDecayState(decay=config.adagrad_decay, epsilon=config.adagrad_epsilon) for k in keys}
    # the joint stream is the shuffled union of (domain, row) pairs
    tagged = np.concatenate([
        np.stack([np.full(len(encoded[k]), ki), np.arange(len(encoded[k]))], axis=1)
        for ki, k in enumerate(keys)
    ])
    prev_norms = np.ones(len(keys))
    rows: list[FinetuneRow] = []
    step = 0
    weights = backbone.config.loss_weights
    for sel in _batch_indices(len(tagged), config.batch_size, config.epochs, rng):
        batch_tags = tagged[sel]
        n_b = np.array([np.sum(batch_tags[:, 0] == ki) for ki in range(len(keys))], dtype=np.float64)
        lr_hat = dynamic_lr(n_b, prev_norms, config.base_lr)
        shares = lr_hat / config.base_lr
        saturated = int(np.sum(n_b > 0) > 1 and shares.max() > SATURATION_LEVEL)
        step += 1
        new_norms = prev_norms.copy()
        for ki, k in enumerate(keys):
            if n_b[ki] == 0 or lr_hat[ki] == 0.0:
                continue
            idx = batch_tags[batch_tags[:, 0] == ki][:, 1]
            rep, base = cached[k]
            loss, gnorm = adapter_step_cached(
                backbone, adapters[k], rep[idx], base[idx],
                encoded[k].click[idx], encoded[k].purchase[idx],
                opts[k], float(lr_hat[ki]), iak_config.beta, weights=weights,
            )
            new_norms[ki] = gnorm
            rows.append(FinetuneRow(step, k, int(n_b[ki]), loss, gnorm, float(lr_hat[ki]), saturated))
        if config.lr_norms == "previous":
            prev_norms = new_norms
    return rows
