"""Experiment harness: the sweeps and comparisons reported by the evaluation
suite, each emitting one deterministic CSV.

Kinds:
    window_sweep     fine-tune on the last {1,3,5,7,...} days, AUC per window
    overlap          isolated vs weighted cross-domain fine-tuning
    de_sweep         encoder dimension grid
    beta_sweep       regularizer grid, with the encoder MI diagnostic
    baseline_compare zero-shot vs adapted AUC for each model kind

Every row is (condition, seed, domain); summary rows carry seed="mean".
Pretrained backbones are cached on disk keyed by a config digest plus seed,
so repeated runs and different sweeps over the same base setup reuse them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .datagen import InteractionRecord, filter_by_domain, generate, split_chronological
from .evals import (
    encoder_mi,
    report_from_scores,
    score_adapted,
    score_backbone,
    score_label_decile_kl,
)
from .models import FeatureSpace, MultiTaskModel, build_model, encode_records
from .trainer import TrainConfig, domain_key, finetune_all, parse_domain_key, pretrain

EXPERIMENT_KINDS = ("window_sweep", "overlap", "de_sweep", "beta_sweep", "baseline_compare")
CSV_HEADER = ("experiment", "condition", "seed", "domain", "ctr_auc", "ctcvr_auc", "encoder_mi", "score_label_kl")

# config sections whose keys shape the pretrained backbone
_BACKBONE_PREFIXES = ("datagen.", "model.", "train.batch_size", "train.epochs", "train.lr", "train.adagrad")


class ExperimentError(ValueError):
    pass


@dataclass
class Row:
    condition: str
    seed: str
    domain: str
    ctr_auc: float | None
    ctcvr_auc: float | None
    encoder_mi: float | None = None
    score_label_kl: float | None = None


@dataclass
class ExperimentContext:
    cfg: RunConfig
    workdir: Path

    @property
    def cache_dir(self) -> Path:
        d = self.workdir / "cache"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def dataset(self) -> tuple[list[InteractionRecord], list[InteractionRecord]]:
        data = generate(self.cfg.generator_config())
        return split_chronological(data, self.cfg.get_ratio("datagen.split_ratio"))

    def space(self) -> FeatureSpace:
        return self.cfg.feature_space()

    def pretrained(self, kind: str, seed: int, train_records) -> MultiTaskModel:
        """Backbone for (kind, seed), pretrained once and cached on disk."""
        digest = self.cfg.digest(_BACKBONE_PREFIXES)
        path = self.cache_dir / f"backbone-{kind}-{digest[:12]}-s{seed}.ckpt"
        model_cfg = replace(self.cfg.model_config(), kind=kind)
        model = build_model(model_cfg, self.space(), seed=seed)
        if path.exists():
            arrays, _ = load_checkpoint(path)
            model.restore(arrays)
            return model
        train_cfg = replace(self.cfg.train_config(), seed=seed)
        pretrain(model, train_records, train_cfg)
        save_checkpoint(path, model.named_parameters(), digest)
        return model


def expand_domain_selectors(spec: list[str], records: list[InteractionRecord]) -> dict[str, dict[str, int]]:
    """Expand entries like `period=*` over the ids present in the data;
    explicit keys pass through."""
    out: dict[str, dict[str, int]] = {}
    for entry in spec:
        topic, _, value = entry.partition("=")
        if value == "*":
            ids = sorted({r.domain_ids[topic] for r in records})
            for i in ids:
                sel = {topic: i}
                out[domain_key(sel)] = sel
        else:
            sel = parse_domain_key(entry)
            out[domain_key(sel)] = sel
    return out


def _domain_rows(records: list[InteractionRecord], selector: dict[str, int]) -> np.ndarray:
    return np.array(
        [j for j, r in enumerate(records) if all(r.domain_ids.get(t) == i for t, i in selector.items())],
        dtype=np.int64,
    )


def _shifted_condition_rows(
    ctx: ExperimentContext,
    condition: str,
    seed: int,
    backbone: MultiTaskModel,
    adapters: dict,
    test_records: list[InteractionRecord],
    selectors: dict[str, dict[str, int]],
    with_mi: bool = False,
) -> list[Row]:
    space = ctx.space()
    enc_test = encode_records(test_records, space)
    rows = []
    for key in sorted(adapters):
        idx = _domain_rows(test_records, selectors[key])
        if idx.size == 0:
            continue
        sub = enc_test.take(idx)
        p_ctr, p_ctcvr = score_adapted(backbone, adapters[key], sub, ctx.cfg.get_int("eval.batch_size"))
        rep = report_from_scores(p_ctr, p_ctcvr, sub, "test", condition, seed)
        mi = None
        if with_mi:
            mi = encoder_mi(backbone, adapters[key], sub, bins=ctx.cfg.get_int("eval.mi_bins"), seed=seed)
        rows.append(Row(condition, str(seed), key, rep.ctr_auc, rep.ctcvr_auc, encoder_mi=mi))
    return rows


def _finetune(ctx, backbone, train_records, selectors, seed, *, iak_overrides=None, train_overrides=None):
    datasets = {}
    for key, sel in selectors.items():
        recs = filter_by_domain(train_records, sel)
        if recs:
            datasets[key] = recs
    iak_cfg = ctx.cfg.iak_config()
    if iak_overrides:
        iak_cfg = replace(iak_cfg, **iak_overrides)
    train_cfg = replace(ctx.cfg.train_config(), seed=seed)
    if train_overrides:
        train_cfg = replace(train_cfg, **train_overrides)
    result = finetune_all(backbone, datasets, ctx.space(), train_cfg, iak_cfg)
    return result.adapters


def _run_window_sweep(ctx: ExperimentContext) -> list[Row]:
    train, test = ctx.dataset()
    selectors = expand_domain_selectors(ctx.cfg.get_list("train.finetune_domains"), train)
    kind = ctx.cfg.get("model.kind")
    rows = []
    for seed in ctx.cfg.get_int_list("eval.seeds"):
        backbone = ctx.pretrained(kind, seed, train)
        for w in ctx.cfg.get_int_list("eval.windows"):
            adapters = _finetune(ctx, backbone, train, selectors, seed,
                                 train_overrides={"finetune_window_days": w})
            rows.extend(_shifted_condition_rows(ctx, f"window={w}", seed, backbone, adapters, test, selectors))
    return rows


def _run_de_sweep(ctx: ExperimentContext) -> list[Row]:
    train, test = ctx.dataset()
    selectors = expand_domain_selectors(ctx.cfg.get_list("train.finetune_domains"), train)
    kind = ctx.cfg.get("model.kind")
    rows = []
    for seed in ctx.cfg.get_int_list("eval.seeds"):
        backbone = ctx.pretrained(kind, seed, train)
        for d_e in ctx.cfg.get_int_list("eval.de_grid"):
            adapters = _finetune(ctx, backbone, train, selectors, seed, iak_overrides={"d_e": d_e})
            rows.extend(_shifted_condition_rows(ctx, f"d_e={d_e}", seed, backbone, adapters, test, selectors))
    return rows


def _run_beta_sweep(ctx: ExperimentContext) -> list[Row]:
    train, test = ctx.dataset()
    selectors = expand_domain_selectors(ctx.cfg.get_list("train.finetune_domains"), train)
    kind = ctx.cfg.get("model.kind")
    rows = []
    for seed in ctx.cfg.get_int_list("eval.seeds"):
        backbone = ctx.pretrained(kind, seed, train)
        for beta in ctx.cfg.get_float_list("eval.betas"):
            adapters = _finetune(ctx, backbone, train, selectors, seed, iak_overrides={"beta": beta})
            rows.extend(
                _shifted_condition_rows(ctx, f"beta={beta:g}", seed, backbone, adapters, test, selectors, with_mi=True)
            )
    return rows


def _run_overlap(ctx: ExperimentContext) -> list[Row]:
    primary = ctx.cfg.get("eval.overlap_primary")
    weights = ctx.cfg.get_weight_map("eval.overlap_weights")
    if not primary or not weights:
        raise ExperimentError("overlap needs eval.overlap_primary and eval.overlap_weights")
    if primary not in weights:
        raise ExperimentError("overlap weights must include the primary domain")
    train, test = ctx.dataset()
    selectors = {key: parse_domain_key(key) for key in sorted(weights)}
    kind = ctx.cfg.get("model.kind")
    rows = []
    for seed in ctx.cfg.get_int_list("eval.seeds"):
        backbone = ctx.pretrained(kind, seed, train)
        iso = _finetune(ctx, backbone, train, {primary: selectors[primary]}, seed)
        rows.extend(
            _shifted_condition_rows(ctx, "isolated", seed, backbone, iso, test, {primary: selectors[primary]})
        )
        mixed = _finetune(ctx, backbone, train, selectors, seed, train_overrides={"mixing": weights})
        rows.extend(
            _shifted_condition_rows(
                ctx, "mixed", seed, backbone, {primary: mixed[primary]}, test, {primary: selectors[primary]}
            )
        )
    return rows


def _run_baseline_compare(ctx: ExperimentContext) -> list[Row]:
    train, test = ctx.dataset()
    selectors = expand_domain_selectors(ctx.cfg.get_list("train.finetune_domains"), train)
    space = ctx.space()
    enc_test = encode_records(test, space)
    rows = []
    for kind in ctx.cfg.get_list("eval.baseline_kinds"):
        for seed in ctx.cfg.get_int_list("eval.seeds"):
            backbone = ctx.pretrained(kind, seed, train)
            for key in sorted(selectors):
                idx = _domain_rows(test, selectors[key])
                if idx.size == 0:
                    continue
                sub = enc_test.take(idx)
                p_ctr, p_ctcvr = score_backbone(backbone, sub, ctx.cfg.get_int("eval.batch_size"))
                rep = report_from_scores(p_ctr, p_ctcvr, sub, "test", "zs", seed)
                kl = score_label_decile_kl(p_ctr, sub.click, sub.item)
                rows.append(
                    Row(f"kind={kind}:zero_shot", str(seed), key, rep.ctr_auc, rep.ctcvr_auc, score_label_kl=kl)
                )
            adapters = _finetune(ctx, backbone, train, selectors, seed)
            for key in sorted(adapters):
                idx = _domain_rows(test, selectors[key])
                if idx.size == 0:
                    continue
                sub = enc_test.take(idx)
                p_ctr, p_ctcvr = score_adapted(backbone, adapters[key], sub, ctx.cfg.get_int("eval.batch_size"))
                rep = report_from_scores(p_ctr, p_ctcvr, sub, "test", "iak", seed)
                kl = score_label_decile_kl(p_ctr, sub.click, sub.item)
                rows.append(Row(f"kind={kind}:iak", str(seed), key, rep.ctr_auc, rep.ctcvr_auc, score_label_kl=kl))
    return rows


_RUNNERS = {
    "window_sweep": _run_window_sweep,
    "overlap": _run_overlap,
    "de_sweep": _run_de_sweep,
    "beta_sweep": _run_beta_sweep,
    "baseline_compare": _run_baseline_compare,
}


def _mean_rows(rows: list[Row]) -> list[Row]:
    groups: dict[tuple[str, str], list[Row]] = {}
    for r in rows:
        groups.setdefault((r.condition, r.domain), []).append(r)

    def mean_of(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    out = []
    for (condition, domain), grp in sorted(groups.items()):
        out.append(
            Row(
                condition,
                "mean",
                domain,
                mean_of([g.ctr_auc for g in grp]),
                mean_of([g.ctcvr_auc for g in grp]),
                mean_of([g.encoder_mi for g in grp]),
                mean_of([g.score_label_kl for g in grp]),
            )
        )
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def write_rows(kind: str, rows: list[Row], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow(
                (kind, r.condition, r.seed, r.domain, _fmt(r.ctr_auc), _fmt(r.ctcvr_auc),
                 _fmt(r.encoder_mi), _fmt(r.score_label_kl))
            )


def run_experiment(kind: str, cfg: RunConfig, outdir: Path, workdir: Path) -> Path:
    """Dispatch one experiment kind; returns the CSV path it wrote."""
    if kind not in _RUNNERS:
        raise ExperimentError(f"unknown experiment kind {kind!r}; choose from {EXPERIMENT_KINDS}")
    ctx = ExperimentContext(cfg, Path(workdir))
    rows = _RUNNERS[kind](ctx)
    rows = rows + _mean_rows(rows)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / f"{kind}.csv"
    write_rows(kind, rows, path)
    return path


def read_rows(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))
