"""Pipeline stages behind the CLI: each one reads earlier artifacts,
writes its own atomically, and records a run manifest.

Stage order: gen-cohort -> pretrain-codes -> pretrain-autoencoder ->
train -> evaluate / export-attention / export-embeddings. Missing
prerequisites fail fast naming the stage that must run first.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numkit as nk
from .artifacts import atomic_write_csv, atomic_write_json, write_manifest
from .autoencoder import (
    AutoencoderHyper,
    encode_sequence,
    init_autoencoder,
    pretrain_autoencoder,
)
from .code2vec import (
    build_alignment,
    build_visit_windows,
    load_embedding,
    save_embedding,
    train_code_embeddings,
)
from .cohort import build_matched_cohort, generate_population, save_match_table
from .config import ExperimentConfig
from .ehr import build_feature_space, index_patients, load_cohort, save_cohort
from .errors import ConfigError, PrerequisiteError, ValidationError
from .evaluate import (
    auprc,
    backproject_attention,
    neg_log_likelihood,
    write_attention_csv,
    write_embeddings_csv,
    write_scores_csv,
)
from .figures import save_attention_heatmap, save_loss_curves, save_pr_curve
from .predictor import (
    SEQUENCE_VARIANTS,
    PredictorHyper,
    init_model,
    prepare_inputs,
    score_inputs,
    train_model,
)

log = logging.getLogger("trace_seq")

STAGES = (
    "gen-cohort",
    "pretrain-codes",
    "pretrain-autoencoder",
    "train",
    "evaluate",
    "export-attention",
    "export-embeddings",
)


@dataclass
class StageResult:
    stage: str
    outputs: list[Path]
    manifest: Path


class _Paths:
    def __init__(self, out_dir: str | Path):
        self.out = Path(out_dir)
        self.cohort = self.out / "cohort.jsonl"
        self.match_table = self.out / "match_table.csv"
        self.codes_base = self.out / "code_embeddings"
        self.codes_manifest = self.out / "code_embeddings.json"
        self.codes_align = self.out / "code_embeddings.align.json"
        self.codes_log = self.out / "code_pretrain_log.csv"

    def ae_base(self, kind: str, final: bool = False) -> Path:
        suffix = "_final" if final else ""
        return self.out / f"autoencoder_{kind}{suffix}"

    def model_base(self, variant: str) -> Path:
        return self.out / f"model_{variant}"


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise PrerequisiteError(stage, f"expected {path}")
    return path


def _require_checkpoint(base: Path, stage: str) -> Path:
    if not nk.checkpoint_exists(base):
        raise PrerequisiteError(stage, f"expected checkpoint {base}.json/.bin")
    return base


def _predictor_hyper(cfg: ExperimentConfig) -> PredictorHyper:
    h = cfg.hyper
    return PredictorHyper(
        downsized_dim=h.downsized_dim,
        embed_dim=h.embed_dim,
        ff_dim=h.ff_dim,
        dropout=h.dropout,
        attention_dim=h.attention_dim,
    )


def _load_cohort_inputs(cfg: ExperimentConfig, paths: _Paths, variant: str):
    """Load the cohort and build per-split model inputs for ``variant``."""
    patients, space, seed, split = load_cohort(paths.cohort)
    alignment = None
    n_pre = 0
    if variant in SEQUENCE_VARIANTS and not variant.endswith("_base"):
        _require_checkpoint(paths.codes_base, "pretrain-codes")
        table, alignment, _ = load_embedding(paths.codes_base)
        n_pre = table.matrix.shape[0]
        if alignment is None:
            raise ValidationError("code embedding checkpoint lacks an alignment map")
    with_counts = variant in ("LR", "MLP")
    inputs = prepare_inputs(
        patients, space, cfg.hyper.max_visits,
        alignment=alignment, n_pretrain_codes=n_pre, with_counts=with_counts,
    )
    by_split: dict[str, list] = {"train": [], "valid": [], "test": []}
    for pi in inputs:
        by_split[split[pi.id]].append(pi)
    return patients, space, by_split


def _load_model(cfg: ExperimentConfig, paths: _Paths, space):
    """Rebuild the configured variant from its trained checkpoint."""
    variant = cfg.train.variant
    base = paths.model_base(variant)
    _require_checkpoint(base, "train")
    values, ckpt_seed = nk.load_checkpoint(base)
    hyper = _predictor_hyper(cfg)
    code_matrix = values.get("codes.table")
    encoder_values = {k: v for k, v in values.items() if k.startswith("enc.")}
    model = init_model(
        variant, space, hyper, seed=ckpt_seed,
        encoder_values=encoder_values or None, code_matrix=code_matrix,
    )
    nk.restore(model.params(), values)
    return model, base


# ---------------------------------------------------------------------------
# stages


def _stage_gen_cohort(cfg: ExperimentConfig, paths: _Paths) -> list[Path]:
    gen_cfg = cfg.generator_config()
    log.info("generating population: %d patients", gen_cfg.n_patients)
    raw = generate_population(gen_cfg)
    space = build_feature_space(raw, min_count=cfg.cohort.min_count)
    patients = index_patients(raw, space)
    cohort, match = build_matched_cohort(
        patients,
        controls_per_case=cfg.hyper.controls_per_case,
        split_fractions=cfg.hyper.split,
        seed=cfg.seed,
    )
    log.info(
        "matched cohort: %d patients (%d cases), prevalence %.4f",
        len(cohort.patients), sum(p.label for p in cohort.patients), cohort.prevalence,
    )
    save_cohort(paths.cohort, cohort.patients, space, cfg.seed, split=cohort.split)
    save_match_table(paths.match_table, match)
    return [paths.cohort, paths.match_table]


def _stage_pretrain_codes(cfg: ExperimentConfig, paths: _Paths) -> list[Path]:
    _require(paths.cohort, "gen-cohort")
    _, space, _, _ = load_cohort(paths.cohort)
    pre_cfg = cfg.pretrain_generator_config()
    log.info("generating pre-training corpus: %d patients", pre_cfg.n_patients)
    raw = generate_population(pre_cfg)
    pre_space = build_feature_space(raw, min_count=cfg.pretrain.min_count)
    patients = index_patients(raw, pre_space)
    windows = build_visit_windows(patients, window=cfg.hyper.med2vec_window)
    log.info("training code embeddings on %d windows", len(windows))
    table, curve = train_code_embeddings(
        windows, pre_space.codes,
        dim=cfg.hyper.embed_dim,
        epochs=cfg.pretrain.epochs,
        batch_size=cfg.hyper.batch_size,
        seed=cfg.seed,
        rho=cfg.hyper.rho, eps=cfg.hyper.eps, lr=cfg.hyper.lr,
    )
    alignment = build_alignment(space.codes, table)
    log.info(
        "alignment: %d/%d experiment codes are OOV",
        alignment.n_oov(), len(space.codes),
    )
    save_embedding(
        paths.codes_base, table,
        experiment_vocab=space.codes, alignment=alignment, seed=cfg.seed,
    )
    atomic_write_csv(
        paths.codes_log, ["epoch", "train_loss"],
        [[i, f"{v:.12g}"] for i, v in enumerate(curve.epoch_losses)],
    )
    return [
        paths.codes_manifest, Path(str(paths.codes_base) + ".bin"),
        paths.codes_align, paths.codes_log,
    ]


def _assemble_split_sequences(cfg, paths):
    patients, space, _, split = load_cohort(paths.cohort)
    inputs = prepare_inputs(patients, space, cfg.hyper.max_visits)
    train = [pi.vecs for pi in inputs if split[pi.id] == "train"]
    valid = [pi.vecs for pi in inputs if split[pi.id] == "valid"]
    return space, train, valid


def _stage_pretrain_autoencoder(cfg: ExperimentConfig, paths: _Paths) -> list[Path]:
    _require(paths.cohort, "gen-cohort")
    space, train, valid = _assemble_split_sequences(cfg, paths)
    kind = cfg.autoencoder.encoder
    hyper = AutoencoderHyper(
        downsized_dim=cfg.hyper.downsized_dim,
        embed_dim=cfg.hyper.embed_dim,
        ff_dim=cfg.hyper.ff_dim,
        dropout=cfg.hyper.dropout,
        visit_encoder=kind,
    )
    params = init_autoencoder(space, hyper, np.random.default_rng(np.random.SeedSequence((cfg.seed, 8))))
    log.info("pre-training %s autoencoder on %d sequences", kind, len(train))
    result = pretrain_autoencoder(
        train, valid, params, space,
        epochs=cfg.autoencoder.epochs,
        batch_size=cfg.hyper.batch_size,
        seed=cfg.seed,
        rho=cfg.hyper.rho, eps=cfg.hyper.eps, lr=cfg.hyper.lr,
    )
    plist = params.params()
    final_base = paths.ae_base(kind, final=True)
    nk.save_checkpoint(final_base, plist, seed=cfg.seed)
    for p in plist:
        p.data[...] = result.best_values[p.name]
    best_base = paths.ae_base(kind)
    nk.save_checkpoint(best_base, plist, seed=cfg.seed)
    fields = ["epoch", "train_loss", "valid_loss", "train_codes",
              "train_observations", "train_demographics", "train_numerics"]
    log_path = paths.out / f"autoencoder_{kind}_log.csv"
    atomic_write_csv(
        log_path, fields,
        [[row["epoch"]] + [f"{row[f]:.12g}" for f in fields[1:]] for row in result.history],
    )
    fig_path = paths.out / f"autoencoder_{kind}_loss.png"
    save_loss_curves(result.history, ["train_loss", "valid_loss"], fig_path,
                     title=f"{kind} autoencoder reconstruction loss")
    return [
        Path(str(best_base) + ".json"), Path(str(best_base) + ".bin"),
        Path(str(final_base) + ".json"), Path(str(final_base) + ".bin"),
        log_path, fig_path,
    ]


def _stage_train(cfg: ExperimentConfig, paths: _Paths) -> list[Path]:
    _require(paths.cohort, "gen-cohort")
    variant = cfg.train.variant
    patients, space, by_split = _load_cohort_inputs(cfg, paths, variant)
    hyper = _predictor_hyper(cfg)
    encoder_values = None
    code_matrix = None
    if variant in SEQUENCE_VARIANTS:
        kind = "relu" if variant.startswith("RACE") else "transformer"
        ae_base = _require_checkpoint(paths.ae_base(kind), "pretrain-autoencoder")
        values, _ = nk.load_checkpoint(ae_base)
        encoder_values = {k: v for k, v in values.items() if k.startswith("enc.")}
        if not variant.endswith("_base"):
            table, _, _ = load_embedding(paths.codes_base)
            code_matrix = table.matrix
    model = init_model(
        variant, space, hyper, seed=cfg.seed,
        encoder_values=encoder_values, code_matrix=code_matrix,
    )
    log.info(
        "training %s: train/valid/test = %d/%d/%d",
        variant, len(by_split["train"]), len(by_split["valid"]), len(by_split["test"]),
    )
    result = train_model(
        model, by_split,
        epochs=cfg.train.epochs,
        batch_size=cfg.hyper.batch_size,
        seed=cfg.seed,
        rho=cfg.hyper.rho, eps=cfg.hyper.eps, lr=cfg.hyper.lr,
    )
    base = paths.model_base(variant)
    nk.save_checkpoint(base, model.params(), seed=cfg.seed)
    metrics = dict(result.metrics)
    # wall time lives in the run manifest; artifacts stay reproducible
    metrics["wall_clock"] = None
    metrics_path = paths.out / f"metrics_{variant}.json"
    atomic_write_json(metrics_path, metrics)
    log_path = paths.out / f"train_log_{variant}.csv"
    atomic_write_csv(
        log_path, ["epoch", "train_bce", "valid_auprc"],
        [
            [row["epoch"], f"{row['train_bce']:.12g}", f"{row.get('valid_auprc', float('nan')):.12g}"]
            for row in result.history
        ],
    )
    fig_path = paths.out / f"train_log_{variant}.png"
    save_loss_curves(result.history, ["train_bce", "valid_auprc"], fig_path,
                     title=f"{variant} training")
    log.info("%s: best epoch %s, valid AUPRC %.4f, test AUPRC %.4f",
             variant, metrics["best_epoch"], metrics["auprc_valid"] or float("nan"),
             metrics["auprc_test"] or float("nan"))
    return [Path(str(base) + ".json"), Path(str(base) + ".bin"), metrics_path, log_path, fig_path]


def _stage_evaluate(cfg: ExperimentConfig, paths: _Paths) -> list[Path]:
    _require(paths.cohort, "gen-cohort")
    variant = cfg.train.variant
    patients, space, by_split = _load_cohort_inputs(cfg, paths, variant)
    model, _ = _load_model(cfg, paths, space)
    scored = score_inputs(model, by_split["test"], split="test")
    metrics = {
        "variant": variant,
        "seed": cfg.seed,
        "n_test": len(scored.ids),
        "prevalence": float(scored.labels.mean()),
        "auprc_test": auprc(scored.labels, scored.scores),
        "nll_test": neg_log_likelihood(scored.labels, scored.scores),
        "wall_clock": None,
    }
    metrics_path = paths.out / f"eval_metrics_{variant}.json"
    atomic_write_json(metrics_path, metrics)
    scores_path = paths.out / f"scores_{variant}.csv"
    write_scores_csv(scores_path, scored)
    fig_path = paths.out / f"pr_curve_{variant}.png"
    save_pr_curve(scored.labels, scored.scores, fig_path,
                  title=f"{variant} test PR (AUPRC {metrics['auprc_test']:.4f})")
    log.info("evaluate %s: AUPRC %.4f, NLL %.4f", variant,
             metrics["auprc_test"], metrics["nll_test"])
    return [metrics_path, scores_path, fig_path]


def _stage_export_attention(cfg: ExperimentConfig, paths: _Paths) -> list[Path]:
    _require(paths.cohort, "gen-cohort")
    variant = cfg.train.variant
    if variant not in SEQUENCE_VARIANTS or variant.startswith("RACE"):
        raise ConfigError(
            f"export-attention needs a transformer-encoder variant, not {variant!r}"
        )
    patients, space, by_split = _load_cohort_inputs(cfg, paths, variant)
    model, _ = _load_model(cfg, paths, space)
    scored = score_inputs(model, by_split["test"], split="test")
    cases = [
        (pi, s) for pi, s in zip(by_split["test"], scored.scores) if pi.label == 1
    ]
    if not cases:
        raise ValidationError("export-attention: no cases in the test split")
    target, score = sorted(cases, key=lambda t: (-t[1], t[0].id))[0]
    log.info("export-attention: patient %s (score %.4f)", target.id, score)
    result = encode_sequence(target.vecs, model.encoder, collect=True)
    names = space.feature_names()
    w_down = model.encoder.w_downsize.data
    maps = []
    for t, det in enumerate(result.visits):
        active = np.flatnonzero(target.vecs[t].concat).tolist()
        maps.append(backproject_attention(det.attention, w_down, active, names, visit_index=t))
    csv_path = paths.out / f"attention_{target.id}.csv"
    write_attention_csv(csv_path, maps)
    outputs = [csv_path]
    for m in maps:
        png = paths.out / f"attention_{target.id}_visit{m.visit_index}.png"
        save_attention_heatmap(
            m, png, title=f"{target.id} visit {m.visit_index} (score {score:.4f})"
        )
        outputs.append(png)
    return outputs


def _stage_export_embeddings(cfg: ExperimentConfig, paths: _Paths) -> list[Path]:
    _require(paths.cohort, "gen-cohort")
    variant = cfg.train.variant
    if variant not in SEQUENCE_VARIANTS:
        raise ConfigError(f"export-embeddings needs a sequence variant, not {variant!r}")
    patients, space, by_split = _load_cohort_inputs(cfg, paths, variant)
    model, _ = _load_model(cfg, paths, space)
    rows = [(pi.id, pi.label, model.embedding(pi)) for pi in by_split["test"]]
    out_path = paths.out / f"embeddings_{variant}.csv"
    write_embeddings_csv(out_path, rows)
    return [out_path]


_STAGE_FNS = {
    "gen-cohort": _stage_gen_cohort,
    "pretrain-codes": _stage_pretrain_codes,
    "pretrain-autoencoder": _stage_pretrain_autoencoder,
    "train": _stage_train,
    "evaluate": _stage_evaluate,
    "export-attention": _stage_export_attention,
    "export-embeddings": _stage_export_embeddings,
}

def _stage_input_paths(stage: str, p: _Paths, cfg: ExperimentConfig) -> list[Path]:
    """Artifacts a stage reads; hashed into its manifest for auditability."""
    if stage == "gen-cohort":
        return []
    variant = cfg.train.variant
    inputs = [p.cohort]
    if stage in ("train", "evaluate", "export-attention", "export-embeddings"):
        if variant in SEQUENCE_VARIANTS:
            kind = "relu" if variant.startswith("RACE") else "transformer"
            inputs.append(Path(str(p.ae_base(kind)) + ".json"))
            if not variant.endswith("_base"):
                inputs += [p.codes_manifest, p.codes_align]
    if stage in ("evaluate", "export-attention", "export-embeddings"):
        inputs.append(Path(str(p.model_base(variant)) + ".json"))
    return inputs


def run_stage(stage: str, cfg: ExperimentConfig) -> StageResult:
    """Execute one stage and write its run manifest; returns the outputs."""
    if stage not in _STAGE_FNS:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    paths = _Paths(cfg.out_dir)
    paths.out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    outputs = _STAGE_FNS[stage](cfg, paths)
    wall = time.perf_counter() - started
    inputs = [p for p in _stage_input_paths(stage, paths, cfg) if Path(p).exists()]
    manifest = write_manifest(
        paths.out, stage, cfg.content_hash(), cfg.seed, inputs, outputs, wall,
    )
    log.info("stage %s done in %.1fs (%d artifacts)", stage, wall, len(outputs))
    return StageResult(stage=stage, outputs=[Path(p) for p in outputs], manifest=manifest)
