"""End-to-end single-seed pipeline shared by the CLI and the experiment harness.

Stages: load or generate data, carve a normal-only training pool with a
labeled test set, split off validation, normalize with train statistics,
fit the compression model, extract composite features, train the
estimator, and score.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from cance.compress import (
    AeConfig,
    AutoencoderModel,
    PcaModel,
    fit_pca,
    train_autoencoder,
)
from cance.config import RunConfig
from cance.data import (
    Dataset,
    Normalizer,
    SplitSpec,
    load_csv,
    load_embeddings,
    load_idx,
    load_recipe_dataset,
    make_multimodal,
    split_labeled_benchmark,
    split_train_val,
    synth_generate,
)
from cance.errors import ConfigError
from cance.nce import EstimatorModel, NceConfig, NoiseModel, train_estimator
from cance.nn.serialize import load_container, save_container
from cance.rng import RunRng


def load_benchmark(config: RunConfig, rng: RunRng):
    """Return (train Dataset of normals only, labeled test Dataset)."""
    dc = config.dataset
    if dc.benchmark == "unimodal" and len(dc.normal_classes) > 1:
        raise ConfigError(
            "a single run takes one normal class; several unimodal classes "
            "are swept by evaluation.run_unimodal_sweep"
        )
    if dc.kind == "synth":
        full = synth_generate(dc.synth, rng.stream("synth"), name=dc.name or None)
        return split_labeled_benchmark(full, dc.test_fraction,
                                       rng.stream("benchmark-split"))
    if dc.kind == "recipe":
        full = load_recipe_dataset(dc.recipe, dc.path)
        return split_labeled_benchmark(full, dc.test_fraction,
                                       rng.stream("benchmark-split"))
    if dc.kind == "csv":
        full = load_csv(
            dc.path,
            label_column=dc.label_column or None,
            class_column=dc.class_column or None,
            name=dc.name or None,
        )
    elif dc.kind == "embeddings":
        full = load_embeddings(dc.path, name=dc.name or None)
    elif dc.kind == "idx":
        train_ds = load_idx(dc.train_images, dc.train_labels, name=dc.name or None)
        test_ds = load_idx(dc.test_images, dc.test_labels)
        return make_multimodal(train_ds, dc.normal_classes, test_dataset=test_ds)
    else:
        raise ConfigError(f"unsupported dataset kind {dc.kind!r}")

    if dc.benchmark in ("unimodal", "multimodal"):
        return make_multimodal(
            full,
            dc.normal_classes,
            test_fraction=dc.test_fraction,
            rng=rng.stream("benchmark-split"),
        )
    return split_labeled_benchmark(full, dc.test_fraction,
                                   rng.stream("benchmark-split"))


def fit_compression(config: RunConfig, train_x, val_x, rng: RunRng):
    cc = config.compress
    if cc.method == "pca":
        model = fit_pca(np.vstack([train_x, val_x]), cc.latent_dim)
        return model, {"method": "pca"}
    ae_config = AeConfig(
        latent_dim=cc.latent_dim,
        hidden=tuple(int(w) for w in cc.hidden),
        lam=cc.lam,
        epochs=cc.epochs,
        lr=cc.lr,
        batch_size=cc.batch_size,
        weight_decay=cc.weight_decay,
        checkpoint_on=cc.checkpoint_on,
    )
    model, history = train_autoencoder(
        train_x, val_x, ae_config, rng.stream("ae-init"), rng.stream("ae-shuffle")
    )
    history["method"] = "ae"
    return model, history


def build_nce_config(config: RunConfig, **overrides) -> NceConfig:
    nc = config.nce
    kwargs = dict(
        widths=tuple(int(w) for w in nc.widths),
        nu=nc.nu,
        lr=nc.lr,
        psi_lr=nc.psi_lr or None,
        weight_decay=nc.weight_decay,
        epochs=nc.epochs,
        batch_size=nc.batch_size,
        augmentation=nc.augmentation,
        adapt_noise=nc.adapt_noise,
        warmup_frac=nc.warmup_frac,
        validate_augmented=nc.validate_augmented,
        score_noise=nc.score_noise,
    )
    kwargs.update(overrides)
    return NceConfig(**kwargs)


@dataclass
class RunArtifacts:
    seed: int
    config_hash: str
    compression: object
    normalizer: Normalizer
    estimator: EstimatorModel
    test: Dataset
    test_scores: np.ndarray
    compression_history: dict = field(default_factory=dict)
    estimator_history: dict = field(default_factory=dict)


def run_pipeline(config: RunConfig, seed: int,
                 noise_model: NoiseModel | None = None) -> RunArtifacts:
    rng = RunRng(seed)
    train_pool, test = load_benchmark(config, rng)
    split = SplitSpec(val_fraction=config.eval.val_fraction, seed=seed)
    train, val = split_train_val(train_pool, split, rng.stream("val-split"))

    normalizer = Normalizer(config.dataset.resolved_normalization()).fit(train)
    train_n = normalizer.transform(train)
    val_n = normalizer.transform(val)
    test_n = normalizer.transform(test)

    compression, comp_history = fit_compression(
        config, train_n.features, val_n.features, rng
    )
    z_train = compression.composite(train_n.features)
    z_val = compression.composite(val_n.features)
    z_test = compression.composite(test_n.features)

    estimator, est_history = train_estimator(
        z_train,
        z_val,
        build_nce_config(config),
        rng.stream("nce-init"),
        rng.stream("nce-train"),
        rng.stream("nce-val"),
        noise_model=noise_model,
    )
    scores = estimator.score(z_test)
    return RunArtifacts(
        seed=seed,
        config_hash=config.hash(),
        compression=compression,
        normalizer=normalizer,
        estimator=estimator,
        test=test,
        test_scores=scores,
        compression_history=comp_history,
        estimator_history=est_history,
    )


# --------------------------------------------------------------------------
# artifact persistence

COMPRESSION_FILE = "compression.model"
ESTIMATOR_FILE = "estimator.model"
NORMALIZER_FILE = "normalizer.model"
CONFIG_FILE = "config.ini"
REPORT_FILE = "train_report.json"


def save_run(outdir, config: RunConfig, artifacts: RunArtifacts) -> None:
    os.makedirs(outdir, exist_ok=True)
    tag = {"config_hash": artifacts.config_hash, "seed": artifacts.seed}
    artifacts.compression.save(os.path.join(outdir, COMPRESSION_FILE), tag)
    est_meta = dict(tag)
    aug_fit = artifacts.estimator_history.get("augmentation_fit")
    if aug_fit:
        est_meta["augmentation"] = _jsonable(aug_fit)
    artifacts.estimator.save(os.path.join(outdir, ESTIMATOR_FILE), est_meta)
    norm = artifacts.normalizer
    save_container(
        os.path.join(outdir, NORMALIZER_FILE),
        "normalizer",
        {"method": norm.method, **tag},
        {"shift": norm._shift, "scale": norm._scale},
    )
    with open(os.path.join(outdir, CONFIG_FILE), "w") as fh:
        fh.write(config.canonical())
    report = {
        "config_hash": artifacts.config_hash,
        "seed": artifacts.seed,
        "compression": _jsonable(artifacts.compression_history),
        "estimator": _jsonable(artifacts.estimator_history),
    }
    with open(os.path.join(outdir, REPORT_FILE), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_run(outdir):
    """Load persisted models; refuses directories with mismatched hashes."""
    comp_path = os.path.join(outdir, COMPRESSION_FILE)
    kind, meta, _ = load_container(comp_path)
    compression = (
        AutoencoderModel.load(comp_path) if kind == "autoencoder"
        else PcaModel.load(comp_path)
    )
    estimator = EstimatorModel.load(os.path.join(outdir, ESTIMATOR_FILE))
    _, est_meta, _ = load_container(os.path.join(outdir, ESTIMATOR_FILE))
    nkind, nmeta, narrays = load_container(os.path.join(outdir, NORMALIZER_FILE))
    if nkind != "normalizer":
        raise ConfigError(f"{outdir}: unexpected container kind {nkind!r}")
    hashes = {meta.get("config_hash"), est_meta.get("config_hash"),
              nmeta.get("config_hash")}
    if len(hashes) != 1:
        raise ConfigError(
            f"{outdir}: artifacts carry mismatched config hashes {sorted(hashes)}"
        )
    normalizer = Normalizer(nmeta["method"])
    normalizer._shift = narrays["shift"]
    normalizer._scale = narrays["scale"]
    return compression, estimator, normalizer, hashes.pop()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
