"""Pipeline stages behind the CLI: each stage reads the resolved config,
consumes artifacts from an experiment directory, and writes its outputs there.

Artifact layout under the experiment dir:
    checkpoints/classifier.pt            frozen target classifier
    checkpoints/advfool_epoch_XXXX.pt    generator snapshots
    checkpoints/defended_<tag>.pt        defended classifiers
    images/<attack>_<split>.afis         attack image containers
    images/*_grid.png                    rendered grids
    reports/*.csv, reports/summary.json  tables
    plots/density_*.png                  density line charts
"""

from __future__ import annotations

import json
import os
import re
from pathlib import Path

import numpy as np

from . import analysis, baselines, defenses, evaluation
from .classifier import (ClassifierModel, TrainingConfig, evaluate_topk_accuracy,
                         load_classifier, predict_probs, save_classifier)
from .config import stage_seed
from .data import (DATA_ROOT_ENV, LabeledImageSet, load_dataset, load_image_set,
                   save_image_grid, save_image_set)
from .errors import MissingDataError
from .evaluation import FoolingReport, ReportRow, build_report
from .experiment import ExperimentDir
from .generator import (AttackConfig, GeneratorCheckpoint, derive_seed, generate_advfool,
                        load_checkpoint, train_advfoolgen)

BASELINE_FNS = {"fgsm": "fgsm", "ifgsm": "iterated_fgsm", "pgd": "pgd"}


class MissingArtifactError(MissingDataError):
    """A required pipeline artifact has not been produced yet."""


def _data_root(cfg: dict) -> str:
    return os.environ.get(DATA_ROOT_ENV) or cfg["data"]["root"]


def load_split(cfg: dict, split: str) -> LabeledImageSet:
    subset = cfg["data"][f"{split}_subset"]
    return load_dataset(
        cfg["data"]["name"],
        split,
        subset_size=subset,
        seed=derive_seed(int(cfg["seed"]), "data", split),
        data_root=_data_root(cfg),
    )


def classifier_path(exp: ExperimentDir) -> Path:
    return exp.subdir("checkpoints") / "classifier.pt"


def require_classifier(exp: ExperimentDir) -> ClassifierModel:
    path = classifier_path(exp)
    if not path.is_file():
        raise MissingArtifactError(f"classifier checkpoint missing: {path} (run train-classifier)")
    return load_classifier(path)


def checkpoint_paths(exp: ExperimentDir) -> list[Path]:
    return sorted(exp.subdir("checkpoints").glob("advfool_epoch_*.pt"))


def require_checkpoints(exp: ExperimentDir) -> list[GeneratorCheckpoint]:
    paths = checkpoint_paths(exp)
    if not paths:
        raise MissingArtifactError(
            f"no generator checkpoints under {exp.subdir('checkpoints')} (run train-attack)"
        )
    return [load_checkpoint(p) for p in paths]


def attack_image_path(exp: ExperimentDir, tag: str, split: str) -> Path:
    return exp.subdir("images") / f"{tag}_{split}.afis"


def _attack_config(cfg: dict) -> AttackConfig:
    a = cfg["attack"]
    seed = a["seed"] if a["seed"] is not None else stage_seed(cfg, "train-attack")
    return AttackConfig(
        mgn=a["mgn"],
        weights={"alpha": a["weights"]["alpha"], "beta": a["weights"]["beta"],
                 "gamma": a["weights"]["gamma"], "lambda": a["weights"]["lambda"]},
        latent_dim=a["latent_dim"],
        epochs=a["epochs"],
        d_steps_per_g=a["d_steps_per_g"],
        batch_size=a["batch_size"],
        lr_g=a["lr_g"],
        lr_d=a["lr_d"],
        clip=a["clip"],
        seed=seed,
        gan_loss_mode=a["gan_mode"],
        save_every=a["save_every"],
        base_channels=a["base_channels"],
    )


def _grad_attack_config(section: dict) -> baselines.GradAttackConfig:
    return baselines.GradAttackConfig(
        epsilon=section["epsilon"],
        steps=section["steps"],
        step_size=section.get("step_size"),
        random_start=section.get("random_start", False),
    )


def _classifier_hp(cfg: dict, seed: int) -> TrainingConfig:
    c = cfg["classifier"]
    return TrainingConfig(epochs=c["epochs"], batch_size=c["batch_size"], lr=c["lr"],
                          weight_decay=c["weight_decay"], seed=seed)


def run_baseline(name: str, model: ClassifierModel, batch: LabeledImageSet,
                 cfg: dict, seed: int) -> LabeledImageSet:
    grad_cfg = _grad_attack_config(cfg["baseline"])
    if name == "fgsm":
        return baselines.fgsm(model, batch, grad_cfg.epsilon)
    if name == "ifgsm":
        return baselines.iterated_fgsm(model, batch, grad_cfg)
    if name == "pgd":
        return baselines.pgd(model, batch, grad_cfg, seed=seed)
    raise ValueError(f"unknown baseline attack {name!r}")


# ---------------------------------------------------------------------------
# stages


def stage_train_classifier(cfg: dict, exp: ExperimentDir) -> list[Path]:
    exp.start_stage("train-classifier", cfg, [])
    train_set = load_split(cfg, "train")
    test_set = load_split(cfg, "test")
    hp = _classifier_hp(cfg, stage_seed(cfg, "train-classifier"))
    model = train_classifier_with_eval(train_set, cfg["classifier"]["arch"], hp, test_set)
    out = classifier_path(exp)
    save_classifier(model, out)
    exp.finish_stage("train-classifier", [out])
    return [out]


def train_classifier_with_eval(train_set, arch, hp, test_set) -> ClassifierModel:
    from .classifier import train_classifier

    return train_classifier(train_set, arch, hp, eval_set=test_set)


def stage_train_attack(cfg: dict, exp: ExperimentDir) -> list[Path]:
    clf_file = classifier_path(exp)
    model = require_classifier(exp)
    exp.start_stage("train-attack", cfg, [clf_file])
    train_set = load_split(cfg, "train")
    ckpts = train_advfoolgen(_attack_config(cfg), train_set, model, exp.subdir("checkpoints"))
    outputs = checkpoint_paths(exp) + [exp.subdir("checkpoints") / "history.json"]
    exp.finish_stage("train-attack", outputs)
    return outputs


def stage_generate(cfg: dict, exp: ExperimentDir) -> list[Path]:
    ckpts = require_checkpoints(exp)
    exp.start_stage("generate", cfg, checkpoint_paths(exp))
    test_set = load_split(cfg, "test")
    outputs = []
    rows = cfg["report"]["grid_rows"]
    n_grid = cfg["report"]["grid_images"]
    clean_grid = exp.subdir("images") / "clean_grid.png"
    save_image_grid(test_set.take(np.arange(min(n_grid, len(test_set)))), rows, clean_grid)
    outputs.append(clean_grid)
    for ckpt in ckpts:
        adv = generate_advfool(ckpt, test_set, derive_seed(int(cfg["seed"]), "generate", ckpt.epoch))
        path = attack_image_path(exp, f"advfool_epoch_{ckpt.epoch:04d}", "test")
        save_image_set(adv, path)
        grid = exp.subdir("images") / f"advfool_epoch_{ckpt.epoch:04d}_grid.png"
        save_image_grid(adv.take(np.arange(min(n_grid, len(adv)))), rows, grid)
        outputs.extend([path, grid])
    exp.finish_stage("generate", outputs)
    return outputs


def stage_baseline_attack(cfg: dict, exp: ExperimentDir) -> list[Path]:
    model = require_classifier(exp)
    exp.start_stage("baseline-attack", cfg, [classifier_path(exp)])
    name = cfg["baseline"]["name"]
    outputs = []
    for split in ("test", "train"):
        batch = load_split(cfg, split)
        adv = run_baseline(name, model, batch, cfg,
                           seed=derive_seed(int(cfg["seed"]), "baseline", name, split))
        path = attack_image_path(exp, name, split)
        save_image_set(adv, path)
        outputs.append(path)
    exp.finish_stage("baseline-attack", outputs)
    return outputs


def defense_tag(cfg: dict) -> str:
    d = cfg["defense"]
    kind = d["kind"]
    if kind == "adv_training":
        return "adv_training"
    suffix = {"retrain": "", "bit_depth": f"_bdr{d['bits']}", "jpeg": f"_jpeg{d['quality']}"}[kind]
    return f"{kind}{suffix}_{d['strategy']}_{d.get('source', 'advfool')}"


def _defense_adv_source(cfg: dict, exp: ExperimentDir, model: ClassifierModel,
                        train_set: LabeledImageSet) -> tuple[LabeledImageSet, int | None]:
    source = cfg["defense"].get("source", "advfool")
    if source == "advfool":
        ckpts = require_checkpoints(exp)
        epoch = cfg["defense"]["epoch"]
        if epoch is None:
            epoch = min(c.epoch for c in ckpts)
        matching = [c for c in ckpts if c.epoch == epoch]
        if not matching:
            raise MissingArtifactError(f"no generator checkpoint for epoch {epoch}")
        adv = generate_advfool(matching[0], train_set,
                               derive_seed(int(cfg["seed"]), "defend-gen", epoch))
        return adv, epoch
    if source in BASELINE_FNS:
        adv = run_baseline(source, model, train_set, cfg,
                           seed=derive_seed(int(cfg["seed"]), "defend-baseline", source))
        return adv, None
    raise ValueError(f"unknown defense source {source!r}")


def stage_defend(cfg: dict, exp: ExperimentDir) -> list[Path]:
    model = require_classifier(exp)
    exp.start_stage("defend", cfg, [classifier_path(exp)])
    d = cfg["defense"]
    train_set = load_split(cfg, "train")
    hp = _classifier_hp(cfg, stage_seed(cfg, "defend"))
    arch = cfg["classifier"]["arch"]

    if d["kind"] == "adv_training":
        grad_cfg = baselines.GradAttackConfig(epsilon=d["epsilon"], steps=d["steps"],
                                              random_start=True)
        defended = defenses.adversarial_training(arch, train_set, grad_cfg, hp)
    else:
        adv, epoch = _defense_adv_source(cfg, exp, model, train_set)
        strategy = defenses.RetrainStrategy(d["strategy"])
        if d["kind"] == "retrain":
            defended = defenses.retrain_with_advfool(arch, train_set, adv, strategy, hp)
        elif d["kind"] == "bit_depth":
            spec = defenses.TransformSpec("bit_depth", bits=d["bits"])
            defended = defenses.transform_and_retrain(arch, train_set, adv, spec, strategy, hp)
        elif d["kind"] == "jpeg":
            spec = defenses.TransformSpec("jpeg", quality=d["quality"])
            defended = defenses.transform_and_retrain(arch, train_set, adv, spec, strategy, hp)
        else:
            raise ValueError(f"unknown defense kind {d['kind']!r}")
        defended.metadata["source_epoch"] = epoch

    out = exp.subdir("checkpoints") / f"defended_{defense_tag(cfg)}.pt"
    save_classifier(defended, out)
    exp.finish_stage("defend", [out])
    return [out]


def _attack_sets(exp: ExperimentDir, split: str = "test") -> dict[str, LabeledImageSet]:
    sets = {}
    for path in sorted(exp.subdir("images").glob(f"*_{split}.afis")):
        image_set = load_image_set(path)
        sets[image_set.provenance] = image_set
    return sets


def _clean_accuracy(model: ClassifierModel, clean: LabeledImageSet) -> float:
    preds = defenses.defended_predict(model, clean)
    return float(np.mean(preds.top_labels == clean.labels))


def initial_rows(model: ClassifierModel, clean: LabeledImageSet,
                 attack_sets: dict[str, LabeledImageSet], topk: int) -> list[ReportRow]:
    clean_preds = predict_probs(model, clean)
    clean_acc = float(np.mean(clean_preds.top_labels == clean.labels))
    rows = []
    for tag, adv in sorted(attack_sets.items()):
        adv_preds = predict_probs(model, adv)
        rows.append(
            ReportRow(
                attack=tag,
                defense="none",
                fooling_top1=evaluation.fooling_ratio(clean_preds, adv_preds),
                fooling_top5=evaluation.topk_fooling_ratio(clean_preds, adv_preds, topk),
                clean_acc=clean_acc,
                n=len(adv),
            )
        )
    return rows


def defended_rows(defended: ClassifierModel, clean: LabeledImageSet,
                  attack_sets: dict[str, LabeledImageSet], topk: int, tag: str,
                  cfg: dict) -> list[ReportRow]:
    """Rows for one defended model.

    Extra-class models score attack-generator images by the share escaping the
    extra class; the adversarially trained model is re-attacked white-box by
    the gradient baselines; everything else evaluates the stored images.
    """
    meta = defended.metadata
    extra = meta.get("extra_class")
    clean_preds = defenses.defended_predict(defended, clean)
    clean_acc = float(np.mean(clean_preds.top_labels == clean.labels))
    rows = []
    for attack_tag, adv in sorted(attack_sets.items()):
        is_baseline = any(attack_tag.startswith(p) for p in ("fgsm", "ifgsm", "pgd"))
        if meta.get("defense") == "adv_training" and is_baseline:
            name = attack_tag.split("@", 1)[0]
            adv = run_baseline(name, defended, clean, cfg,
                               seed=derive_seed(int(cfg["seed"]), "reattack", name, tag))
        adv_preds = defenses.defended_predict(defended, adv)
        if extra is not None and attack_tag.startswith("advfool"):
            top1 = evaluation.fooling_ratio_extra_class(adv_preds, extra)
            top5 = None
        else:
            top1 = evaluation.fooling_ratio(clean_preds, adv_preds)
            top5 = evaluation.topk_fooling_ratio(clean_preds, adv_preds, topk)
        rows.append(ReportRow(attack=attack_tag, defense=tag, fooling_top1=top1,
                              fooling_top5=top5, clean_acc=clean_acc, n=len(adv)))
    return rows


def stage_evaluate(cfg: dict, exp: ExperimentDir) -> list[Path]:
    model = require_classifier(exp)
    attack_sets = _attack_sets(exp)
    if not attack_sets:
        raise MissingArtifactError(
            f"no attack image containers under {exp.subdir('images')} "
            "(run generate or baseline-attack)"
        )
    exp.start_stage("evaluate", cfg, [classifier_path(exp)])
    clean = load_split(cfg, "test")
    topk = cfg["evaluate"]["topk"]
    rows = initial_rows(model, clean, attack_sets, topk)
    for path in sorted(exp.subdir("checkpoints").glob("defended_*.pt")):
        defended = load_classifier(path)
        tag = path.stem.removeprefix("defended_")
        rows.extend(defended_rows(defended, clean, attack_sets, topk, tag, cfg))
    report = build_report(rows)
    out = exp.subdir("reports") / "fooling.csv"
    report.save(out)
    exp.finish_stage("evaluate", [out])
    return [out]


def stage_analyze(cfg: dict, exp: ExperimentDir) -> list[Path]:
    ckpts = require_checkpoints(exp)
    exp.start_stage("analyze", cfg, checkpoint_paths(exp))
    clean = load_split(cfg, "test")
    a = cfg["analysis"]
    reference = a["reference_epoch"]
    if reference is None:
        reference = min(c.epoch for c in ckpts)
    table = analysis.epoch_divergence_table(
        ckpts, clean, reference, folds=a["folds"], grid_points=a["grid_points"],
        span=a["span"], seed=derive_seed(int(cfg["seed"]), "analyze"),
    )
    out_csv = exp.subdir("reports") / "epoch_divergence.csv"
    table.save(out_csv)
    outputs = [out_csv]
    stats = analysis.epoch_latent_stats(ckpts, clean,
                                        seed=derive_seed(int(cfg["seed"]), "analyze"))
    ordered = sorted(ckpts, key=lambda c: c.epoch)
    for field, stat_name in (("mu", "mean"), ("logvar", "variance")):
        reduced = analysis.reduce_latent_stats([stats[c.epoch] for c in ordered], field)
        pooled = np.concatenate(reduced)
        h = analysis.grid_search_bandwidth(
            pooled, analysis.default_bandwidth_candidates(pooled), a["folds"])
        grid = np.linspace(pooled.min() - a["span"] * h, pooled.max() + a["span"] * h,
                           a["grid_points"])
        estimates = {c.epoch: analysis.parzen_density(v, h, grid)
                     for c, v in zip(ordered, reduced)}
        plot_path = exp.subdir("plots") / f"density_{stat_name}.png"
        analysis.plot_densities(estimates, stat_name, plot_path)
        outputs.append(plot_path)
    exp.finish_stage("analyze", outputs)
    return outputs


def _parse_defense_spec(item: str) -> dict:
    if item == "retrain":
        return {"kind": "retrain"}
    if item == "adv_training":
        return {"kind": "adv_training"}
    m = re.fullmatch(r"(bit_depth|jpeg):(\d+)", item)
    if not m:
        raise ValueError(f"unknown report defense spec {item!r}")
    kind, value = m.group(1), int(m.group(2))
    return {"kind": kind, "bits" if kind == "bit_depth" else "quality": value}


def reproduce_paper_tables(cfg: dict, exp: ExperimentDir) -> dict:
    """Run the full desk-scale experiment and emit the three tables, grids, and
    density plots. Existing classifier/generator artifacts are reused."""
    exp.ensure_layout()
    if not classifier_path(exp).is_file():
        stage_train_classifier(cfg, exp)
    model = require_classifier(exp)
    if not checkpoint_paths(exp):
        stage_train_attack(cfg, exp)
    ckpts = require_checkpoints(exp)
    stage_generate(cfg, exp)
    for name in cfg["report"]["baselines"]:
        base_cfg = {**cfg, "baseline": {**cfg["baseline"], "name": name}}
        stage_baseline_attack(base_cfg, exp)
    stage_analyze(cfg, exp)  # epoch_divergence.csv plus density plots

    exp.start_stage("report", cfg, [classifier_path(exp)])
    clean_test = load_split(cfg, "test")
    clean_train = load_split(cfg, "train")
    topk = cfg["evaluate"]["topk"]
    attack_sets = _attack_sets(exp)

    initial = build_report(initial_rows(model, clean_test, attack_sets, topk))
    initial_path = exp.subdir("reports") / "initial_fooling.csv"
    initial.save(initial_path)

    advfool_rows = [r for r in initial.rows if r.attack.startswith("advfool")]
    summary = {
        "advfool_initial_fooling": {
            "min": min(r.fooling_top1 for r in advfool_rows),
            "max": max(r.fooling_top1 for r in advfool_rows),
            "epochs": [r.attack for r in advfool_rows],
        }
    }

    hp = _classifier_hp(cfg, stage_seed(cfg, "report-defend"))
    arch = cfg["classifier"]["arch"]
    e0 = min(c.epoch for c in ckpts)
    ckpt0 = next(c for c in ckpts if c.epoch == e0)
    advfool_train = generate_advfool(ckpt0, clean_train,
                                     derive_seed(int(cfg["seed"]), "defend-gen", e0))
    baseline_train = {
        name: run_baseline(name, model, clean_train, cfg,
                           seed=derive_seed(int(cfg["seed"]), "baseline", name, "train"))
        for name in cfg["report"]["baselines"]
    }

    defense_rows: list[ReportRow] = []
    for item in cfg["report"]["defenses"]:
        spec = _parse_defense_spec(item)
        if spec["kind"] == "adv_training":
            grad_cfg = baselines.GradAttackConfig(
                epsilon=cfg["defense"]["epsilon"], steps=cfg["defense"]["steps"],
                random_start=True)
            robust = defenses.adversarial_training(arch, clean_train, grad_cfg, hp)
            defense_rows.extend(
                defended_rows(robust, clean_test, attack_sets, topk, item, cfg))
            continue

        transform = None
        if spec["kind"] == "bit_depth":
            transform = defenses.TransformSpec("bit_depth", bits=spec["bits"])
        elif spec["kind"] == "jpeg":
            transform = defenses.TransformSpec("jpeg", quality=spec["quality"])

        extra_strategy = defenses.RetrainStrategy("extra_class")
        if transform is None:
            advfool_model = defenses.retrain_with_advfool(
                arch, clean_train, advfool_train, extra_strategy, hp)
        else:
            advfool_model = defenses.transform_and_retrain(
                arch, clean_train, advfool_train, transform, extra_strategy, hp)
        advfool_sets = {t: s for t, s in attack_sets.items() if t.startswith("advfool")}
        defense_rows.extend(
            defended_rows(advfool_model, clean_test, advfool_sets, topk, item, cfg))

        orig_strategy = defenses.RetrainStrategy("original_labels")
        for name, adv_train in baseline_train.items():
            if transform is None:
                base_model = defenses.retrain_with_advfool(
                    arch, clean_train, adv_train, orig_strategy, hp)
            else:
                base_model = defenses.transform_and_retrain(
                    arch, clean_train, adv_train, transform, orig_strategy, hp)
            base_sets = {t: s for t, s in attack_sets.items() if t.startswith(name)}
            defense_rows.extend(
                defended_rows(base_model, clean_test, base_sets, topk, item, cfg))

    defense_report = build_report(defense_rows)
    defense_path = exp.subdir("reports") / "defense_fooling.csv"
    defense_report.save(defense_path)

    summary_path = exp.subdir("reports") / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    outputs = [initial_path, defense_path, summary_path]
    outputs += sorted(exp.subdir("images").glob("*.png"))
    exp.finish_stage("report", outputs)
    return summary


def stage_report(cfg: dict, exp: ExperimentDir) -> list[Path]:
    reproduce_paper_tables(cfg, exp)
    return exp.stage_outputs("report")


STAGES = {
    "train-classifier": stage_train_classifier,
    "train-attack": stage_train_attack,
    "generate": stage_generate,
    "baseline-attack": stage_baseline_attack,
    "defend": stage_defend,
    "evaluate": stage_evaluate,
    "analyze": stage_analyze,
    "report": stage_report,
}
